"""Objective metrics for converted utterances and the stage-isolation runner.

Speaker and emotion embeddings come from the frozen mean-pool probes; content is
scored by the frame-level phoneme probe. All metric functions are pure.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .errors import DataError, InputError, NumericError, StateError
from .pipeline import SETTINGS, ControlSetting, Converted, ModelBundle, convert, plan_conversions
from .probes import FrameClassifier, MeanPoolClassifier, collapse_runs

EER_TRIALS = "genuine=(converted, same-speaker real test utt); impostor=(converted, other-speaker real test utt); 1:1, fixed seed"


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


def _unit(x, what: str) -> np.ndarray:
    x = _as2d(x)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n < 1e-12):
        raise NumericError(f"zero-norm {what} embedding")
    return x / n


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine similarity of two equally long embedding lists."""
    a, b = _as2d(a), _as2d(b)
    if len(a) != len(b):
        raise InputError(f"paired embedding lists differ in length ({len(a)} vs {len(b)})")
    return np.sum(_unit(a, "first") * _unit(b, "second"), axis=1)


def speaker_centroids(embeddings, speaker_ids, n_speakers: int | None = None) -> np.ndarray:
    """Unit-normalised per-speaker mean embedding, one row per speaker id."""
    x = _as2d(embeddings)
    ids = np.asarray(speaker_ids, dtype=np.int64)
    if len(ids) != len(x):
        raise InputError("one speaker id per embedding expected")
    n = int(ids.max()) + 1 if n_speakers is None else n_speakers
    out = np.zeros((n, x.shape[1]))
    for s in range(n):
        rows = x[ids == s]
        if len(rows) == 0:
            raise DataError(f"no training embedding for speaker {s}")
        m = rows.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm < 1e-12:
            raise NumericError(f"degenerate centroid for speaker {s}: embeddings cancel out")
        out[s] = m / norm
    return out


def spk_cent_sim(embeddings, centroids, target_speakers) -> float:
    """Mean cosine between each converted embedding and its target speaker's centroid."""
    c = np.asarray(centroids)[np.asarray(target_speakers, dtype=np.int64)]
    return float(np.mean(cosine_rows(embeddings, c)))


def emo_sim(converted, references) -> float:
    return float(np.mean(cosine_rows(converted, references)))


def eer(genuine, impostor) -> float:
    """Equal error rate; a trial is accepted when score >= threshold.

    Sweeps every distinct score (plus +inf), then interpolates linearly between
    the two thresholds whose FAR - FRR changes sign.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise InputError("EER needs non-empty genuine and impostor score lists")
    if not (np.isfinite(g).all() and np.isfinite(i).all()):
        raise NumericError("non-finite verification score")
    thr = np.append(np.unique(np.concatenate([g, i])), np.inf)
    far = 1.0 - np.searchsorted(i, thr, side="left") / i.size
    frr = np.searchsorted(g, thr, side="left") / g.size
    d = far - frr  # starts at >= 0 (FRR=0 at the lowest threshold), ends at -1
    k = int(np.argmax(d <= 0))
    if k == 0 or d[k] == 0:
        return float(far[k])
    a = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


def eca(probe: MeanPoolClassifier, mels: Sequence[np.ndarray], labels) -> float:
    """Top-1 emotion accuracy of the frozen probe; ties go to the lowest class index."""
    return float(np.mean(emotion_hits(probe, mels, labels)))


def emotion_hits(probe: MeanPoolClassifier, mels: Sequence[np.ndarray], labels) -> np.ndarray:
    if not probe.trained:
        raise StateError("emotion probe has not been trained")
    if len(mels) == 0:
        raise InputError("no converted utterances to score")
    labels = np.asarray(labels)
    if len(labels) != len(mels):
        raise InputError("one label per utterance expected")
    pred = np.argmax(probe.logits(mels).numpy(), axis=1)
    return pred == labels


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def content_accuracy(probe: FrameClassifier, mel: np.ndarray, reference: Sequence[int]) -> float:
    """Intelligibility proxy: 1 - edit distance / length on collapsed probe labels.

    Not a word error rate; the probe reads pseudo-phonemes frame by frame.
    """
    if not probe.trained:
        raise StateError("content probe has not been trained")
    if len(reference) == 0:
        raise InputError("empty reference content")
    hyp = collapse_runs(probe.predict_frames(mel)) if len(mel) else np.zeros(0, dtype=np.int64)
    return max(0.0, 1.0 - edit_distance(list(hyp), list(reference)) / len(reference))


def binomial_ci(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="exact")
    return float(ci.low), float(ci.high)


def verification_trials(converted_emb, converted_speakers, real_emb, real_speakers, seed: int = 0):
    """One genuine and one impostor score per converted utterance."""
    conv, real = _as2d(converted_emb), _as2d(real_emb)
    rs = np.asarray(real_speakers)
    if len(np.unique(rs)) < 2:
        raise DataError("impostor trials need real utterances from at least two speakers")
    rng = np.random.default_rng([seed, 7])
    gi, ii = [], []
    for s in np.asarray(converted_speakers):
        same, other = np.flatnonzero(rs == s), np.flatnonzero(rs != s)
        if len(same) == 0:
            raise DataError(f"no real utterance of speaker {s} for genuine trials")
        gi.append(rng.choice(same))
        ii.append(rng.choice(other))
    return cosine_rows(conv, real[gi]), cosine_rows(conv, real[ii])


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    eca: float
    emo_sim: float
    spk_cent_sim: float
    eer: float
    content_acc: float
    n_utterances: int
    n_genuine: int
    n_impostor: int
    eca_ci: tuple[float, float]
    fingerprint: dict = field(default_factory=dict)
    eer_trials: str = EER_TRIALS

    def __post_init__(self):
        for name in ("eca", "eer"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise NumericError(f"{name} outside [0, 1]")
        for name in ("emo_sim", "spk_cent_sim"):
            if not -1.0 - 1e-12 <= getattr(self, name) <= 1.0 + 1e-12:
                raise NumericError(f"{name} outside [-1, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["eca_ci"] = tuple(d["eca_ci"])
        return cls(**d)

    def csv_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k not in ("fingerprint", "eca_ci", "eer_trials")}
        row["eca_ci_low"], row["eca_ci_high"] = self.eca_ci
        row["fingerprint"] = fingerprint_digest(self.fingerprint)
        return row

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
        js.write_text(self.to_json() + "\n")
        write_csv(cs, [self.csv_row()])
        return js, cs


def fingerprint_digest(fp: dict) -> str:
    return hashlib.sha256(json.dumps(fp, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    if not rows:
        raise InputError("nothing to write")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def speaker_anchors(bundle: ModelBundle) -> np.ndarray:
    corpus = bundle.corpus
    tr = corpus.split.train
    emb = bundle.probes.speaker.embed([corpus.mel(s) for s in tr]).numpy()
    return speaker_centroids(emb, [s.speaker_id for s in tr], corpus.gcfg.n_speakers)


def evaluate(bundle: ModelBundle, converted: Sequence[Converted], fingerprint: dict | None = None,
             centroids: np.ndarray | None = None):
    """Score converted utterances; returns (MetricReport, per-utterance rows)."""
    if len(converted) == 0:
        raise InputError("no converted utterances to evaluate")
    corpus, probes = bundle.corpus, bundle.probes
    centroids = speaker_anchors(bundle) if centroids is None else centroids
    mels = [c.mel for c in converted]
    convs = [c.conversion for c in converted]
    targets = np.array([c.target_emotion for c in convs])
    speakers = np.array([c.source.speaker_id for c in convs])

    hits = emotion_hits(probes.emotion, mels, targets)
    pred = np.argmax(probes.emotion.logits(mels).numpy(), axis=1)
    emo_ref = [corpus.mel(corpus.spec(c.stage1_ref.content_id, c.stage1_ref.speaker_id, c.target_emotion)) for c in convs]
    emo = cosine_rows(probes.emotion.embed(mels).numpy(), probes.emotion.embed(emo_ref).numpy())
    spk_emb = probes.speaker.embed(mels).numpy()
    spk = cosine_rows(spk_emb, centroids[speakers])
    content = np.array([content_accuracy(probes.content, c.mel, corpus.content(c.conversion.source).tokens) for c in converted])

    test = corpus.split.test
    real = probes.speaker.embed([corpus.mel(s) for s in test]).numpy()
    seed = bundle.cfg.eval.seed
    gen, imp = verification_trials(spk_emb, speakers, real, [s.speaker_id for s in test], seed)

    rows = [
        {
            "uid": c.source.uid, "source_emotion": c.source.emotion_id, "target_emotion": c.target_emotion,
            "stage1_ref": c.stage1_ref.uid, "stage2_ref": c.stage2_ref.uid, "predicted_emotion": int(p),
            "correct": int(h), "emo_sim": float(e), "spk_cent_sim": float(s), "content_acc": float(ca),
            "n_tokens": len(cv.tokens), "n_frames": len(cv.mel),
        }
        for c, cv, p, h, e, s, ca in zip(convs, converted, pred, hits, emo, spk, content)
    ]
    k = int(hits.sum())
    report = MetricReport(
        eca=k / len(hits), emo_sim=float(emo.mean()), spk_cent_sim=float(spk.mean()), eer=eer(gen, imp),
        content_acc=float(content.mean()), n_utterances=len(hits), n_genuine=len(gen), n_impostor=len(imp),
        eca_ci=binomial_ci(k, len(hits)), fingerprint=dict(fingerprint or {}),
    )
    return report, rows


def run_fingerprint(bundle: ModelBundle, variant: str, setting: ControlSetting) -> dict:
    return {
        "variant": variant,
        "setting": setting.name,
        "stage1_ref_emotion": setting.stage1_ref_emotion,
        "stage2_ref_emotion": setting.stage2_ref_emotion,
        "config": fingerprint_digest(bundle.cfg.fingerprint()),
        "eval_seed": bundle.cfg.eval.seed,
        "sampling_seed": bundle.cfg.sampling.seed,
    }


def run_stage_isolation(bundle: ModelBundle, variant: str, setting: ControlSetting | str,
                        centroids: np.ndarray | None = None):
    """Convert the planned test items under one control setting and score them."""
    if isinstance(setting, str):
        if setting not in SETTINGS:
            raise InputError(f"unknown control setting {setting!r}; choose from {sorted(SETTINGS)}")
        setting = SETTINGS[setting]
    corpus = bundle.corpus
    plan = plan_conversions(corpus, setting, bundle.cfg)
    ref_contents = set(int(c) for c in corpus.split.reference_contents)
    for c in plan:
        for r in (c.stage1_ref, c.stage2_ref):
            if r.content_id not in ref_contents:
                raise DataError(f"no reference utterance for speaker {r.speaker_id}, emotion {r.emotion_id}")
    converted = convert(bundle, bundle.variant(variant), plan)
    return evaluate(bundle, converted, run_fingerprint(bundle, variant, setting), centroids)


def ablation_grid(bundle: ModelBundle, variants: Sequence[str] = ("baseline", "deep-prefix"),
                  settings: Sequence[str] = ("sequence", "acoustic", "joint")) -> list[dict]:
    """One row per (variant, setting): the stage-isolation table."""
    centroids = speaker_anchors(bundle)
    table = []
    for v in variants:
        for s in settings:
            report, _ = run_stage_isolation(bundle, v, s, centroids)
            st = SETTINGS[s]
            table.append({
                "model": v, "setting": s, "stage1_ref": st.stage1_ref_emotion, "stage2_ref": st.stage2_ref_emotion,
                **report.csv_row(),
            })
    return table
