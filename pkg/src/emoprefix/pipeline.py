"""Training stages and the end-to-end conversion pipeline.

Order: tokenizer -> probes / backbone / stage2 -> prefix. Every stage is a plain
function of the corpus, the config and its upstream artifacts; checkpoint helpers
at the bottom record the checksums of those upstream files.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .acoustic_model import FlowDecoder, batch_packs, condition_pack, decode_batch, fm_train_step, layout_targets
from .config import RunConfig
from .errors import ConfigError, NumericError, PipelineOrderError
from .numerics import AdamW, clip_grad_norm, file_checksum, load_checkpoint, load_module_state, save_checkpoint
from .prefix_encoder import PrefixEncoder, encode_prefix
from .probes import FrameClassifier, MeanPoolClassifier
from .sequence_model import SequenceModel, lm_loss, make_batch, train_step
from .toyspeech import Codebook, Corpus, TokenSeq, UtteranceSpec, render, segment_boundaries

log = logging.getLogger(__name__)


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warmup then cosine decay to 10% of peak."""
    if step <= warmup:
        return peak * step / max(warmup, 1)
    frac = (step - warmup) / max(total - warmup, 1)
    return peak * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


class Tokens:
    """Memoised audio/content tokens for corpus utterances."""

    def __init__(self, corpus: Corpus, codebook: Codebook):
        self.corpus, self.codebook = corpus, codebook
        self._audio: dict[UtteranceSpec, np.ndarray] = {}

    def audio(self, spec: UtteranceSpec) -> np.ndarray:
        if spec not in self._audio:
            self._audio[spec] = self.codebook.quantize(self.corpus.mel(spec)).tokens
        return self._audio[spec]

    def content(self, spec: UtteranceSpec) -> np.ndarray:
        return self.corpus.content(spec).tokens


# ---------------------------------------------------------------------------
# stage: tokenizer and probes


def train_codebook(corpus: Corpus, cfg: RunConfig) -> Codebook:
    mels = [corpus.mel(s) for s in corpus.split.train]
    return Codebook(corpus.gcfg, cfg.tokenizer.codebook_size).fit(mels, seed=cfg.tokenizer.seed, iters=cfg.tokenizer.iters,
                                                                  max_frames=cfg.tokenizer.max_frames)


@dataclass
class Probes:
    emotion_embedder: MeanPoolClassifier
    emotion: MeanPoolClassifier
    speaker: MeanPoolClassifier
    content: FrameClassifier


def frame_phonemes(spec: UtteranceSpec, corpus: Corpus) -> np.ndarray:
    ends = segment_boundaries(spec.content_id, spec.emotion_id, corpus.gcfg)
    seg = np.searchsorted(ends, np.arange(ends[-1]), side="right")
    return corpus.content(spec).tokens[seg]


def train_emotion_embedder(corpus: Corpus, cfg: RunConfig) -> MeanPoolClassifier:
    g = corpus.gcfg
    tr, te = corpus.split.train, corpus.split.test
    model = MeanPoolClassifier(g.n_mel, g.n_emotions, cfg.prefix.d_emo)
    model.fit([corpus.mel(s) for s in tr], [s.emotion_id for s in tr], [corpus.mel(s) for s in te],
              [s.emotion_id for s in te], steps=cfg.train.probe_steps, seed=cfg.train.seed + 11)
    return model


def train_probes(corpus: Corpus, cfg: RunConfig) -> Probes:
    """Emotion embedder plus the evaluation probes; each must clear its accuracy floor."""
    g = corpus.gcfg
    tr, te = corpus.split.train, corpus.split.test
    tr_m, te_m = [corpus.mel(s) for s in tr], [corpus.mel(s) for s in te]
    steps, seed = cfg.train.probe_steps, cfg.train.seed

    emotion = MeanPoolClassifier(g.n_mel, g.n_emotions, 16)
    emotion.fit(tr_m, [s.emotion_id for s in tr], te_m, [s.emotion_id for s in te], steps=steps, seed=seed + 23)
    speaker = MeanPoolClassifier(g.n_mel, g.n_speakers, 16)
    speaker.fit(tr_m, [s.speaker_id for s in tr], te_m, [s.speaker_id for s in te], steps=steps, seed=seed + 37)

    rng = np.random.default_rng(seed + 41)
    sub_tr = [tr[i] for i in rng.choice(len(tr), size=min(len(tr), 200), replace=False)]
    sub_te = [te[i] for i in rng.choice(len(te), size=min(len(te), 100), replace=False)]
    content = FrameClassifier(g.n_mel, g.n_phonemes)
    content.fit(np.concatenate([corpus.mel(s) for s in sub_tr]), np.concatenate([frame_phonemes(s, corpus) for s in sub_tr]),
                np.concatenate([corpus.mel(s) for s in sub_te]), np.concatenate([frame_phonemes(s, corpus) for s in sub_te]),
                steps=steps, seed=seed + 43)
    return Probes(train_emotion_embedder(corpus, cfg), emotion, speaker, content)


# ---------------------------------------------------------------------------
# pair sampling


def _other_content(rng, contents: Sequence[int], c: int) -> int:
    while True:
        o = int(contents[rng.integers(len(contents))])
        if o != c or len(contents) == 1:
            return o


def sample_pairs(corpus: Corpus, rng: np.random.Generator, n: int, ref_emotion: str):
    """(target, reference) pairs from the training split; same speaker, different content."""
    train = corpus.split.train
    contents = corpus.split.train_contents
    out = []
    for i in rng.integers(len(train), size=n):
        t = train[i]
        e = int(rng.integers(corpus.gcfg.n_emotions)) if ref_emotion == "random" else t.emotion_id
        out.append((t, corpus.spec(_other_content(rng, contents, t.content_id), t.speaker_id, e)))
    return out


# ---------------------------------------------------------------------------
# stage: backbone, stage 2, prefix


def stage2_reference(corpus: Corpus, ref: UtteranceSpec, energy_emotion: int) -> np.ndarray:
    if ref.emotion_id == energy_emotion:
        return corpus.mel(ref)
    return render(ref, corpus.gcfg, energy_emotion=energy_emotion)


def pretrain_backbone(corpus: Corpus, codebook: Codebook, cfg: RunConfig, log_rows: list | None = None,
                      model: SequenceModel | None = None, start_step: int = 0) -> SequenceModel:
    """Vanilla style-prompted AR model: [reference tokens][content] -> audio tokens."""
    tc = cfg.train
    torch.manual_seed(tc.seed)
    model = model or SequenceModel(cfg.sequence)
    toks = Tokens(corpus, codebook)
    opt = AdamW(model.parameters(), lr=tc.backbone_lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 1, start_step])
    n_ref = tc.stage1_ref_frames
    for step in range(start_step + 1, tc.backbone_steps + 1):
        pairs = sample_pairs(corpus, rng, tc.batch_size, tc.backbone_ref_emotion)
        batch = make_batch(cfg.sequence, [toks.content(t) for t, _ in pairs], [toks.audio(r)[:n_ref] for _, r in pairs],
                           [toks.audio(t) for t, _ in pairs])
        opt.zero_grad()
        loss = lm_loss(model, batch)
        loss.backward()
        clip_grad_norm(opt.params, 1.0)
        opt.step(lr=lr_at(step, tc.backbone_steps, tc.backbone_lr, tc.warmup))
        _log(log_rows, step, loss.item(), "backbone", tc.backbone_steps)
    return model


def train_stage2(corpus: Corpus, codebook: Codebook, cfg: RunConfig, log_rows: list | None = None,
                 model: FlowDecoder | None = None, start_step: int = 0) -> FlowDecoder:
    """Flow-matching decoder; reference = same speaker, other content.

    The reference always carries the target's energy offset. With
    ``train.stage2_energy = random`` that offset belongs to an independently drawn
    emotion (the target is re-rendered with it), so the reference's energy says
    nothing about the target's prosody. ``train.stage2_ref_prosody = random`` does
    the same for the reference's own pitch and timing. Together they leave the
    tokens as the only source of prosody and the reference as the only source of
    energy and timbre.
    """
    tc = cfg.train
    torch.manual_seed(tc.seed + 2)
    model = model or FlowDecoder(cfg.acoustic)
    toks = Tokens(corpus, codebook)
    opt = AdamW(model.parameters(), lr=tc.stage2_lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 2, start_step])
    gen = torch.Generator().manual_seed(tc.seed + 2 + start_step)
    n_ref, n_emo = tc.stage2_ref_frames, corpus.gcfg.n_emotions
    for step in range(start_step + 1, tc.stage2_steps + 1):
        pairs = sample_pairs(corpus, rng, tc.batch_size, tc.stage2_ref_prosody)
        energy = [int(e) for e in rng.integers(n_emo, size=len(pairs))] if tc.stage2_energy == "random" \
            else [t.emotion_id for t, _ in pairs]
        refs = [stage2_reference(corpus, r, e)[:n_ref] for (_, r), e in zip(pairs, energy)]
        packs = [condition_pack(toks.audio(t), codebook.quantize(m).tokens, m) for (t, _), m in zip(pairs, refs)]
        pb = batch_packs(packs, cfg.acoustic.n_mel)
        x1 = layout_targets(pb, [stage2_reference(corpus, t, e) for (t, _), e in zip(pairs, energy)])
        opt.lr = lr_at(step, tc.stage2_steps, tc.stage2_lr, tc.warmup)
        loss = fm_train_step(model, opt, pb, x1, gen)
        _log(log_rows, step, loss, "stage2", tc.stage2_steps)
    return model


def train_prefix(corpus: Corpus, codebook: Codebook, backbone: SequenceModel, embedder: MeanPoolClassifier,
                 cfg: RunConfig, mode: str = "deep-prefix", log_rows: list | None = None,
                 state: tuple[SequenceModel, PrefixEncoder] | None = None, start_step: int = 0):
    """Fine-tune prefix encoder + prefix projections + LoRA on a frozen backbone copy."""
    if mode not in ("deep-prefix", "input-prepend"):
        raise ConfigError(f"prefix training needs a prefix mode, got {mode!r}")
    tc = cfg.train
    torch.manual_seed(tc.seed + 3)
    if state is None:
        model = copy.deepcopy(backbone).prepare_finetune(deep_prefix=mode == "deep-prefix", seed=tc.seed + 3)
        encoder = PrefixEncoder(cfg.prefix)
    else:
        model, encoder = state
    toks = Tokens(corpus, codebook)
    opt = AdamW(list(encoder.parameters()) + model.adapter_parameters(), lr=tc.prefix_lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 3, start_step])
    shuffle_rng = np.random.default_rng([tc.seed, 4, start_step])
    n_ref = tc.stage1_ref_frames
    for step in range(start_step + 1, tc.prefix_steps + 1):
        pairs = sample_pairs(corpus, rng, tc.batch_size, "target")
        refs = [toks.audio(r)[:n_ref] for _, r in pairs] if tc.keep_style_prompt else None
        batch = make_batch(cfg.sequence, [toks.content(t) for t, _ in pairs], refs, [toks.audio(t) for t, _ in pairs])
        ref_mels = [corpus.mel(r) for _, r in pairs]
        opt.lr = lr_at(step, tc.prefix_steps, tc.prefix_lr, tc.warmup)
        loss = train_step(model, batch, opt, lambda: encode_prefix(encoder, embedder, ref_mels, shuffle_rng), mode)
        _log(log_rows, step, loss, f"prefix[{mode}]", tc.prefix_steps)
    return model, encoder


def _log(rows, step, loss, stage, total):
    if not math.isfinite(loss):
        raise NumericError(f"{stage}: non-finite loss at step {step}")
    if rows is not None:
        rows.append((step, loss))
    if step == 1 or step % 200 == 0 or step == total:
        log.info("%s step %d/%d loss %.4f", stage, step, total, loss)


# ---------------------------------------------------------------------------
# conversion


@dataclass(frozen=True)
class ControlSetting:
    stage1_ref_emotion: str
    stage2_ref_emotion: str
    name: str = ""

    def __post_init__(self):
        for v in (self.stage1_ref_emotion, self.stage2_ref_emotion):
            if v not in ("source", "target"):
                raise ConfigError(f"reference emotion must be 'source' or 'target', got {v!r}")


CONTROL_SEQUENCE = ControlSetting("target", "source", "sequence")
CONTROL_ACOUSTIC = ControlSetting("source", "target", "acoustic")
JOINT = ControlSetting("target", "target", "joint")
SETTINGS = {s.name: s for s in (CONTROL_SEQUENCE, CONTROL_ACOUSTIC, JOINT)}


@dataclass(frozen=True)
class Conversion:
    source: UtteranceSpec
    target_emotion: int
    stage1_ref: UtteranceSpec
    stage2_ref: UtteranceSpec

    @property
    def target(self) -> UtteranceSpec:
        return UtteranceSpec(self.source.content_id, self.source.speaker_id, self.target_emotion, self.source.seed)


def plan_conversions(corpus: Corpus, setting: ControlSetting, cfg: RunConfig) -> list[Conversion]:
    """Test conversions (source emotion != target emotion) with a fixed reference per item.

    The sampled sources, targets and reference content ids depend only on the eval
    seed, so different settings and models see the same items.
    """
    g, sp = corpus.gcfg, corpus.split
    cands = [(c, s, a, b) for c in sp.test_contents for s in range(g.n_speakers)
             for a in range(g.n_emotions) for b in range(g.n_emotions) if a != b]
    rng = np.random.default_rng([cfg.eval.seed, 5])
    order = np.sort(rng.permutation(len(cands))[: cfg.eval.max_conversions])
    out = []
    for i in order:
        c, s, src, tgt = cands[i]
        ref_c = int(sp.reference_contents[rng.integers(len(sp.reference_contents))])
        ref_s = s
        if cfg.eval.ref_pairing == "cross-speaker" and g.n_speakers > 1:
            ref_s = int((s + 1 + rng.integers(g.n_speakers - 1)) % g.n_speakers)
        e1 = tgt if setting.stage1_ref_emotion == "target" else src
        e2 = tgt if setting.stage2_ref_emotion == "target" else src
        out.append(Conversion(corpus.spec(c, s, src), tgt, corpus.spec(ref_c, ref_s, e1), corpus.spec(ref_c, ref_s, e2)))
    return out


@dataclass
class Variant:
    """One Stage-1 configuration: the frozen backbone alone, or a prefix-tuned model."""

    model: SequenceModel
    mode: str = "none"
    encoder: PrefixEncoder | None = None
    name: str = "baseline"


@dataclass
class ModelBundle:
    cfg: RunConfig
    corpus: Corpus
    codebook: Codebook
    probes: Probes
    backbone: SequenceModel
    stage2: FlowDecoder
    variants: dict[str, Variant] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def variant(self, name: str) -> Variant:
        if name == "baseline" and name not in self.variants:
            return Variant(self.backbone)
        return self.variants[name]


@dataclass
class Converted:
    conversion: Conversion
    tokens: TokenSeq
    mel: np.ndarray


@torch.no_grad()
def convert(bundle: ModelBundle, variant: Variant, conversions: Sequence[Conversion]) -> list[Converted]:
    cfg, corpus = bundle.cfg, bundle.corpus
    toks = Tokens(corpus, bundle.codebook)
    sc, bs = cfg.sampling, cfg.eval.batch_size
    n1, n2 = cfg.train.stage1_ref_frames, cfg.train.stage2_ref_frames
    keep_prompt = variant.mode == "none" or cfg.train.keep_style_prompt
    out: list[Converted] = []
    for b, s in enumerate(range(0, len(conversions), bs)):
        chunk = conversions[s : s + bs]
        prefix = None
        if variant.mode != "none":
            prefix = encode_prefix(variant.encoder, bundle.probes.emotion_embedder, [corpus.mel(c.stage1_ref) for c in chunk])
        gen = variant.model.generate(
            [toks.content(c.source) for c in chunk],
            [toks.audio(c.stage1_ref)[:n1] for c in chunk] if keep_prompt else None,
            prefix=prefix, mode=variant.mode, temperature=sc.temperature, top_k=sc.top_k,
            seed=sc.seed + b, max_len=sc.max_len, min_len=1,
        )
        mels = decode_batch(
            bundle.stage2, gen,
            [toks.audio(c.stage2_ref)[:n2] for c in chunk],
            [corpus.mel(c.stage2_ref)[:n2] for c in chunk],
            steps=sc.fm_steps, seeds=[sc.seed * 100_003 + s + i for i in range(len(chunk))], batch_size=bs,
        )
        out.extend(Converted(c, t, m) for c, t, m in zip(chunk, gen, mels))
    return out


# ---------------------------------------------------------------------------
# whole pipeline in memory


def build_all(cfg: RunConfig, variants: Sequence[str] = ("deep-prefix",), log_rows: dict | None = None) -> ModelBundle:
    """Generate the corpus and train every stage; returns the ready bundle."""
    timings: dict[str, float] = {}
    rows = log_rows if log_rows is not None else {}

    def timed(name, fn):
        t0 = time.perf_counter()
        res = fn()
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1fs", name, timings[name])
        return res

    corpus = timed("corpus", lambda: _materialize(Corpus(cfg.corpus, cfg.split)))
    codebook = timed("tokenizer", lambda: train_codebook(corpus, cfg))
    probes = timed("probes", lambda: train_probes(corpus, cfg))
    backbone = timed("backbone", lambda: pretrain_backbone(corpus, codebook, cfg, rows.setdefault("backbone", [])))
    backbone.eval()
    stage2 = timed("stage2", lambda: train_stage2(corpus, codebook, cfg, rows.setdefault("stage2", [])))
    bundle = ModelBundle(cfg, corpus, codebook, probes, backbone, stage2, timings=timings)
    for mode in variants:
        model, enc = timed(f"prefix[{mode}]", lambda: train_prefix(corpus, codebook, backbone, probes.emotion_embedder,
                                                                   cfg, mode, rows.setdefault(mode, [])))
        bundle.variants[mode] = Variant(model, mode, enc, mode)
    return bundle


def _materialize(corpus: Corpus) -> Corpus:
    for s in corpus.all_specs:
        corpus.mel(s)
    return corpus


# ---------------------------------------------------------------------------
# checkpoints with upstream checksums


def save_stage(path: Path, sections: dict, upstream: dict[str, Path], meta: dict | None = None) -> Path:
    info = dict(meta or {})
    info["upstream"] = {name: file_checksum(p) for name, p in upstream.items()}
    info["upstream_paths"] = {name: str(p) for name, p in upstream.items()}
    return save_checkpoint(path, sections, info)


def load_stage(path: Path, stage: str, upstream: dict[str, Path] | None = None):
    """Load a checkpoint, refusing it if any upstream artifact changed since training.

    ``upstream`` overrides the recorded artifact locations (a moved workspace).
    """
    if not Path(path).exists():
        raise PipelineOrderError(f"missing {stage!r} checkpoint at {path}; run `train --stage {stage}` first")
    sections, meta = load_checkpoint(path)
    for name, digest in meta.get("upstream", {}).items():
        up = Path((upstream or {}).get(name, meta["upstream_paths"][name]))
        if not up.exists():
            raise PipelineOrderError(f"{stage}: upstream {name!r} missing at {up}")
        if file_checksum(up) != digest:
            raise PipelineOrderError(f"{stage}: upstream {name!r} changed since this checkpoint was trained; retrain {stage}")
    return sections, meta


def module_from_sections(module: torch.nn.Module, *named: dict) -> torch.nn.Module:
    state = {}
    for d in named:
        state.update(d)
    load_module_state(module, state)
    return module
