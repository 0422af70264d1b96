"""Synthetic parallel emotional corpus, content/audio tokenizers and file formats.

Each utterance is a T x D "mel-like" matrix built from four additive factors:

* speaker: a timbre vector on the timbre channels plus a small pitch offset,
* content: a sequence of pseudo-phonemes, each a band-limited template on the
  content channels held for an intrinsic number of frames,
* emotion: pitch level/contour/jitter and duration stretch (sequence-level
  prosody) plus an energy offset (acoustic-level prosody),
* seeded Gaussian noise.

The audio tokenizer mean-normalizes the energy and timbre channels per utterance
before quantizing, so audio tokens keep pitch, duration and content but drop
speaker timbre and the emotion energy offset. A Stage-2 decoder has to recover
those from its reference.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import ConfigError, DataError, InputError, StateError

MEL_FORMAT_VERSION = 1
TOKEN_FORMAT_VERSION = 1
TOKEN_KINDS = {"content": 0, "audio": 1}

EMOTION_NAMES = ("neutral", "happy", "sad", "angry", "surprised")


@dataclass(frozen=True)
class EmotionStyle:
    pitch: tuple[float, float]  # mean offset on the two pitch channels
    slope: float  # pitch rise over the utterance
    jitter: float  # alternating per-segment pitch excursion
    stretch: float  # duration multiplier
    energy: tuple[float, float]  # mean offset on the two energy channels


DEFAULT_STYLES = (
    EmotionStyle(pitch=(0.0, 0.0), slope=0.0, jitter=0.05, stretch=1.00, energy=(0.0, 0.0)),
    EmotionStyle(pitch=(1.0, 0.5), slope=1.0, jitter=0.20, stretch=0.92, energy=(0.25, 0.15)),
    EmotionStyle(pitch=(-0.9, -0.3), slope=-0.6, jitter=0.00, stretch=1.22, energy=(-0.3, -0.1)),
    EmotionStyle(pitch=(0.5, -0.8), slope=0.2, jitter=0.45, stretch=0.86, energy=(0.45, -0.25)),
    EmotionStyle(pitch=(1.3, 1.0), slope=1.6, jitter=0.10, stretch=0.95, energy=(0.1, 0.4)),
)


@dataclass
class GeneratorConfig:
    n_speakers: int = 4
    n_emotions: int = 4
    n_mel: int = 16
    n_phonemes: int = 16
    n_contents: int = 1000
    min_segments: int = 9
    max_segments: int = 14
    min_base_frames: int = 48
    duration_range: tuple[int, int] = (4, 7)
    noise_std: float = 0.05
    speaker_margin: float = 1.0
    speaker_pitch: float = 0.25
    energy_profile: float = 0.3
    seed: int = 0
    pitch_channels: tuple[int, ...] = (0, 1)
    energy_channels: tuple[int, ...] = (2, 3)
    content_channels: tuple[int, ...] = (4, 5, 6, 7, 8, 9)
    timbre_channels: tuple[int, ...] = (10, 11, 12, 13, 14, 15)
    styles: tuple[EmotionStyle, ...] = DEFAULT_STYLES

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_emotions < 1:
            raise ConfigError("need at least one speaker and one emotion")
        if self.n_emotions > len(self.styles):
            raise ConfigError(f"only {len(self.styles)} emotion styles defined")
        if self.n_contents < 1 or self.n_phonemes < 2:
            raise ConfigError("need at least one content id and two phonemes")
        used = self.pitch_channels + self.energy_channels + self.content_channels + self.timbre_channels
        if max(used) >= self.n_mel:
            raise ConfigError("channel layout exceeds n_mel")
        if not 0 < self.noise_std <= 0.05:
            raise ConfigError("noise_std must lie in (0, 0.05]")

    @property
    def prosody_channels(self) -> tuple[int, ...]:
        return self.pitch_channels + self.energy_channels

    @property
    def normalized_channels(self) -> tuple[int, ...]:
        """Channels the audio tokenizer mean-normalizes per utterance."""
        return self.energy_channels + self.timbre_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = [asdict(s) for s in self.styles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "styles" in d:
            d["styles"] = tuple(
                EmotionStyle(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()}) for s in d["styles"]
            )
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass(frozen=True, order=True)
class UtteranceSpec:
    content_id: int
    speaker_id: int
    emotion_id: int
    seed: int = 0

    @property
    def uid(self) -> str:
        return f"c{self.content_id:03d}_s{self.speaker_id}_e{self.emotion_id}"


@dataclass
class TokenSeq:
    tokens: np.ndarray
    kind: str
    vocab: int
    truncated: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.kind not in TOKEN_KINDS:
            raise ConfigError(f"unknown token kind {self.kind!r}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab):
            raise DataError("token outside vocabulary")

    def __len__(self):
        return len(self.tokens)


@dataclass
class CorpusSplit:
    train: list[UtteranceSpec]
    reference: list[UtteranceSpec]
    test: list[UtteranceSpec]
    train_contents: list[int] = field(default_factory=list)
    reference_contents: list[int] = field(default_factory=list)
    test_contents: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# latent factors


class _Factors:
    """Per-config random tables: phoneme templates, durations, speakers, content strings."""

    def __init__(self, cfg: GeneratorConfig):
        rng = np.random.default_rng([cfg.seed, 7919])
        nc = len(cfg.content_channels)
        raw = rng.normal(size=(cfg.n_phonemes, nc + 4))
        kernel = np.array([0.25, 0.5, 1.0, 0.5, 0.25])
        smooth = np.stack([np.convolve(r, kernel, mode="valid") for r in raw])
        smooth /= np.linalg.norm(smooth, axis=1, keepdims=True)
        self.templates = 1.6 * smooth
        lo, hi = cfg.duration_range
        self.durations = rng.integers(lo, hi + 1, size=cfg.n_phonemes)
        self.accents = rng.uniform(-1, 1, size=cfg.n_phonemes)
        self.energy_profiles = rng.normal(size=(cfg.n_phonemes, len(cfg.energy_channels)))
        self.speakers = self._speakers(rng, cfg)
        self.speaker_pitch = cfg.speaker_pitch * np.linspace(-1, 1, cfg.n_speakers) if cfg.n_speakers > 1 else np.zeros(1)
        rng.shuffle(self.speaker_pitch)
        self.contents = [self._content(rng, cfg) for _ in range(cfg.n_contents)]

    @staticmethod
    def _speakers(rng, cfg):
        dim = len(cfg.timbre_channels)
        out: list[np.ndarray] = []
        for _ in range(10_000):
            if len(out) == cfg.n_speakers:
                break
            cand = rng.normal(scale=0.9, size=dim)
            if all(np.linalg.norm(cand - o) >= 2 * cfg.speaker_margin for o in out):
                out.append(cand)
        if len(out) < cfg.n_speakers:
            raise ConfigError("could not place speakers with the requested margin")
        return np.stack(out)

    def _content(self, rng, cfg):
        for _ in range(10_000):
            n = int(rng.integers(cfg.min_segments, cfg.max_segments + 1))
            seq = [int(rng.integers(cfg.n_phonemes))]
            while len(seq) < n:
                p = int(rng.integers(cfg.n_phonemes))
                if p != seq[-1]:
                    seq.append(p)
            if self.durations[seq].sum() >= cfg.min_base_frames:
                return np.array(seq)
        raise ConfigError("could not draw a content sequence long enough")


_FACTOR_CACHE: dict[str, _Factors] = {}


def factors(cfg: GeneratorConfig) -> _Factors:
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _FACTOR_CACHE:
        _FACTOR_CACHE[key] = _Factors(cfg)
    return _FACTOR_CACHE[key]


def _check_spec(spec: UtteranceSpec, cfg: GeneratorConfig):
    if not 0 <= spec.content_id < cfg.n_contents:
        raise ConfigError(f"content_id {spec.content_id} out of range")
    if not 0 <= spec.speaker_id < cfg.n_speakers:
        raise ConfigError(f"speaker_id {spec.speaker_id} out of range")
    if not 0 <= spec.emotion_id < cfg.n_emotions:
        raise ConfigError(f"emotion_id {spec.emotion_id} out of range")


def segment_boundaries(content_id: int, emotion_id: int, cfg: GeneratorConfig) -> np.ndarray:
    """Frame index where each pseudo-phoneme ends (exclusive), after stretching."""
    f = factors(cfg)
    base = np.cumsum(f.durations[f.contents[content_id]])
    return np.round(base * cfg.styles[emotion_id].stretch).astype(int)


def render(spec: UtteranceSpec, cfg: GeneratorConfig, energy_emotion: int | None = None) -> np.ndarray:
    """Build the frames; ``energy_emotion`` lets the energy offset follow a different emotion."""
    _check_spec(spec, cfg)
    f = factors(cfg)
    style = cfg.styles[spec.emotion_id]
    energy_style = cfg.styles[spec.emotion_id if energy_emotion is None else energy_emotion]
    phones = f.contents[spec.content_id]
    ends = segment_boundaries(spec.content_id, spec.emotion_id, cfg)
    T = int(ends[-1])
    seg = np.searchsorted(ends, np.arange(T), side="right")
    ph = phones[seg]
    tau = (np.arange(T) + 0.5) / T - 0.5
    sign = np.where(seg % 2 == 0, 1.0, -1.0)

    mel = np.zeros((T, cfg.n_mel))
    p0, p1 = cfg.pitch_channels[:2]
    spk_pitch = f.speaker_pitch[spec.speaker_id]
    mel[:, p0] = style.pitch[0] + spk_pitch + style.slope * tau + style.jitter * sign + 0.2 * f.accents[ph]
    mel[:, p1] = style.pitch[1] + 0.5 * spk_pitch + 0.5 * style.slope * tau + 0.1 * f.accents[ph]
    mel[:, list(cfg.energy_channels)] = np.asarray(energy_style.energy) + cfg.energy_profile * f.energy_profiles[ph]
    mel[:, list(cfg.content_channels)] = f.templates[ph]
    mel[:, list(cfg.timbre_channels)] = f.speakers[spec.speaker_id]

    rng = np.random.default_rng([spec.seed, cfg.seed, spec.content_id, spec.speaker_id, spec.emotion_id])
    mel += rng.normal(scale=cfg.noise_std, size=mel.shape)
    return np.clip(mel, -4.0, 4.0)


def gen_utterance(spec: UtteranceSpec, cfg: GeneratorConfig) -> np.ndarray:
    """Deterministic T x D frames for one utterance."""
    return render(spec, cfg)


def content_tokenize(spec: UtteranceSpec, cfg: GeneratorConfig) -> TokenSeq:
    """One token per pseudo-phoneme segment; invariant to speaker and emotion."""
    _check_spec(spec, cfg)
    return TokenSeq(factors(cfg).contents[spec.content_id].copy(), "content", cfg.n_phonemes)


# ---------------------------------------------------------------------------
# audio tokenizer


def tokenizer_view(mel: np.ndarray, cfg: GeneratorConfig) -> np.ndarray:
    """Frames as the audio tokenizer sees them: energy/timbre channels mean-normalized."""
    out = np.array(mel, dtype=np.float64, copy=True)
    cols = list(cfg.normalized_channels)
    out[:, cols] -= out[:, cols].mean(axis=0, keepdims=True)
    return out


class Codebook:
    """Nearest-centroid vector quantizer over tokenizer-view frames."""

    def __init__(self, gcfg: GeneratorConfig, size: int = 64):
        self.gcfg = gcfg
        self.size = size
        self.centroids: np.ndarray | None = None
        self.error_q95: float | None = None

    @property
    def trained(self) -> bool:
        return self.centroids is not None

    def fit(self, mels: list[np.ndarray], seed: int = 0, iters: int = 50, max_frames: int = 0) -> "Codebook":
        """k-means over the frames of ``mels``; a seeded subsample of ``max_frames`` if that is set."""
        frames = np.concatenate([tokenizer_view(m, self.gcfg) for m in mels])
        if len(frames) < self.size:
            raise DataError("fewer training frames than codebook entries")
        rng = np.random.default_rng(seed)
        if 0 < max_frames < len(frames):
            frames = frames[np.sort(rng.choice(len(frames), max_frames, replace=False))]
        centroids, _ = kmeans2(frames, self.size, iter=iters, minit="++", seed=rng)
        self.centroids = centroids
        err = np.linalg.norm(frames - centroids[self._assign(frames)], axis=1)
        self.error_q95 = float(np.quantile(err, 0.95))
        return self

    def _assign(self, frames: np.ndarray, chunk: int = 16384) -> np.ndarray:
        out = np.empty(len(frames), dtype=np.int64)
        for s in range(0, len(frames), chunk):
            d2 = ((frames[s : s + chunk, None, :] - self.centroids[None, :, :]) ** 2).sum(-1)
            out[s : s + chunk] = d2.argmin(axis=1)  # first index on ties
        return out

    def quantize(self, mel: np.ndarray) -> TokenSeq:
        if not self.trained:
            raise StateError("codebook has not been trained")
        return TokenSeq(self._assign(tokenizer_view(mel, self.gcfg)), "audio", self.size)

    def decode(self, tokens: TokenSeq | np.ndarray) -> np.ndarray:
        if not self.trained:
            raise StateError("codebook has not been trained")
        ids = tokens.tokens if isinstance(tokens, TokenSeq) else np.asarray(tokens)
        return self.centroids[ids]

    def state(self) -> dict:
        if not self.trained:
            raise StateError("codebook has not been trained")
        return {"centroids": self.centroids, "error_q95": np.array(self.error_q95)}

    @classmethod
    def from_state(cls, gcfg: GeneratorConfig, state: dict) -> "Codebook":
        cb = cls(gcfg, size=len(state["centroids"]))
        cb.centroids = np.asarray(state["centroids"], dtype=np.float64)
        cb.error_q95 = float(state["error_q95"])
        return cb


def audio_tokenize(mel: np.ndarray, codebook: Codebook) -> TokenSeq:
    return codebook.quantize(mel)


# ---------------------------------------------------------------------------
# splits and corpus


@dataclass
class SplitConfig:
    n_train: int = 980
    n_reference: int = 8
    n_test: int = 12
    seed: int = 0


def make_split(gcfg: GeneratorConfig, scfg: SplitConfig) -> CorpusSplit:
    """Partition content ids into train / reference-prompt / test, then cross with every cell."""
    total = scfg.n_train + scfg.n_reference + scfg.n_test
    if min(scfg.n_train, scfg.n_reference, scfg.n_test) < 1:
        raise ConfigError("every split needs at least one content id")
    if total > gcfg.n_contents:
        raise ConfigError(f"split needs {total} content ids, corpus has {gcfg.n_contents}")
    perm = np.random.default_rng([scfg.seed, 104729]).permutation(gcfg.n_contents)[:total]
    tr = sorted(int(c) for c in perm[: scfg.n_train])
    rf = sorted(int(c) for c in perm[scfg.n_train : scfg.n_train + scfg.n_reference])
    te = sorted(int(c) for c in perm[scfg.n_train + scfg.n_reference :])

    def cross(contents):
        return [
            UtteranceSpec(c, s, e, gcfg.seed)
            for c in contents
            for s in range(gcfg.n_speakers)
            for e in range(gcfg.n_emotions)
        ]

    return CorpusSplit(cross(tr), cross(rf), cross(te), tr, rf, te)


class Corpus:
    """In-memory view of the generated corpus with lazy frame generation."""

    def __init__(self, gcfg: GeneratorConfig, scfg: SplitConfig | None = None):
        self.gcfg = gcfg
        self.scfg = scfg or SplitConfig()
        self.split = make_split(gcfg, self.scfg)
        self._mels: dict[UtteranceSpec, np.ndarray] = {}

    def spec(self, content_id: int, speaker_id: int, emotion_id: int) -> UtteranceSpec:
        return UtteranceSpec(content_id, speaker_id, emotion_id, self.gcfg.seed)

    def mel(self, spec: UtteranceSpec) -> np.ndarray:
        if spec not in self._mels:
            self._mels[spec] = gen_utterance(spec, self.gcfg)
        return self._mels[spec]

    def content(self, spec: UtteranceSpec) -> TokenSeq:
        return content_tokenize(spec, self.gcfg)

    @property
    def all_specs(self) -> list[UtteranceSpec]:
        return sorted(self.split.train + self.split.reference + self.split.test)

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        (root / "mels").mkdir(parents=True, exist_ok=True)
        role = {s: "train" for s in self.split.train}
        role.update({s: "reference" for s in self.split.reference})
        role.update({s: "test" for s in self.split.test})
        lines = []
        for spec in self.all_specs:
            rel = f"mels/{spec.uid}.mel"
            write_mel(root / rel, self.mel(spec))
            lines.append(json.dumps({**asdict(spec), "uid": spec.uid, "split": role[spec], "path": rel}, sort_keys=True))
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        meta = {"generator": self.gcfg.to_dict(), "split": asdict(self.scfg)}
        (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return root / "manifest.jsonl"

    @classmethod
    def load(cls, root: str | Path) -> "Corpus":
        root = Path(root)
        if not (root / "corpus.json").exists():
            raise DataError(f"no corpus at {root}")
        meta = json.loads((root / "corpus.json").read_text())
        corpus = cls(GeneratorConfig.from_dict(meta["generator"]), SplitConfig(**meta["split"]))
        for line in (root / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            spec = UtteranceSpec(rec["content_id"], rec["speaker_id"], rec["emotion_id"], rec["seed"])
            corpus._mels[spec] = read_mel(root / rec["path"])
        return corpus


# ---------------------------------------------------------------------------
# file formats


def write_mel(path: str | Path, mel: np.ndarray) -> None:
    """int32 header (T, D, version) followed by row-major float64 frames."""
    mel = np.ascontiguousarray(mel, dtype="<f8")
    header = np.array([mel.shape[0], mel.shape[1], MEL_FORMAT_VERSION], dtype="<i4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(mel.tobytes())


def read_mel(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    T, D, version = np.frombuffer(raw[:12], dtype="<i4")
    if version != MEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported mel format version {version}")
    data = np.frombuffer(raw[12:], dtype="<f8")
    if data.size != T * D:
        raise DataError(f"{path}: expected {T}x{D} values, found {data.size}")
    return data.reshape(T, D).copy()


def write_tokens(path: str | Path, seq: TokenSeq) -> None:
    """int32 header (length, vocab, kind) followed by int32 tokens."""
    header = np.array([len(seq), seq.vocab, TOKEN_KINDS[seq.kind]], dtype="<i4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.asarray(seq.tokens, dtype="<i4").tobytes())


def read_tokens(path: str | Path) -> TokenSeq:
    raw = Path(path).read_bytes()
    n, vocab, kind = np.frombuffer(raw[:12], dtype="<i4")
    tokens = np.frombuffer(raw[12:], dtype="<i4")
    if tokens.size != n:
        raise InputError(f"{path}: header says {n} tokens, found {tokens.size}")
    kinds = {v: k for k, v in TOKEN_KINDS.items()}
    if int(kind) not in kinds:
        raise InputError(f"{path}: unknown token kind {kind}")
    return TokenSeq(tokens.astype(np.int64), kinds[int(kind)], int(vocab))
