"""Run configuration: one INI file, one section per component.

Desk-scale defaults. For reference, the full-scale recipe fine-tunes for 46k
steps with AdamW at lr 2e-5, a 6-layer style transformer, k=32 latents and LoRA
rank 32; the defaults here shrink all of that to run on a laptop CPU.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .acoustic_model import AcousticConfig
from .errors import ConfigError
from .prefix_encoder import PrefixEncoderConfig
from .sequence_model import SequenceModelConfig
from .toyspeech import GeneratorConfig, SplitConfig

BASE_DIR_ENV = "EMOPREFIX_HOME"


@dataclass
class TokenizerConfig:
    codebook_size: int = 64
    iters: int = 50
    seed: int = 0
    # k-means is fitted on at most this many training frames (0 = all)
    max_frames: int = 200_000


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    warmup: int = 100
    backbone_steps: int = 1800
    backbone_lr: float = 1e-3
    stage2_steps: int = 1500
    stage2_lr: float = 1e-3
    prefix_steps: int = 900
    prefix_lr: float = 1e-3
    probe_steps: int = 800
    weight_decay: float = 0.01
    stage1_ref_frames: int = 24
    stage2_ref_frames: int = 48
    # pretraining pairs each target with a same-speaker prompt of an independently drawn emotion
    backbone_ref_emotion: str = "random"
    # prosody emotion of Stage-2 training references; energy always matches the target
    stage2_ref_prosody: str = "random"
    # energy emotion of Stage-2 training targets (and their references); "random" decouples it from prosody
    stage2_energy: str = "random"
    # keep the reference-token style prompt in Stage 1 when a prefix is active
    keep_style_prompt: bool = True


@dataclass
class SamplingConfig:
    seed: int = 0
    temperature: float = 1.0
    top_k: int = 0
    max_len: int = 160
    fm_steps: int = 16


@dataclass
class EvalConfig:
    seed: int = 0
    max_conversions: int = 240
    ref_pairing: str = "same-speaker"
    batch_size: int = 64


@dataclass
class PathsConfig:
    base_dir: str = ""
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    runs: str = "runs"


SECTIONS = {
    "corpus": GeneratorConfig,
    "split": SplitConfig,
    "tokenizer": TokenizerConfig,
    "sequence": SequenceModelConfig,
    "prefix": PrefixEncoderConfig,
    "acoustic": AcousticConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}

_SKIP = {("corpus", "styles")}


@dataclass
class RunConfig:
    corpus: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    sequence: SequenceModelConfig = field(default_factory=SequenceModelConfig)
    prefix: PrefixEncoderConfig = field(default_factory=PrefixEncoderConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> "RunConfig":
        """Propagate shared widths so the sections agree with each other."""
        q = self.tokenizer.codebook_size
        self.sequence.audio_vocab = q
        self.sequence.content_vocab = self.corpus.n_phonemes
        self.acoustic.audio_vocab = q
        self.acoustic.n_mel = self.corpus.n_mel
        self.prefix.n_mel = self.corpus.n_mel
        self.prefix.d_model = self.sequence.d_model
        if self.train.backbone_ref_emotion not in ("random", "target"):
            raise ConfigError("train.backbone_ref_emotion must be 'random' or 'target'")
        if self.train.stage2_ref_prosody not in ("random", "target"):
            raise ConfigError("train.stage2_ref_prosody must be 'random' or 'target'")
        if self.train.stage2_energy not in ("random", "target"):
            raise ConfigError("train.stage2_energy must be 'random' or 'target'")
        if self.eval.ref_pairing not in ("same-speaker", "cross-speaker"):
            raise ConfigError("eval.ref_pairing must be 'same-speaker' or 'cross-speaker'")
        for name in ("corpus", "split", "tokenizer", "train", "sampling", "eval"):
            if not isinstance(getattr(getattr(self, name), "seed"), int):
                raise ConfigError(f"[{name}] seed must be an integer")
        return self

    @property
    def base_dir(self) -> Path:
        return Path(self.paths.base_dir or os.environ.get(BASE_DIR_ENV, ".")).expanduser()

    def path(self, key: str) -> Path:
        return self.base_dir / getattr(self.paths, key)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {
                f.name: repr(getattr(section, f.name)) if not isinstance(getattr(section, f.name), str) else getattr(section, f.name)
                for f in dataclasses.fields(section)
                if (name, f.name) not in _SKIP
            }
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def fingerprint(self) -> dict:
        return {name: _asdict(getattr(self, name)) for name in SECTIONS if name != "paths"}


def _asdict(section):
    out = {}
    for f in dataclasses.fields(section):
        v = getattr(section, f.name)
        out[f.name] = [dataclasses.asdict(s) for s in v] if f.name == "styles" else v
    return out


def _parse(value: str, current):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, str):
        return value.strip()
    try:
        parsed = ast.literal_eval(value.strip())
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {value!r}") from exc
    if isinstance(current, float) and isinstance(parsed, int):
        parsed = float(parsed)
    if isinstance(current, tuple) and isinstance(parsed, list):
        parsed = tuple(parsed)
    if type(parsed) is not type(current):
        raise ConfigError(f"expected {type(current).__name__}, got {value!r}")
    return parsed


def apply_override(cfg: RunConfig, key: str, value: str) -> None:
    """Apply ``section.field=value``."""
    try:
        section_name, field_name = key.split(".", 1)
    except ValueError:
        raise ConfigError(f"override {key!r} must look like section.field") from None
    if section_name not in SECTIONS:
        raise ConfigError(f"unknown config section [{section_name}]")
    section = getattr(cfg, section_name)
    if not hasattr(section, field_name) or (section_name, field_name) in _SKIP:
        raise ConfigError(f"unknown config key {key}")
    new = _parse(value, getattr(section, field_name))
    if isinstance(section, GeneratorConfig):
        # GeneratorConfig validates on construction
        setattr(cfg, section_name, dataclasses.replace(section, **{field_name: new}))
    else:
        setattr(section, field_name, new)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for section in cp.sections():
            for key, value in cp[section].items():
                apply_override(cfg, f"{section}.{key}", value)
    for key, value in (overrides or {}).items():
        apply_override(cfg, key, value)
    return cfg.resolve()
