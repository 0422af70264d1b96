"""Stage 1: autoregressive audio-token model with deep-prefix prompting.

Sequence layout (left-padded so every row's audio region starts at the same index)::

    [pad ...] [reference audio tokens] [content tokens] [BOS] a_1 ... a_T [EOS]

Deep-prefix mode prepends per-layer prefix keys/values ``E W_K^(l)``, ``E W_V^(l)``
to every layer's attention. Input-prepend mode instead puts the rows of ``E`` in
front of the embedded sequence. The backbone is a plain pre-norm decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FrozenParameterError, InputError, NumericError
from .layers import Block, LoRALinear, lora_linears
from .numerics import clip_grad_norm, freeze
from .toyspeech import TokenSeq

MODES = ("deep-prefix", "input-prepend", "none")
IGNORE = -100
SEG_REF, SEG_CONTENT, SEG_AUDIO, SEG_PAD = range(4)


@dataclass
class SequenceModelConfig:
    audio_vocab: int = 64
    content_vocab: int = 16
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 192
    max_len: int = 256
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("q", "k", "v", "o")

    @property
    def eos(self):
        return self.audio_vocab

    @property
    def bos(self):
        return self.audio_vocab + 1

    @property
    def pad(self):
        return self.audio_vocab + 2

    @property
    def content_offset(self):
        return self.audio_vocab + 3

    @property
    def n_inputs(self):
        return self.content_offset + self.content_vocab

    @property
    def n_outputs(self):
        return self.audio_vocab + 1


class LayerKV(NamedTuple):
    k: torch.Tensor  # (B, k, d_model)
    v: torch.Tensor
    layer: int


@dataclass
class SeqBatch:
    tokens: torch.Tensor  # (B, L)
    segments: torch.Tensor
    positions: torch.Tensor
    valid: torch.Tensor  # (B, L) bool
    audio_start: int  # index of BOS
    targets: torch.Tensor | None = None  # (B, L - audio_start)


def _as_array(x):
    return x.tokens if isinstance(x, TokenSeq) else np.asarray(x, dtype=np.int64)


def make_batch(cfg: SequenceModelConfig, contents, refs=None, audios=None) -> SeqBatch:
    """Assemble a padded batch. Without ``audios`` the audio region is just BOS."""
    B = len(contents)
    refs = [None] * B if refs is None else refs
    conds = []
    for c, r in zip(contents, refs):
        c = _as_array(c)
        if c.size == 0:
            raise InputError("content token sequence is empty")
        r = np.zeros(0, dtype=np.int64) if r is None else _as_array(r)
        conds.append((r, c + cfg.content_offset))
    Lc = max(len(r) + len(c) for r, c in conds)
    aud = [np.zeros(0, dtype=np.int64) if audios is None else _as_array(a) for a in (audios or [None] * B)]
    La = 1 + max(len(a) for a in aud)
    L = Lc + La
    if L > cfg.max_len:
        raise InputError(f"sequence length {L} exceeds max_len {cfg.max_len}")

    tokens = torch.full((B, L), cfg.pad, dtype=torch.long)
    segments = torch.full((B, L), SEG_PAD, dtype=torch.long)
    valid = torch.zeros(B, L, dtype=torch.bool)
    targets = torch.full((B, La), IGNORE, dtype=torch.long) if audios is not None else None
    for i, ((r, c), a) in enumerate(zip(conds, aud)):
        s = Lc - len(r) - len(c)
        tokens[i, s : s + len(r)] = torch.as_tensor(r)
        segments[i, s : s + len(r)] = SEG_REF
        tokens[i, s + len(r) : Lc] = torch.as_tensor(c)
        segments[i, s + len(r) : Lc] = SEG_CONTENT
        tokens[i, Lc] = cfg.bos
        tokens[i, Lc + 1 : Lc + 1 + len(a)] = torch.as_tensor(a)
        segments[i, Lc : Lc + 1 + len(a)] = SEG_AUDIO
        valid[i, s : Lc + 1 + len(a)] = True
        if targets is not None:
            targets[i, : len(a)] = torch.as_tensor(a)
            targets[i, len(a)] = cfg.eos
    positions = (valid.long().cumsum(1) - 1).clamp(min=0)
    return SeqBatch(tokens, segments, positions, valid, Lc, targets)


def _self_mask(valid: torch.Tensor) -> torch.Tensor:
    """Causal keep-mask over valid keys; the diagonal is always kept so pad rows stay defined."""
    L = valid.shape[1]
    causal = torch.ones(L, L, dtype=torch.bool).tril()
    return (causal & valid[:, None, :]) | torch.eye(L, dtype=torch.bool)


class PrefixProjections(nn.Module):
    """Per-layer W_K^(l), W_V^(l) mapping the prefix into each layer's key/value space."""

    def __init__(self, n_layers, d_model, d_kv=None, generator=None):
        super().__init__()
        d_kv = d_model if d_kv is None else d_kv
        scale = d_model**-0.5
        self.w_k = nn.ParameterList(nn.Parameter(torch.randn(d_model, d_kv, generator=generator) * scale) for _ in range(n_layers))
        self.w_v = nn.ParameterList(nn.Parameter(torch.randn(d_model, d_kv, generator=generator) * scale) for _ in range(n_layers))

    def __len__(self):
        return len(self.w_k)


def project_prefix(E: torch.Tensor, proj: PrefixProjections) -> list[LayerKV]:
    """K_E^(l) = E W_K^(l), V_E^(l) = E W_V^(l) for every layer."""
    if E.shape[-1] != proj.w_k[0].shape[0]:
        raise ConfigError(f"prefix width {E.shape[-1]} != projection input {proj.w_k[0].shape[0]}")
    return [LayerKV(E @ wk, E @ wv, l) for l, (wk, wv) in enumerate(zip(proj.w_k, proj.w_v))]


class SequenceModel(nn.Module):
    def __init__(self, cfg: SequenceModelConfig = SequenceModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.n_inputs, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.seg_emb = nn.Embedding(4, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.n_outputs)
        self.prefix_proj: PrefixProjections | None = None
        for emb in (self.tok_emb, self.pos_emb, self.seg_emb):
            nn.init.normal_(emb.weight, std=0.05)

    # -- fine-tuning surface -------------------------------------------------

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not _is_adapter(n)]

    def adapter_parameters(self):
        return [p for n, p in self.named_parameters() if _is_adapter(n)]

    def prepare_finetune(self, deep_prefix=True, seed=0):
        """Freeze the backbone, add LoRA adapters and (optionally) prefix projections."""
        g = torch.Generator().manual_seed(seed)
        freeze(self)
        for name, mod in self.named_modules():
            if isinstance(mod, LoRALinear) and name.split(".")[-1] in self.cfg.lora_targets and name.startswith("blocks"):
                mod.enable_lora(self.cfg.lora_rank, self.cfg.lora_alpha, generator=g)
        if deep_prefix:
            self.prefix_proj = PrefixProjections(self.cfg.n_layers, self.cfg.d_model, generator=g)
        return self

    def check_frozen(self):
        for n, p in self.named_parameters():
            if not _is_adapter(n) and (p.requires_grad or p.grad is not None):
                raise FrozenParameterError(f"backbone parameter {n} is receiving gradients")

    # -- forward -------------------------------------------------------------

    def embed(self, tokens, positions, segments):
        return self.tok_emb(tokens) + self.pos_emb(positions) + self.seg_emb(segments)

    def forward_logits(self, batch: SeqBatch, prefix: torch.Tensor | None = None, mode: str = "none"):
        """Logits at every audio-region position (BOS onward): (B, L - audio_start, V)."""
        if mode not in MODES:
            raise ConfigError(f"unknown prefix mode {mode!r}")
        x = self.embed(batch.tokens, batch.positions, batch.segments)
        valid = batch.valid
        kvs: list[LayerKV | None] = [None] * len(self.blocks)
        k = 0
        if mode == "input-prepend":
            if prefix is None:
                raise ConfigError("input-prepend mode needs a prefix")
            k = prefix.shape[1]
            x = torch.cat([prefix, x], dim=1)
            valid = torch.cat([torch.ones(x.shape[0], k, dtype=torch.bool), valid], dim=1)
        mask = _self_mask(valid)
        if mode == "deep-prefix":
            if prefix is None or self.prefix_proj is None:
                raise ConfigError("deep-prefix mode needs a prefix and prefix projections")
            kvs = project_prefix(prefix, self.prefix_proj)
            mask = torch.cat([torch.ones(*mask.shape[:2], prefix.shape[1], dtype=torch.bool), mask], dim=-1)
        for blk, kv in zip(self.blocks, kvs):
            x = blk(x, mask=mask, extra_kv=None if kv is None else (kv.k, kv.v))
        logits = self.head(self.ln_f(x))
        return logits[:, k + batch.audio_start :]

    # -- generation ------------------------------------------------------------

    @torch.no_grad()
    def generate(self, contents, refs=None, prefix=None, mode="none", temperature=1.0, top_k=0, seed=0,
                 max_len=160, min_len=0) -> list[TokenSeq]:
        """Autoregressive sampling with an incremental KV cache; temperature 0 is greedy."""
        if max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if mode not in MODES:
            raise ConfigError(f"unknown prefix mode {mode!r}")
        cfg = self.cfg
        batch = make_batch(cfg, contents, refs)
        B = len(contents)
        x = self.embed(batch.tokens, batch.positions, batch.segments)
        valid = batch.valid
        caches = [dict() for _ in self.blocks]
        if mode == "input-prepend":
            x = torch.cat([prefix, x], dim=1)
            valid = torch.cat([torch.ones(B, prefix.shape[1], dtype=torch.bool), valid], dim=1)
        mask = _self_mask(valid)
        if mode == "deep-prefix":
            for cache, kv, blk in zip(caches, project_prefix(prefix, self.prefix_proj), self.blocks):
                cache["k"], cache["v"] = blk.attn.split(kv.k), blk.attn.split(kv.v)
            k = prefix.shape[1]
            mask = torch.cat([torch.ones(B, mask.shape[1], k, dtype=torch.bool), mask], dim=-1)
            valid = torch.cat([torch.ones(B, k, dtype=torch.bool), valid], dim=1)

        for blk, cache in zip(self.blocks, caches):
            x = blk(x, mask=mask, cache=cache)
        logits = self.head(self.ln_f(x[:, -1]))

        gen = torch.Generator().manual_seed(seed)
        pos = batch.positions[:, -1]
        out = torch.zeros(B, 0, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for step in range(max_len):
            if step < min_len:
                logits = logits.clone()
                logits[:, cfg.eos] = float("-inf")
            nxt = _sample(logits, temperature, top_k, gen)
            nxt = torch.where(done, torch.full_like(nxt, cfg.eos), nxt)
            out = torch.cat([out, nxt[:, None]], dim=1)
            done |= nxt == cfg.eos
            if done.all():
                break
            pos = pos + 1
            if pos.max() >= cfg.max_len:
                break
            h = self.embed(nxt[:, None], pos[:, None], torch.full((B, 1), SEG_AUDIO))
            valid = torch.cat([valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
            step_mask = valid[:, None, :]
            for blk, cache in zip(self.blocks, caches):
                h = blk(h, mask=step_mask, cache=cache)
            logits = self.head(self.ln_f(h[:, -1]))
            if not torch.isfinite(logits).all():
                raise NumericError("non-finite logits during generation")

        result = []
        for i in range(B):
            row = out[i].tolist()
            truncated = cfg.eos not in row
            row = row if truncated else row[: row.index(cfg.eos)]
            result.append(TokenSeq(np.array(row, dtype=np.int64), "audio", cfg.audio_vocab, truncated))
        return result

    # -- checkpoint sections -----------------------------------------------------

    def sections(self) -> dict[str, dict[str, torch.Tensor]]:
        out: dict[str, dict[str, torch.Tensor]] = {"backbone": {}, "lora": {}, "prefix_projections": {}}
        for n, t in self.state_dict().items():
            if n.startswith("prefix_proj"):
                out["prefix_projections"][n] = t
            elif "lora_" in n:
                out["lora"][n] = t
            else:
                out["backbone"][n] = t
        return out


def _is_adapter(name: str) -> bool:
    return "lora_" in name or name.startswith("prefix_proj")


def _sample(logits, temperature, top_k, gen):
    if temperature <= 0:
        return logits.argmax(dim=-1)  # lowest index on ties
    logits = logits / temperature
    if top_k and top_k < logits.shape[-1]:
        kth = logits.topk(top_k, dim=-1).values[:, -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    return torch.multinomial(torch.softmax(logits, dim=-1), 1, generator=gen)[:, 0]


def lm_loss(model: SequenceModel, batch: SeqBatch, prefix=None, mode="none"):
    """Mean next-token cross-entropy over audio positions (audio tokens and EOS)."""
    logits = model.forward_logits(batch, prefix, mode)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1), ignore_index=IGNORE)
    if not torch.isfinite(loss):
        raise NumericError("non-finite language-model loss")
    return loss


def token_accuracy(model: SequenceModel, batch: SeqBatch, prefix=None, mode="none") -> float:
    with torch.no_grad():
        pred = model.forward_logits(batch, prefix, mode).argmax(-1)
    keep = batch.targets != IGNORE
    return float((pred[keep] == batch.targets[keep]).double().mean())


def train_step(model: SequenceModel, batch: SeqBatch, optimizer, prefix_fn=None, mode="none", clip=1.0):
    """One fine-tuning step; ``prefix_fn`` builds E inside the graph so gradients reach the encoder.

    Raises FrozenParameterError if any backbone parameter would be touched.
    """
    optimizer.zero_grad()
    prefix = prefix_fn() if prefix_fn is not None else None
    loss = lm_loss(model, batch, prefix, mode)
    loss.backward()
    model.check_frozen()
    clip_grad_norm(optimizer.params, clip)
    optimizer.step()
    return loss.item()


def adapter_modules(model: SequenceModel):
    return [m for m in lora_linears(model) if m.lora_A is not None]


def sequence_lengths(seqs: Sequence[TokenSeq]) -> np.ndarray:
    return np.array([len(s) for s in seqs])
