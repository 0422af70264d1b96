"""Stage 2: conditional flow-matching decoder from audio tokens back to frames.

Path: x_t = (1 - t) x0 + t x1 with x0 ~ N(0, I); the network regresses the
velocity x1 - x0 on the target region. Sampling is plain Euler from t=0 to 1.
The reference region carries reference tokens plus the reference frames and is
always visible (full bidirectional attention) but never enters the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError, NumericError
from .layers import Block
from .numerics import clip_grad_norm, sinusoidal
from .toyspeech import TokenSeq

SEG_REF, SEG_TARGET = 0, 1


@dataclass
class AcousticConfig:
    audio_vocab: int = 64
    n_mel: int = 16
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 192
    time_scale: float = 1.0  # t is multiplied by this before the sinusoidal embedding


@dataclass
class ConditioningPack:
    tokens: np.ndarray  # (n_ref + n_target,)
    ref_channels: np.ndarray  # (n_ref + n_target, D); M_ref rows then zero placeholders
    segments: np.ndarray
    n_ref: int

    def __len__(self):
        return len(self.tokens)

    @property
    def n_target(self) -> int:
        return len(self.tokens) - self.n_ref


def _tokens(x):
    return x.tokens if isinstance(x, TokenSeq) else np.asarray(x, dtype=np.int64)


def condition_pack(A, A_ref, M_ref) -> ConditioningPack:
    a, ar = _tokens(A), _tokens(A_ref)
    m = np.zeros((0, 0)) if M_ref is None else np.asarray(M_ref, dtype=np.float64)
    if len(ar) != len(m):
        raise InputError(f"reference tokens ({len(ar)}) and reference frames ({len(m)}) differ in length")
    if len(a) == 0:
        raise InputError("no target tokens to decode")
    D = m.shape[1] if len(m) else None
    return ConditioningPack(
        tokens=np.concatenate([ar, a]),
        ref_channels=np.concatenate([m, np.zeros((len(a), D))]) if D else np.zeros((len(a), 0)),
        segments=np.concatenate([np.full(len(ar), SEG_REF), np.full(len(a), SEG_TARGET)]),
        n_ref=len(ar),
    )


@dataclass
class PackBatch:
    tokens: torch.Tensor  # (B, L)
    ref_channels: torch.Tensor  # (B, L, D)
    segments: torch.Tensor
    valid: torch.Tensor  # (B, L)
    target: torch.Tensor  # (B, L) bool, target-region positions
    packs: list[ConditioningPack]


def batch_packs(packs: Sequence[ConditioningPack], n_mel: int) -> PackBatch:
    B, L = len(packs), max(len(p) for p in packs)
    tokens = torch.zeros(B, L, dtype=torch.long)
    ref = torch.zeros(B, L, n_mel)
    seg = torch.full((B, L), SEG_TARGET, dtype=torch.long)
    valid = torch.zeros(B, L, dtype=torch.bool)
    target = torch.zeros(B, L, dtype=torch.bool)
    for i, p in enumerate(packs):
        n = len(p)
        tokens[i, :n] = torch.as_tensor(p.tokens)
        if p.n_ref:
            ref[i, : p.n_ref] = torch.as_tensor(p.ref_channels[: p.n_ref])
        seg[i, :n] = torch.as_tensor(p.segments)
        valid[i, :n] = True
        target[i, p.n_ref : n] = True
    return PackBatch(tokens, ref, seg, valid, target, list(packs))


class FlowDecoder(nn.Module):
    def __init__(self, cfg: AcousticConfig = AcousticConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.audio_vocab, d)
        self.seg_emb = nn.Embedding(2, d)
        self.ref_in = nn.Linear(cfg.n_mel, d)
        self.state_in = nn.Linear(cfg.n_mel, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.n_mel)
        nn.init.normal_(self.tok_emb.weight, std=0.05)

    def forward(self, x_t, t, pb: PackBatch):
        """Velocity for every pack position, (B, L, n_mel); x_t is laid out like the pack."""
        L = pb.tokens.shape[1]
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1)
        h = (
            self.tok_emb(pb.tokens)
            + self.seg_emb(pb.segments)
            + self.ref_in(pb.ref_channels)
            + self.state_in(x_t * pb.target[..., None])
            + sinusoidal(torch.arange(L), self.cfg.d_model)
            + self.time_mlp(sinusoidal(t * self.cfg.time_scale, self.cfg.d_model))[:, None, :]
        )
        mask = pb.valid[:, None, :] | torch.eye(L, dtype=torch.bool)
        for blk in self.blocks:
            h = blk(h, mask=mask)
        return self.out(self.ln_f(h))


def interpolate(x0, x1, t):
    t = torch.as_tensor(t, dtype=x0.dtype).reshape(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * x0 + t * x1


def fm_loss(model, pb: PackBatch, x1, x0, t):
    """Mean squared velocity error per element, over target-region frames only."""
    xt = interpolate(x0, x1, t)
    v = model(xt, t, pb)
    w = pb.target[..., None].to(v.dtype)
    loss = (((v - (x1 - x0)) * w) ** 2).sum() / (w.sum() * v.shape[-1])
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite flow-matching loss (t range {float(torch.as_tensor(t).min())}..{float(torch.as_tensor(t).max())})")
    return loss


def layout_targets(pb: PackBatch, frames: Sequence[np.ndarray]) -> torch.Tensor:
    """Place per-utterance target frames into the (B, L, D) pack layout."""
    x = torch.zeros(pb.ref_channels.shape)
    for i, (p, f) in enumerate(zip(pb.packs, frames)):
        if len(f) != p.n_target:
            raise InputError("target frames do not match the pack's target region")
        x[i, p.n_ref : len(p)] = torch.as_tensor(np.asarray(f))
    return x


def _noise(pb: PackBatch, seeds) -> torch.Tensor:
    x = torch.zeros(pb.ref_channels.shape)
    for i, (p, s) in enumerate(zip(pb.packs, seeds)):
        g = torch.Generator().manual_seed(int(s))
        x[i, p.n_ref : len(p)] = torch.randn(p.n_target, x.shape[-1], generator=g)
    return x


def fm_train_step(model, optimizer, pb: PackBatch, x1, generator: torch.Generator, clip=1.0):
    B = x1.shape[0]
    t = torch.rand(B, generator=generator)
    x0 = torch.randn(x1.shape, generator=generator) * pb.target[..., None]
    optimizer.zero_grad()
    loss = fm_loss(model, pb, x1, x0, t)
    loss.backward()
    clip_grad_norm(optimizer.params, clip)
    optimizer.step()
    return loss.item()


@torch.no_grad()
def fm_sample(model, packs: Sequence[ConditioningPack], steps: int = 32, seed: int | Sequence[int] = 0) -> list[np.ndarray]:
    """Euler-integrate the learned velocity from seeded noise; returns target-region frames."""
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    pb = batch_packs(packs, model.cfg.n_mel)
    seeds = [seed + i for i in range(len(packs))] if isinstance(seed, (int, np.integer)) else list(seed)
    x = _noise(pb, seeds)
    w = pb.target[..., None].to(x.dtype)
    dt = 1.0 / steps
    for i in range(steps):
        s = torch.full((len(packs),), i * dt)
        x = x + dt * model(x, s, pb) * w
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {i}")
    return [x[i, p.n_ref : len(p)].numpy().copy() for i, p in enumerate(pb.packs)]


def decode_utterance(model, A, A_ref, M_ref, steps=32, seed=0) -> np.ndarray:
    return fm_sample(model, [condition_pack(A, A_ref, M_ref)], steps, [seed])[0]


def decode_batch(model, As, A_refs, M_refs, steps=32, seeds=None, batch_size=64) -> list[np.ndarray]:
    seeds = list(range(len(As))) if seeds is None else list(seeds)
    out: list[np.ndarray] = []
    for s in range(0, len(As), batch_size):
        packs = [condition_pack(a, ar, mr) for a, ar, mr in zip(As[s : s + batch_size], A_refs[s : s + batch_size], M_refs[s : s + batch_size])]
        out.extend(fm_sample(model, packs, steps, seeds[s : s + batch_size]))
    return out
