"""Emotion-aware prefix encoder.

reference mel -> temporal shuffle -> style transformer -> perceiver bottleneck
-> concat with a frozen emotion embedding -> linear projection to the LM width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError, StateError
from .layers import Block, FeedForward, MultiHeadAttention
from .numerics import sinusoidal
from .probes import MeanPoolClassifier


@dataclass
class PrefixEncoderConfig:
    n_mel: int = 16
    d_style: int = 32
    n_layers: int = 2  # 6 at full scale
    n_heads: int = 2
    d_ff: int = 64
    n_latents: int = 8  # k; 32 at full scale
    n_perceiver_blocks: int = 1
    d_emo: int = 16
    d_model: int = 64
    shuffle_at_inference: bool = False


def temporal_shuffle(mel, seed: int | np.random.Generator):
    """Permute frames (rows) with a seeded uniform permutation; channels untouched."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(mel))
    return mel[perm]


class PerceiverBlock(nn.Module):
    """Latents cross-attend to the features, then a feed-forward."""

    def __init__(self, d, n_heads, d_ff):
        super().__init__()
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, latents, features, mask=None):
        x = latents + self.attn(self.ln_q(latents), mask=mask, context=self.ln_kv(features))
        return x + self.ff(self.ln_ff(x))


class PrefixEncoder(nn.Module):
    def __init__(self, cfg: PrefixEncoderConfig = PrefixEncoderConfig()):
        super().__init__()
        if cfg.n_latents < 1:
            raise ConfigError("need at least one latent token")
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.n_mel, cfg.d_style)
        self.blocks = nn.ModuleList(Block(cfg.d_style, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.ln_style = nn.LayerNorm(cfg.d_style)
        self.latents = nn.Parameter(torch.randn(cfg.n_latents, cfg.d_style) / cfg.d_style**0.5)
        self.perceiver = nn.ModuleList(
            PerceiverBlock(cfg.d_style, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_perceiver_blocks)
        )
        self.fusion = nn.Linear(cfg.d_style + cfg.d_emo, cfg.d_model)

    def encode_style(self, mel, key_mask=None):
        """Bidirectional encoding of (B, T, n_mel) frames; positions index shuffled slots."""
        if mel.dim() == 2:
            return self.encode_style(mel[None], None if key_mask is None else key_mask[None])[0]
        T = mel.shape[1]
        x = self.in_proj(mel) + sinusoidal(torch.arange(T), self.cfg.d_style)
        mask = None if key_mask is None else key_mask[:, None, :].expand(-1, T, -1)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_style(x)

    def perceive(self, features, key_mask=None):
        """Compress (B, T, d_style) features to (B, k, d_style) through the latents."""
        if features.dim() == 2:
            return self.perceive(features[None], None if key_mask is None else key_mask[None])[0]
        if features.shape[1] == 0:
            raise InputError("perceiver needs at least one feature frame")
        B = features.shape[0]
        lat = self.latents.expand(B, -1, -1)
        mask = None if key_mask is None else key_mask[:, None, :].expand(-1, self.cfg.n_latents, -1)
        for blk in self.perceiver:
            lat = blk(lat, features, mask=mask)
        return lat

    def fuse(self, style, emotion):
        """Linear(concat[s ; broadcast(e)]) -> (B, k, d_model)."""
        if style.dim() == 2:
            return self.fuse(style[None], emotion.reshape(1, -1))[0]
        if style.shape[-1] + emotion.shape[-1] != self.fusion.in_features:
            raise ConfigError("style/emotion widths do not match the fusion projection")
        e = emotion[:, None, :].expand(-1, style.shape[1], -1)
        return self.fusion(torch.cat([style, e], dim=-1))

    def forward(self, mel, emotion, key_mask=None):
        return self.fuse(self.perceive(self.encode_style(mel, key_mask), key_mask), emotion)


def emotion_embed(embedder: MeanPoolClassifier, mels: Sequence[np.ndarray]) -> torch.Tensor:
    """Frozen emotion-classifier embedding of each (unshuffled) reference."""
    if not embedder.trained:
        raise StateError("emotion embedder has not been pretrained")
    return embedder.embed(mels)


def pad_frames(mels: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad variable-length frames; returns (B, T_max, D) and a (B, T_max) key mask."""
    T = max(len(m) for m in mels)
    D = np.asarray(mels[0]).shape[1]
    x = torch.zeros(len(mels), T, D)
    mask = torch.zeros(len(mels), T, dtype=torch.bool)
    for i, m in enumerate(mels):
        x[i, : len(m)] = torch.as_tensor(np.asarray(m))
        mask[i, : len(m)] = True
    return x, mask


def encode_prefix(encoder: PrefixEncoder, embedder: MeanPoolClassifier, ref_mels, shuffle_rng=None):
    """Prefix E for a batch of reference mels.

    With ``shuffle_rng`` each reference gets a fresh permutation; without it the
    identity is used unless the config asks for a seeded shuffle at inference.
    """
    if shuffle_rng is None and encoder.cfg.shuffle_at_inference:
        shuffle_rng = np.random.default_rng(0)
    shuffled = [temporal_shuffle(m, shuffle_rng) if shuffle_rng is not None else m for m in ref_mels]
    e = emotion_embed(embedder, ref_mels)
    x, mask = pad_frames(shuffled)
    return encoder(x, e, mask)
