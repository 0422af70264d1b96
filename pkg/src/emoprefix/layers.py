"""Transformer building blocks shared by the three models."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import attention


@dataclass
class LoraAdapter:
    A: torch.Tensor  # r x d_in
    B: torch.Tensor  # d_out x r
    alpha: float
    r: int
    target: str = ""

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self) -> torch.Tensor:
        return self.scaling * self.B @ self.A


def apply_lora(weight, adapter: LoraAdapter, x, bias=None):
    """x Wᵀ + (alpha/r) x Aᵀ Bᵀ, the unmerged LoRA forward."""
    if adapter.A.shape[1] != weight.shape[1] or adapter.B.shape[0] != weight.shape[0]:
        raise DimensionError("LoRA factors do not match the base weight")
    out = F.linear(x, weight, bias)
    return out + adapter.scaling * (x @ adapter.A.T) @ adapter.B.T


def merge_lora(weight, adapter: LoraAdapter):
    return weight + adapter.delta()


class LoRALinear(nn.Linear):
    """Linear layer that can grow a zero-initialised low-rank adapter."""

    def __init__(self, d_in, d_out, bias=True):
        super().__init__(d_in, d_out, bias=bias)
        self.lora_A = None
        self.lora_B = None
        self.lora_alpha = 0.0
        self.lora_r = 0

    def enable_lora(self, r: int, alpha: float, generator: torch.Generator | None = None):
        if r < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if r >= min(self.in_features, self.out_features):
            warnings.warn(f"LoRA rank {r} is not low-rank for a {self.out_features}x{self.in_features} weight")
        a = torch.randn(r, self.in_features, generator=generator) / math.sqrt(self.in_features)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, r))
        self.lora_alpha, self.lora_r = float(alpha), r

    @property
    def adapter(self) -> LoraAdapter | None:
        if self.lora_A is None:
            return None
        return LoraAdapter(self.lora_A, self.lora_B, self.lora_alpha, self.lora_r)

    def forward(self, x):
        if self.lora_A is None:
            return super().forward(x)
        return apply_lora(self.weight, self.adapter, x, self.bias)

    def merged_weight(self):
        return self.weight if self.lora_A is None else merge_lora(self.weight, self.adapter)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, n_heads, d_kv=None):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads, self.d_head = n_heads, d_model // n_heads
        self.q = LoRALinear(d_model, d_model)
        self.k = LoRALinear(d_kv, d_model)
        self.v = LoRALinear(d_kv, d_model)
        self.o = LoRALinear(d_model, d_model)

    def split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, mask=None, context=None, extra_kv=None, cache=None):
        """Attend from ``x`` to ``context`` (defaults to ``x``).

        extra_kv: (K_E, V_E) of shape (B, k, d_model), prepended to the keys/values.
        cache: dict with running "k"/"v" (B, h, L, d_head), extended in place.
        mask: boolean (B or 1, Lq, Lk_total) including any prepended and cached keys.
        """
        context = x if context is None else context
        q = self.split(self.q(x))
        k = self.split(self.k(context))
        v = self.split(self.v(context))
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if extra_kv is not None:
            ke, ve = (self.split(t) for t in extra_kv)
            k = torch.cat([ke, k], dim=2)
            v = torch.cat([ve, v], dim=2)
        if mask is not None and mask.dim() == 3:
            mask = mask.unsqueeze(1)
        out = attention(q, k, v, mask)
        B, _, L, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(B, L, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff):
        super().__init__()
        self.fc1 = LoRALinear(d_model, d_ff)
        self.fc2 = LoRALinear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x, mask=None, extra_kv=None, cache=None):
        x = x + self.attn(self.ln1(x), mask=mask, extra_kv=extra_kv, cache=cache)
        return x + self.ff(self.ln2(x))


def lora_linears(module: nn.Module):
    return [m for m in module.modules() if isinstance(m, LoRALinear)]
