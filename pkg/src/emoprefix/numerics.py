"""Numerical substrate: attention, gradient checking, AdamW and checkpoint files.

Autodiff is PyTorch's reverse mode; everything runs in float64.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import ConfigError, DegenerateMaskError, DimensionError, NumericError, StateError

DTYPE = torch.float64
MASK_PENALTY = -1e9
CHECKPOINT_VERSION = "emoprefix-ckpt/1"

torch.set_default_dtype(DTYPE)


def attention(q, k, v, mask=None, return_weights=False):
    """softmax(q kᵀ / √d + penalty) v over the last two axes.

    ``mask`` is boolean and broadcastable to ``(..., n, m)``; True keeps a key.
    Masked keys get an additive ``MASK_PENALTY`` which underflows to an exact
    zero weight in float64.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention needs d > 0")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        mask = mask.to(torch.bool)
        if not mask.any(-1).all():
            raise DegenerateMaskError("a query row has every key masked")
        scores = scores.masked_fill(~mask, 0.0) + (~mask).to(scores.dtype) * MASK_PENALTY
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def causal_mask(n: int, m: int | None = None) -> torch.Tensor:
    """Lower-triangular keep-mask; with m > n the extra keys sit on the left."""
    m = n if m is None else m
    return torch.ones(n, m, dtype=torch.bool).tril(m - n)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of (possibly fractional) positions."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    ang = positions.to(DTYPE).unsqueeze(-1) * freqs
    emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


def _max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return ((analytic - numeric).abs() / (numeric.abs() + 1e-8)).max().item()


def _central_differences(f: Callable[[], float], flat: torch.Tensor, eps: float) -> torch.Tensor:
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"function not finite under perturbation of element {i}")
            numeric[i] = (fp - fm) / (2 * eps)
    return numeric


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    error = max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)
    """
    x = x.detach().clone().to(DTYPE).requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not torch.isfinite(y):
        raise NumericError("function is not finite at x")
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    analytic = torch.zeros_like(x) if analytic is None else analytic.detach()

    flat = x.detach().clone().reshape(-1)
    numeric = _central_differences(lambda: f(flat.view_as(x)).item(), flat, eps)
    return _max_rel_error(analytic.reshape(-1), numeric)


def grad_check_param(loss_fn: Callable[[], torch.Tensor], param: torch.nn.Parameter, eps: float = 1e-4) -> float:
    """grad_check for a parameter that ``loss_fn`` reads from inside a module."""
    if not param.requires_grad:
        raise StateError("cannot gradient-check a frozen parameter")
    param.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    (analytic,) = torch.autograd.grad(loss, param, allow_unused=True)
    analytic = torch.zeros_like(param) if analytic is None else analytic.detach()
    flat = param.data.view(-1)
    with torch.no_grad():
        numeric = _central_differences(lambda: loss_fn().item(), flat, eps)
    return _max_rel_error(analytic.reshape(-1), numeric)


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, t=1):
    """One functional AdamW update, in place on ``params``.

    ``state`` maps parameter index to ``(m, v)`` and is updated in place.
    Frozen parameters (``requires_grad`` False) are skipped entirely.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise ConfigError("AdamW step counter starts at 1")
    b1, b2 = betas
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if not p.requires_grad or g is None:
                continue
            m, v = state.get(i, (torch.zeros_like(p), torch.zeros_like(p)))
            p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
            state[i] = (m, v)
    return params


class AdamW:
    """Stateful wrapper around ``adamw_step`` with the torch optimizer calling convention."""

    def __init__(self, params: Iterable[torch.nn.Parameter], lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        self.t += 1
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr or self.lr,
                   self.betas, self.eps, self.weight_decay, self.t)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g**2).sum() for g in grads)).item()
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return total


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def tensor_checksum(tensors: Mapping[str, torch.Tensor] | torch.nn.Module) -> str:
    """sha256 over names, shapes and raw bytes; stable within one build."""
    if isinstance(tensors, torch.nn.Module):
        tensors = dict(tensors.state_dict())
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_to_numpy(tensors[name]))
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def save_checkpoint(path: str | Path, sections: Mapping[str, Mapping[str, object]], meta: Mapping | None = None) -> Path:
    """Write ``{section: {name: array}}`` to an ``.npz`` with a version tag.

    Keys are ``section/name``; shapes and row-major values are preserved by npz.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"__version__": np.array(CHECKPOINT_VERSION), "__meta__": np.array(json.dumps(dict(meta or {}), sort_keys=True))}
    for section, named in sections.items():
        for name, value in named.items():
            arrays[f"{section}/{name}"] = _to_numpy(value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        version = str(data["__version__"]) if "__version__" in data else None
        if version != CHECKPOINT_VERSION:
            raise StateError(f"{path}: unsupported checkpoint version {version!r}")
        meta = json.loads(str(data["__meta__"]))
        sections: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key.startswith("__"):
                continue
            section, name = key.split("/", 1)
            sections.setdefault(section, {})[name] = data[key]
    return sections, meta


def module_state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, state: Mapping[str, np.ndarray], strict=True) -> None:
    module.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()}, strict=strict)
