"""Small frozen classifiers over mel-like frames.

``MeanPoolClassifier`` is the model family behind the emotion embedder used by the
prefix encoder and the emotion/speaker probes used for evaluation. Its embedding is
the hidden (penultimate) layer. ``FrameClassifier`` labels single frames and backs
the content-accuracy proxy.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, StateError
from .numerics import AdamW, freeze


def mean_pool(mels: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(m).mean(axis=0) for m in mels]))


class MeanPoolClassifier(nn.Module):
    """mean-pool -> Linear -> tanh (embedding) -> Linear (logits)."""

    def __init__(self, n_mel, n_classes, d_emb=16):
        super().__init__()
        self.hidden = nn.Linear(n_mel, d_emb)
        self.head = nn.Linear(d_emb, n_classes)
        self.register_buffer("shift", torch.zeros(n_mel))
        self.register_buffer("scale", torch.ones(n_mel))
        self.register_buffer("heldout_accuracy", torch.tensor(-1.0))

    @property
    def trained(self) -> bool:
        return self.heldout_accuracy.item() >= 0

    def _require_trained(self):
        if not self.trained:
            raise StateError("probe has not been trained")

    def embed_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.hidden((pooled - self.shift) / self.scale))

    def forward(self, pooled):
        return self.head(self.embed_pooled(pooled))

    def embed(self, mels) -> torch.Tensor:
        self._require_trained()
        with torch.no_grad():
            return self.embed_pooled(mean_pool(mels))

    def logits(self, mels) -> torch.Tensor:
        self._require_trained()
        with torch.no_grad():
            return self(mean_pool(mels))

    def predict(self, mels) -> np.ndarray:
        return self.logits(mels).argmax(dim=-1).numpy()

    def fit(self, mels, labels, heldout_mels, heldout_labels, steps=800, lr=1e-2, seed=0, min_accuracy=0.95):
        torch.manual_seed(seed)
        for layer in (self.hidden, self.head):
            nn.init.normal_(layer.weight, std=1.0 / np.sqrt(layer.in_features))
            nn.init.zeros_(layer.bias)
        x = mean_pool(mels)
        y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        self.shift.copy_(x.mean(0))
        self.scale.copy_(x.std(0) + 1e-6)
        opt = AdamW(self.parameters(), lr=lr, weight_decay=1e-3)
        for _ in range(steps):
            opt.zero_grad()
            F.cross_entropy(self(x), y).backward()
            opt.step()
        with torch.no_grad():
            pred = self(mean_pool(heldout_mels)).argmax(-1).numpy()
        acc = float((pred == np.asarray(heldout_labels)).mean())
        self.heldout_accuracy.fill_(acc)
        freeze(self)
        if acc < min_accuracy:
            raise StateError(f"probe reached {acc:.3f} held-out accuracy, below {min_accuracy}")
        return acc


class FrameClassifier(nn.Module):
    def __init__(self, n_mel, n_classes, hidden=32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_mel, hidden), nn.Tanh(), nn.Linear(hidden, n_classes))
        self.register_buffer("heldout_accuracy", torch.tensor(-1.0))

    @property
    def trained(self):
        return self.heldout_accuracy.item() >= 0

    def forward(self, frames):
        return self.net(frames)

    def predict_frames(self, mel: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise StateError("content probe has not been trained")
        with torch.no_grad():
            return self(torch.as_tensor(np.asarray(mel))).argmax(-1).numpy()

    def fit(self, frames, labels, heldout_frames, heldout_labels, steps=600, lr=1e-2, seed=0, min_accuracy=0.9):
        torch.manual_seed(seed)
        for m in self.net:
            if isinstance(m, nn.Linear):
                m.reset_parameters()
        x = torch.as_tensor(np.asarray(frames))
        y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        opt = AdamW(self.parameters(), lr=lr, weight_decay=1e-3)
        for _ in range(steps):
            opt.zero_grad()
            F.cross_entropy(self(x), y).backward()
            opt.step()
        with torch.no_grad():
            pred = self(torch.as_tensor(np.asarray(heldout_frames))).argmax(-1).numpy()
        acc = float((pred == np.asarray(heldout_labels)).mean())
        self.heldout_accuracy.fill_(acc)
        freeze(self)
        if acc < min_accuracy:
            raise StateError(f"content probe reached {acc:.3f} frame accuracy, below {min_accuracy}")
        return acc


def collapse_runs(frame_labels: np.ndarray, min_run: int = 2) -> np.ndarray:
    """Merge consecutive identical labels, dropping runs shorter than ``min_run``."""
    labels = np.asarray(frame_labels)
    if labels.size == 0:
        raise DataError("no frames to collapse")
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    kept = [labels[s] for s, e in zip(starts, ends) if e - s >= min_run]
    out: list[int] = []
    for lab in kept:
        if not out or out[-1] != lab:
            out.append(int(lab))
    return np.array(out, dtype=np.int64)
