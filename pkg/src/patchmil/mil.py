"""Multiple-instance calculation: per-patch head, softmax, most-positive selection.

Every patch token is an instance of the image bag.  Column 1 of the
two-class output is the positive (tooth-marked) class.  Selection ties are
broken toward the smallest patch index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

POSITIVE = 1


class MLPHead(nn.Module):
    """Linear(D -> hidden) -> GELU -> Linear(hidden -> 2), applied per token."""

    def __init__(self, embed_dim: int, hidden_dim: int | None = None, num_classes: int = 2):
        super().__init__()
        hidden_dim = hidden_dim or max(embed_dim // 2, 1)
        self.fc1 = nn.Linear(embed_dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, num_classes)
        nn.init.trunc_normal_(self.fc1.weight, std=0.02)
        nn.init.trunc_normal_(self.fc2.weight, std=0.02)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def instance_head(tokens: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Apply the shared head to every instance: (..., N, D) -> (..., N, 2)."""
    tokens = torch.as_tensor(tokens)
    if not torch.isfinite(tokens).all():
        raise ValueError("instance tokens contain non-finite values")
    return head(tokens)


def softmax_rows(logits) -> torch.Tensor:
    """Numerically stable softmax over the last axis."""
    logits = torch.as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def _first_argmax(scores: torch.Tensor) -> torch.Tensor:
    # torch.argmax does not promise which index wins a tie.
    n = scores.shape[-1]
    is_max = scores == scores.max(dim=-1, keepdim=True).values
    order = torch.arange(n, 0, -1, device=scores.device)
    return (is_max * order).argmax(dim=-1)


def micm_select(probs) -> tuple[torch.Tensor, torch.Tensor]:
    """Most positive instance of each bag.

    ``probs`` is (..., N, 2).  Returns ``(index, positive_prob)`` with the
    leading batch shape; the probability stays differentiable.
    """
    probs = torch.as_tensor(probs)
    if probs.shape[-2] == 0:
        raise ValueError("cannot select from an empty bag")
    positive = probs[..., POSITIVE]
    index = _first_argmax(positive.detach())
    selected = positive.gather(-1, index.unsqueeze(-1)).squeeze(-1)
    return index, selected


def masked_select(probs, patch_mask) -> tuple[torch.Tensor, torch.Tensor]:
    """``micm_select`` restricted to the instances where ``patch_mask`` is True."""
    probs = torch.as_tensor(probs)
    patch_mask = torch.as_tensor(patch_mask, dtype=torch.bool, device=probs.device)
    if patch_mask.shape != probs.shape[:-1]:
        raise ValueError(f"patch mask shape {tuple(patch_mask.shape)} does not match {tuple(probs.shape[:-1])}")
    if not patch_mask.any(dim=-1).all():
        raise ValueError("patch mask selects no instance")
    positive = probs[..., POSITIVE]
    scores = torch.where(patch_mask, positive.detach(), torch.full_like(positive, -1.0))
    index = _first_argmax(scores)
    selected = positive.gather(-1, index.unsqueeze(-1)).squeeze(-1)
    return index, selected


def bag_probability(instance_probs: Sequence[float] | torch.Tensor | np.ndarray):
    """Noisy-OR bag probability ``1 - prod(1 - p_j)`` over the last axis.

    Works on plain sequences (returns float), numpy arrays and tensors.
    """
    if isinstance(instance_probs, torch.Tensor):
        p = instance_probs
        if ((p < 0) | (p > 1)).any():
            raise ValueError("instance probabilities must lie in [0, 1]")
        return 1.0 - torch.prod(1.0 - p, dim=-1)
    p = np.asarray(instance_probs, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("instance probabilities must lie in [0, 1]")
    out = 1.0 - np.prod(1.0 - p, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def noisy_or_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Bag-level binary cross-entropy on the noisy-OR probability, batch mean.

    Opt-in alternative to hard most-positive selection; every instance
    receives gradient.
    """
    bag = bag_probability(probs[..., POSITIVE]).clamp(eps, 1 - eps)
    y = labels.to(bag.dtype)
    return -(y * bag.log() + (1 - y) * (1 - bag).log()).mean()


@dataclass
class InstanceScores:
    logits: np.ndarray
    probs: np.ndarray
    selected_index: int
    selected_prob: float

    @classmethod
    def from_logits(cls, logits, patch_mask=None) -> "InstanceScores":
        logits_t = torch.as_tensor(logits).detach()
        probs = softmax_rows(logits_t)
        if patch_mask is None:
            idx, val = micm_select(probs)
        else:
            idx, val = masked_select(probs, patch_mask)
        return cls(logits_t.cpu().numpy(), probs.cpu().numpy(), int(idx), float(val))
