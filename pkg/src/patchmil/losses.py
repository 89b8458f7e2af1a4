"""Weakly supervised loss: class-token cross-entropy plus a focal/CE term on the
most positive instance, and a finite-difference gradient checker.

All loss functions take torch tensors (plain floats are promoted) and clamp
probabilities to ``[eps, 1 - eps]`` before every log.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

EPS = 1e-7


class NonDifferentiablePoint(RuntimeError):
    """The instance selection is tied or flips inside the finite-difference stencil."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 0.5
    lam: float = 0.5
    reduction: str = "mean"
    eps: float = EPS
    alpha_mode: str = "scalar"

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("gamma, beta and lam must be non-negative")
        if self.reduction != "mean":
            raise ValueError(f"unsupported reduction {self.reduction!r}")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.alpha_mode not in ("scalar", "balanced"):
            raise ValueError(f"alpha_mode must be 'scalar' or 'balanced', got {self.alpha_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_mil: torch.Tensor
    l_all: torch.Tensor
    per_sample_cls: torch.Tensor
    per_sample_mil: torch.Tensor


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _check_labels(y: torch.Tensor) -> torch.Tensor:
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y


def cross_entropy(y, p, eps: float = EPS) -> torch.Tensor:
    """Per-sample ``-log p[y]`` for two-class probabilities ``p`` of shape (..., 2)."""
    p = _as_tensor(p)
    y = _check_labels(_as_tensor(y, p).to(p.dtype))
    p = p.clamp(eps, 1.0 - eps)
    return -(y * p[..., 1].log() + (1.0 - y) * p[..., 0].log())


def focal_term(
    y, y_hat, alpha: float = 0.25, gamma: float = 2.0, eps: float = EPS, alpha_mode: str = "scalar"
) -> torch.Tensor:
    """Binary focal loss ``-a_t (1 - p_t)^gamma log p_t`` on a positive-class probability.

    ``alpha_mode="scalar"`` weights both classes by ``alpha`` (so alpha=1,
    gamma=0 is plain cross-entropy); ``"balanced"`` uses ``alpha`` for
    positives and ``1 - alpha`` for negatives.
    """
    y_hat = _as_tensor(y_hat).clamp(eps, 1.0 - eps)
    y = _check_labels(_as_tensor(y, y_hat).to(y_hat.dtype))
    neg_weight = alpha if alpha_mode == "scalar" else 1.0 - alpha
    pos = -alpha * (1.0 - y_hat) ** gamma * y_hat.log()
    neg = -neg_weight * y_hat**gamma * (1.0 - y_hat).log()
    return y * pos + (1.0 - y) * neg


def mil_terms(y, y_hat, config: LossConfig) -> torch.Tensor:
    y_hat = _as_tensor(y_hat)
    pair = torch.stack([1.0 - y_hat, y_hat], dim=-1)
    focal = focal_term(y, y_hat, config.alpha, config.gamma, config.eps, config.alpha_mode)
    return focal + config.beta * cross_entropy(y, pair, config.eps)


def mil_loss(y, y_hat, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Batch mean of focal + beta * CE on the selected-instance probabilities."""
    y_hat = _as_tensor(y_hat)
    if y_hat.numel() == 0:
        raise ValueError("empty batch")
    return mil_terms(y, y_hat, config).mean()


def cls_loss(y, cls_probs, eps: float = EPS) -> torch.Tensor:
    cls_probs = _as_tensor(cls_probs)
    if cls_probs.numel() == 0:
        raise ValueError("empty batch")
    return cross_entropy(y, cls_probs, eps).mean()


def total_loss(l_mil, l_cls, lam: float = 0.5):
    return l_mil + lam * l_cls


def weakly_supervised_loss(
    labels: torch.Tensor,
    cls_probs: torch.Tensor,
    selected_prob: torch.Tensor,
    config: LossConfig = LossConfig(),
) -> LossBreakdown:
    per_cls = cross_entropy(labels, cls_probs, config.eps)
    per_mil = mil_terms(labels, selected_prob, config)
    l_cls = per_cls.mean()
    l_mil = per_mil.mean()
    return LossBreakdown(l_cls, l_mil, total_loss(l_mil, l_cls, config.lam), per_cls, per_mil)


# --- gradient checking --------------------------------------------------------


def _top_gap(probs: torch.Tensor) -> float:
    positive = probs[..., 1].reshape(-1, probs.shape[-2])
    if positive.shape[-1] < 2:
        return float("inf")
    top2 = positive.topk(2, dim=-1).values
    return float((top2[:, 0] - top2[:, 1]).min())


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_coords: int = 16,
    step: float = 1e-5,
    seed: int = 0,
    selection_fn: Callable[[], torch.Tensor] | None = None,
    tie_tol: float = 1e-9,
    floor: float = 1e-12,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` recomputes the scalar loss from the current contents of
    ``params`` (perturbed in place).  ``selection_fn``, when given, returns the
    (..., N, 2) instance probabilities; a tie at the base point or a change of
    the selected instances inside the stencil raises ``NonDifferentiablePoint``.
    """
    if n_coords < 1:
        raise ValueError("n_coords must be positive")
    if any(p.dtype != torch.float64 for p in params):
        raise ValueError("gradient_check requires float64 parameters")

    def selection() -> torch.Tensor | None:
        if selection_fn is None:
            return None
        with torch.no_grad():
            return selection_fn().argmax(dim=-2)[..., 1]

    if selection_fn is not None:
        with torch.no_grad():
            gap = _top_gap(selection_fn())
        if gap <= tie_tol:
            raise NonDifferentiablePoint(f"argmax tie at base point (gap {gap:.3g})")
    base_sel = selection()

    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            which = int(np.searchsorted(offsets, f, side="right") - 1)
            p = params[which].view(-1)
            j = int(f - offsets[which])
            original = p[j].item()
            p[j] = original + step
            plus = loss_fn().item()
            sel_plus = selection()
            p[j] = original - step
            minus = loss_fn().item()
            sel_minus = selection()
            p[j] = original
            if base_sel is not None and not (
                torch.equal(base_sel, sel_plus) and torch.equal(base_sel, sel_minus)
            ):
                raise NonDifferentiablePoint("selected instance changes inside the stencil")
            numeric = (plus - minus) / (2 * step)
            analytic = grads[which].reshape(-1)[j].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
