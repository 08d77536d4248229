"""Training losses: reconstruction, gradient matching, temporal consistency, TV.

All functions accept plain arrays, :class:`~elevmap.autodiff.Tensor`
values, or :class:`~elevmap.mapspace.ElevationMap` instances. They
return a float for array inputs and a Tensor when any input is a Tensor,
so the same definitions serve both metric evaluation and backprop.

Map axes: x is the forward (row) axis, y the lateral (column) axis.
Finite differences are forward differences; the last row/column is
excluded per axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, smooth_l1
from .errors import ConfigurationError
from .mapspace import ElevationMap, OverlapMask

__all__ = [
    "LossWeights",
    "loss_recons",
    "loss_grad",
    "loss_tc",
    "loss_tv",
    "loss_total",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights for the gradient (mu), temporal (lam) and TV (gamma) terms.

    lam is kept small relative to the others by default; large temporal
    weights hurt convergence.
    """

    mu: float = 1.0
    lam: float = 0.05
    gamma: float = 0.01

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0 or self.gamma < 0:
            raise ConfigurationError("loss weights must be non-negative")


def _coerce(x, other=None):
    """Pull values out of ElevationMap inputs, checking grid agreement."""
    if isinstance(x, ElevationMap) and isinstance(other, ElevationMap):
        if x.grid != other.grid:
            raise ConfigurationError(f"grid mismatch: {x.grid} vs {other.grid}")
    return x.values if isinstance(x, ElevationMap) else x


def _check_shapes(a, b):
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if sa != sb:
        raise ConfigurationError(f"map shape mismatch: {sa} vs {sb}")


def _unwrap(result: Tensor, *inputs) -> Tensor | float:
    if any(isinstance(i, Tensor) for i in inputs):
        return result
    return float(result.data)


def _abs_mean(t: Tensor) -> Tensor:
    return t.abs().mean()


def _diff_x(v: Tensor) -> Tensor:
    return v[1:, :] - v[:-1, :]


def _diff_y(v: Tensor) -> Tensor:
    return v[:, 1:] - v[:, :-1]


def loss_recons(pred, gt, beta: float = 1.0):
    """Mean smooth-L1 penalty on (gt - pred); quadratic below beta meters."""
    p, g = _coerce(pred, gt), _coerce(gt, pred)
    _check_shapes(p, g)
    out = smooth_l1(as_tensor(g) - as_tensor(p), beta=beta).mean()
    return _unwrap(out, p, g)


def loss_grad(pred, gt):
    """Mean absolute forward-difference gradient of the residual, both axes."""
    p, g = _coerce(pred, gt), _coerce(gt, pred)
    _check_shapes(p, g)
    e = as_tensor(g) - as_tensor(p)
    out = _abs_mean(_diff_x(e)) + _abs_mean(_diff_y(e))
    return _unwrap(out, p, g)


def loss_tc(pred, prev_aligned, mask):
    """Mean absolute difference against the aligned previous map, overlap cells only.

    Empty overlap (first frame, or footprints fully disjoint) contributes 0.
    """
    p = _coerce(pred)
    q = _coerce(prev_aligned)
    m = mask.mask if isinstance(mask, OverlapMask) else np.asarray(mask, dtype=bool)
    _check_shapes(p, q)
    _check_shapes(p, m)
    count = int(m.sum())
    if count == 0:
        return 0.0
    out = ((as_tensor(p) - as_tensor(q)) * m.astype(np.float64)).abs().sum() * (1.0 / count)
    return _unwrap(out, p, q)


def loss_tv(pred):
    """Anisotropic total variation of the prediction itself."""
    p = _coerce(pred)
    t = as_tensor(p)
    out = _abs_mean(_diff_x(t)) + _abs_mean(_diff_y(t))
    return _unwrap(out, p)


def loss_total(pred, gt, prev_aligned, mask, weights: LossWeights, beta: float = 1.0):
    """Weighted combination of all four terms.

    Returns (total, breakdown) where breakdown holds the unweighted
    per-term float values.
    """
    recons = loss_recons(pred, gt, beta=beta)
    grad = loss_grad(pred, gt)
    tc = loss_tc(pred, prev_aligned, mask) if prev_aligned is not None else 0.0
    tv = loss_tv(pred)
    total = recons + weights.mu * grad + weights.lam * tc + weights.gamma * tv
    breakdown = {
        "recons": _term_value(recons),
        "grad": _term_value(grad),
        "tc": _term_value(tc),
        "tv": _term_value(tv),
    }
    return total, breakdown


def _term_value(t) -> float:
    return float(t.data) if isinstance(t, Tensor) else float(t)
