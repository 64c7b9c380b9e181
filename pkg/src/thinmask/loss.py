"""Balanced mask loss: Dice + lambda * weighted BCE, with analytic gradients.

All losses are SUM-reduced over the H x W grid unless ``normalize=True``
(divide by H*W). Gradients are taken with respect to probabilities; use
:func:`to_logit_grad` to move them into logit space.

Foreground pixels of a thin target are up-weighted by
``max(1, 0.5 * S_bbox / S_mask)`` so that the total foreground weight is
``max(S_mask, 0.5 * S_bbox)`` regardless of how thin the mask is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import BinaryMask, Instance

DEFAULT_LAMBDA = 1.0
DEFAULT_EPSILON = 1.0
DEFAULT_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    dice: float
    wbce: float
    total: float
    lam: float = DEFAULT_LAMBDA
    epsilon: float = DEFAULT_EPSILON


def as_prob_mask(p, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a probability grid and return it as float64."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"probability grid must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"dimension mismatch: probabilities {arr.shape} vs target {tuple(shape)}")
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError("probabilities must lie in [0, 1]")
    return arr


def _target(y: BinaryMask | np.ndarray) -> np.ndarray:
    if isinstance(y, BinaryMask):
        return y.bits.astype(np.float64)
    return np.asarray(y, dtype=np.float64)


def _pair(p, y) -> tuple[np.ndarray, np.ndarray]:
    t = _target(y)
    return as_prob_mask(p, t.shape), t


_GRID = (-2, -1)


def _dice_terms(p: np.ndarray, y: np.ndarray, eps: float):
    # p may carry leading batch axes; reductions run over the last two
    num = 2.0 * np.sum(p * y, axis=_GRID) + eps
    den = np.sum(p * p, axis=_GRID) + np.sum(y * y) + eps
    return num, den


def _dice_value(p: np.ndarray, y: np.ndarray, eps: float):
    num, den = _dice_terms(p, y, eps)
    # (den - num) / den rather than 1 - num / den: the difference is exact
    # near a perfect prediction and never negative since p^2 + y^2 >= 2py
    return (den - num) / den


def _wbce_value(p: np.ndarray, y: np.ndarray, w: np.ndarray, clamp: float, normalize: bool):
    pc = _clipped(p, clamp)
    ll = y * np.log(pc) + (1.0 - y) * np.log1p(-pc)
    total = -np.sum(w * ll, axis=_GRID)
    if normalize:
        total = total / y.size
    # -0.0 for a perfect prediction reads badly in reports
    return total + 0.0


def dice_loss(p, y: BinaryMask, eps: float = DEFAULT_EPSILON) -> float:
    """``1 - (2 sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    pa, ya = _pair(p, y)
    return float(_dice_value(pa, ya, eps))


def dice_grad(p, y: BinaryMask, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    if not eps > 0:
        raise ValueError("eps must be positive")
    pa, ya = _pair(p, y)
    num, den = (float(v) for v in _dice_terms(pa, ya, eps))
    return -(2.0 * ya * den - num * 2.0 * pa) / (den * den)


def pixel_weights(y: BinaryMask, s_bbox: float, s_mask: float) -> np.ndarray:
    """Per-pixel weights: 1 on background, ``max(1, 0.5*s_bbox/s_mask)`` on foreground."""
    if not s_bbox > 0:
        raise ValueError("box area must be positive")
    if not s_mask > 0:
        raise ValueError("weights undefined for empty target")
    fg_weight = max(1.0, 0.5 * s_bbox / s_mask)
    return np.where(y.bits, fg_weight, 1.0)


def _clipped(p: np.ndarray, clamp: float) -> np.ndarray:
    if not 0 < clamp < 0.5:
        raise ValueError("clamp must lie in (0, 0.5)")
    return np.clip(p, clamp, 1.0 - clamp)


def _weights_for(w, shape) -> np.ndarray:
    if w is None:
        return np.ones(shape)
    wa = np.asarray(w, dtype=np.float64)
    if wa.shape != tuple(shape):
        raise ValueError(f"dimension mismatch: weights {wa.shape} vs target {tuple(shape)}")
    return wa


def weighted_bce(
    p,
    y: BinaryMask,
    w=None,
    clamp: float = DEFAULT_CLAMP,
    normalize: bool = False,
) -> float:
    """Non-negative weighted BCE, ``-sum w*[y log p + (1-y) log(1-p)]``.

    ``w=None`` gives plain (unit-weight) BCE.
    """
    pa, ya = _pair(p, y)
    wa = _weights_for(w, ya.shape)
    return float(_wbce_value(pa, ya, wa, clamp, normalize))


def weighted_bce_grad(
    p,
    y: BinaryMask,
    w=None,
    clamp: float = DEFAULT_CLAMP,
    normalize: bool = False,
) -> np.ndarray:
    """``w*(p-y)/(p(1-p))`` where ``p`` is inside the clamp band, 0 where clipped."""
    pa, ya = _pair(p, y)
    wa = _weights_for(w, ya.shape)
    pc = _clipped(pa, clamp)
    active = (pa >= clamp) & (pa <= 1.0 - clamp)
    grad = np.where(active, wa * (pc - ya) / (pc * (1.0 - pc)), 0.0)
    if normalize:
        grad = grad / ya.size
    return grad


def instance_weights(inst: Instance, target: BinaryMask | None = None) -> np.ndarray:
    """Weights on ``target`` (default: the instance mask) from the instance's GT areas."""
    y = inst.mask if target is None else target
    return pixel_weights(y, inst.bbox.area(), inst.mask.area())


def balanced_mask_loss(
    p,
    inst: Instance,
    lam: float = DEFAULT_LAMBDA,
    eps: float = DEFAULT_EPSILON,
    clamp: float = DEFAULT_CLAMP,
    normalize: bool = False,
) -> LossBreakdown:
    """Dice plus ``lam`` times weighted BCE against ``inst.mask``."""
    y = inst.mask
    w = instance_weights(inst)
    dice = dice_loss(p, y, eps)
    wbce = weighted_bce(p, y, w, clamp, normalize)
    return LossBreakdown(dice=dice, wbce=wbce, total=dice + lam * wbce, lam=lam, epsilon=eps)


def balanced_mask_grad(
    p,
    inst: Instance,
    lam: float = DEFAULT_LAMBDA,
    eps: float = DEFAULT_EPSILON,
    clamp: float = DEFAULT_CLAMP,
    normalize: bool = False,
) -> np.ndarray:
    y = inst.mask
    w = instance_weights(inst)
    return dice_grad(p, y, eps) + lam * weighted_bce_grad(p, y, w, clamp, normalize)


def to_logit_grad(p, grad_p) -> np.ndarray:
    """Chain a probability-space gradient through the sigmoid: ``g * p(1-p)``."""
    pa = np.asarray(p, dtype=np.float64)
    return np.asarray(grad_p, dtype=np.float64) * pa * (1.0 - pa)


# --- finite-difference verification ---------------------------------------


@dataclass(frozen=True)
class DifferentiableLoss:
    """A scalar loss of a probability grid paired with its claimed gradient.

    ``value`` must accept a stack of grids shaped ``(..., H, W)`` and return
    one loss per grid, so the numeric oracle can evaluate many perturbations
    at once.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def central_difference(fn: Callable[[np.ndarray], np.ndarray], p, step: float, chunk: int = 256) -> np.ndarray:
    """Numeric gradient ``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every pixel ``i``."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    out = np.empty(n)
    flat = p.reshape(-1)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        plus = np.repeat(flat[None, :], idx.size, axis=0)
        minus = plus.copy()
        rows = np.arange(idx.size)
        plus[rows, idx] += step
        minus[rows, idx] -= step
        f_plus = np.asarray(fn(plus.reshape(-1, *p.shape)))
        f_minus = np.asarray(fn(minus.reshape(-1, *p.shape)))
        out[idx] = (f_plus - f_minus) / (2.0 * step)
    return out.reshape(p.shape)


def grad_check(loss: DifferentiableLoss, p, step: float = 1e-5) -> float:
    """Max over pixels of ``|analytic - numeric| / max(1e-12, |numeric|)``."""
    if not 0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    pa = np.asarray(p, dtype=np.float64)
    analytic = np.asarray(loss.grad(pa), dtype=np.float64)
    numeric = central_difference(loss.value, pa, step)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


def dice_handle(y: BinaryMask, eps: float = DEFAULT_EPSILON) -> DifferentiableLoss:
    t = _target(y)
    return DifferentiableLoss("dice", lambda p: _dice_value(p, t, eps), lambda p: dice_grad(p, y, eps))


def wbce_handle(inst: Instance, clamp: float = DEFAULT_CLAMP, normalize: bool = False) -> DifferentiableLoss:
    w = instance_weights(inst)
    t = _target(inst.mask)
    return DifferentiableLoss(
        "wbce",
        lambda p: _wbce_value(p, t, w, clamp, normalize),
        lambda p: weighted_bce_grad(p, inst.mask, w, clamp, normalize),
    )


def balanced_handle(
    inst: Instance,
    lam: float = DEFAULT_LAMBDA,
    eps: float = DEFAULT_EPSILON,
    clamp: float = DEFAULT_CLAMP,
    normalize: bool = False,
) -> DifferentiableLoss:
    w = instance_weights(inst)
    t = _target(inst.mask)
    return DifferentiableLoss(
        "balanced",
        lambda p: _dice_value(p, t, eps) + lam * _wbce_value(p, t, w, clamp, normalize),
        lambda p: balanced_mask_grad(p, inst, lam, eps, clamp, normalize),
    )
