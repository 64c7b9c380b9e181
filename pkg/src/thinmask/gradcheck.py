"""Randomized finite-difference verification of the mask losses."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import BBox, BinaryMask, Instance
from .loss import (
    DEFAULT_CLAMP,
    DEFAULT_EPSILON,
    DEFAULT_LAMBDA,
    DifferentiableLoss,
    balanced_handle,
    dice_handle,
    grad_check,
    wbce_handle,
)
from .parallel import pmap
from .synth import raster_rectangle, rotate_mask

LOSS_NAMES = ("dice", "wbce", "balanced")


@dataclass(frozen=True)
class GradCheckRow:
    loss: str
    trials: int
    max_rel_err: float
    passed: bool


def random_trial(rng: np.random.Generator, size: int = 28) -> tuple[np.ndarray, Instance]:
    """A random probability grid and a target instance on a ``size x size`` grid.

    Targets are, with equal odds, thin rotated bars (tight box) or Bernoulli
    speckle masks whose box is the whole grid.
    """
    if rng.random() < 0.5:
        length = int(rng.integers(size // 3, size - 4))
        thickness = int(rng.integers(1, 4))
        mask = rotate_mask(raster_rectangle(length, thickness, size), float(rng.uniform(0, 180)))
        inst = Instance.from_mask(int(rng.integers(0, 10)), mask)
    else:
        density = float(rng.uniform(0.05, 0.6))
        bits = rng.random((size, size)) < density
        bits[int(rng.integers(0, size)), int(rng.integers(0, size))] = True
        inst = Instance(int(rng.integers(0, 10)), BBox(0.0, 0.0, float(size), float(size)), BinaryMask(bits))
    p = rng.uniform(0.02, 0.98, size=(size, size))
    return p, inst


def _handles(inst: Instance, lam: float, eps: float, clamp: float) -> list[DifferentiableLoss]:
    return [dice_handle(inst.mask, eps), wbce_handle(inst, clamp), balanced_handle(inst, lam, eps, clamp)]


def _corrupted(h: DifferentiableLoss) -> DifferentiableLoss:
    return replace(h, grad=lambda p, g=h.grad: g(p) * (1.0 + 1e-3))


def run_gradcheck(
    trials: int = 100,
    seed: int = 0,
    size: int = 28,
    step: float = 1e-5,
    tol: float = 1e-4,
    lam: float = DEFAULT_LAMBDA,
    eps: float = DEFAULT_EPSILON,
    clamp: float = DEFAULT_CLAMP,
    threads: int = 1,
    corrupt: bool = False,
) -> list[GradCheckRow]:
    """Max relative gradient error per loss over ``trials`` random instances.

    ``corrupt`` scales every analytic gradient by ``1 + 1e-3``; it exists so
    tests can confirm the check actually fails on a wrong gradient.
    """
    if trials < 0:
        raise ValueError("trials must be >= 0")

    def one(i: int) -> list[float]:
        p, inst = random_trial(np.random.default_rng([seed, 3, i]), size)
        handles = _handles(inst, lam, eps, clamp)
        if corrupt:
            handles = [_corrupted(h) for h in handles]
        return [grad_check(h, p, step) for h in handles]

    errs = pmap(one, range(trials), threads)
    rows = []
    for k, name in enumerate(LOSS_NAMES):
        worst = max((e[k] for e in errs), default=0.0)
        rows.append(GradCheckRow(name, trials, worst, worst <= tol))
    return rows
