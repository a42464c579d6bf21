"""Clamp-and-renormalize refinement, smooth-L1 stage losses and the weighted total.

The hard clamp keeps only hypotheses strictly inside the next stage's range.
The soft clamp replaces the indicator by a product of two sigmoids of width
``tau`` so the refined depth stays differentiable in the range bounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .nn import sigmoid
from .rem import DepthRangeMap

MIN_MASS = 1e-8


class EmptyMaskWarning(RuntimeWarning):
    pass


@dataclass
class LossWeights:
    alpha: tuple[float, float, float] = (0.5, 1.0, 2.0)
    beta: tuple[float, float] = (3.0, 0.0)

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.beta = tuple(float(b) for b in self.beta)
        if len(self.alpha) != 3 or len(self.beta) != 2:
            raise ValueError("need three alpha and two beta weights")
        if min(self.alpha + self.beta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RefinedDistribution:
    hyps: np.ndarray  # (D, H, W) clamped hypotheses (zeroed outside in hard mode)
    prob: np.ndarray  # (D, H, W) renormalized; zero on invalid pixels
    valid: np.ndarray  # (H, W) bool; False where the surviving mass vanished
    cache: dict = field(default=None, repr=False)


def clamp_refine(hyps, prob, rng: DepthRangeMap, mode: str = "hard", tau=None) -> RefinedDistribution:
    """Restrict a distribution to a depth range and renormalize it per pixel."""
    prob = np.asarray(prob, dtype=np.float64)
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim == 1:
        hyps = np.broadcast_to(hyps[:, None, None], prob.shape)
    if hyps.shape != prob.shape or rng.dmin.shape != prob.shape[1:]:
        raise ShapeMismatch("hypotheses, probabilities and range must share a pixel grid")
    lo, hi = rng.dmin[None], rng.dmax[None]
    if mode == "hard":
        weight = ((hyps > lo) & (hyps < hi)).astype(np.float64)
        cache = None
    elif mode == "soft":
        if tau is None:
            raise ValueError("soft clamp needs tau")
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), prob.shape[1:])[None]
        sa = sigmoid((hyps - lo) / tau)
        sb = sigmoid((hi - hyps) / tau)
        weight = sa * sb
        cache = {"sa": sa, "sb": sb, "tau": tau}
    else:
        raise ValueError(f"unknown clamp mode {mode!r}")
    kept = prob * weight
    mass = kept.sum(axis=0)
    valid = mass >= MIN_MASS
    safe = np.where(valid, mass, 1.0)
    p_ref = np.where(valid[None], kept / safe[None], 0.0)
    h_ref = hyps * weight if mode == "hard" else np.array(hyps)
    if cache is not None:
        cache.update(prob=prob, hyps=hyps, mass=safe, weight=weight)
    return RefinedDistribution(h_ref, p_ref, valid, cache)


def refined_depth(rd: RefinedDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Expected depth of the refined distribution and its validity mask."""
    depth = np.where(rd.valid, (rd.hyps * rd.prob).sum(axis=0), 0.0)
    return depth, rd.valid


def refined_depth_backward(grad: np.ndarray, rd: RefinedDistribution):
    """Soft-mode gradients of the refined depth w.r.t. ``(dmin, dmax, hyps)``."""
    c = rd.cache
    if c is None:
        raise ValueError("only the soft clamp is differentiable in the range bounds")
    g = np.where(rd.valid, grad, 0.0)[None]
    depth = (rd.hyps * rd.prob).sum(axis=0)[None]
    prob, hyps, mass, tau = c["prob"], c["hyps"], c["mass"][None], c["tau"]
    sa, sb = c["sa"], c["sb"]
    dw = g * prob * (hyps - depth) / mass
    da = sa * (1 - sa) / tau  # d sa / d(hyp - lo), scaled by 1/tau
    db = sb * (1 - sb) / tau
    d_lo = (dw * (-da * sb)).sum(axis=0)
    d_hi = (dw * (sa * db)).sum(axis=0)
    d_hyps = dw * (da * sb - sa * db) + g * c["weight"] * prob / mass
    return d_lo, d_hi, d_hyps


def refined_depth_prob_grad(grad: np.ndarray, rd: RefinedDistribution) -> np.ndarray:
    """Soft-mode gradient of the refined depth w.r.t. the unclamped probabilities."""
    c = rd.cache
    if c is None:
        raise ValueError("only the soft clamp keeps the terms needed here")
    g = np.where(rd.valid, grad, 0.0)[None]
    depth = (rd.hyps * rd.prob).sum(axis=0)[None]
    return g * c["weight"] * (c["hyps"] - depth) / c["mass"][None]


def smooth_l1(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean smooth-L1 over masked pixels; transition at one scene unit."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("smooth_l1 called with an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0
    r = np.abs(pred[mask] - gt[mask])
    return float(np.where(r < 1.0, 0.5 * r * r, r - 0.5).mean())


def smooth_l1_grad(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n = mask.sum()
    if n == 0:
        return np.zeros_like(pred)
    r = pred - gt
    return np.where(mask, np.clip(r, -1.0, 1.0), 0.0) / n


def total_loss(stage_losses, refined_losses, w: LossWeights) -> float:
    return float(
        sum(a * l for a, l in zip(w.alpha, stage_losses)) + sum(b * l for b, l in zip(w.beta, refined_losses))
    )
