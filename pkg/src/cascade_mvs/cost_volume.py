"""Plane-sweep cost volumes, the smoothing regularizer and soft argmin.

Volumes are ``(D, H, W)`` arrays; features are ``(C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveTemperature, NoSourceViews, ShapeMismatch
from .geometry import CameraParams, warp_coordinates, warp_coordinates_grad

TEMPERATURE_FRACTION = 0.05
_MIN_TEMPERATURE = 1e-12


@dataclass
class Sampling:
    """Bilinear taps of one warp; enough to replay or transpose it."""

    idx: np.ndarray  # (4, ...) flat source indices
    weights: np.ndarray  # (4, ...) tap weights, zero where invalid
    valid: np.ndarray  # (...) bool
    src_shape: tuple[int, int]


def bilinear_taps(coords: np.ndarray, src_shape: tuple[int, int]) -> Sampling:
    """Taps for sampling at ``coords (..., 2)``; in bounds iff ``0 <= x <= W-1`` (same for y)."""
    h, w = src_shape
    x = coords[..., 0]
    y = coords[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.minimum(np.floor(xs), w - 1).astype(np.int64)
    y0 = np.minimum(np.floor(ys), h - 1).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    wts *= valid
    return Sampling(idx, wts, valid, (h, w))


def gather(feat: np.ndarray, s: Sampling) -> np.ndarray:
    """Apply taps to a ``(C, H, W)`` map; result ``(C, ...)``."""
    flat = feat.reshape(feat.shape[0], -1)
    out = flat[:, s.idx[0]] * s.weights[0]
    for k in range(1, 4):
        out += flat[:, s.idx[k]] * s.weights[k]
    return out


def scatter(grad: np.ndarray, s: Sampling, channels: int) -> np.ndarray:
    """Adjoint of :func:`gather`."""
    h, w = s.src_shape
    out = np.zeros((channels, h * w))
    for k in range(4):
        contrib = (grad * s.weights[k]).reshape(channels, -1)
        idx = s.idx[k].ravel()
        for c in range(channels):
            out[c] += np.bincount(idx, weights=contrib[c], minlength=h * w)
    return out.reshape(channels, h, w)


def warp_feature(src: np.ndarray, H: np.ndarray, out_shape: tuple[int, int] | None = None):
    """Sample ``src`` at ``H @ x`` for every output pixel; returns ``(warped, mask)``."""
    h, w = out_shape or src.shape[1:]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    p = np.stack([u, v, np.ones_like(u)], axis=-1) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        coords = p[..., :2] / p[..., 2:3]
    coords[p[..., 2] <= 0] = np.nan
    s = bilinear_taps(coords, src.shape[1:])
    return gather(src, s), s.valid.astype(np.float64)


@dataclass
class CostVolume:
    cost: np.ndarray  # (D, H, W), >= 0
    mask: np.ndarray  # (D, H, W), in-bounds fraction of source views
    cache: dict = field(default=None, repr=False)


def _broadcast_hyps(hyps: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim == 1:
        return np.broadcast_to(hyps[:, None, None], (hyps.size,) + shape)
    if hyps.shape[1:] != shape:
        raise ShapeMismatch(f"hypotheses {hyps.shape[1:]} vs features {shape}")
    return hyps


def build_cost_volume(ref_feat, src_feats, ref_cam: CameraParams, src_cams, hyps) -> CostVolume:
    """Variance cost over the reference and in-bounds warped source features.

    ``hyps`` is either shared ``(D,)`` or per-pixel ``(D, H, W)``.
    """
    if len(src_feats) == 0:
        raise NoSourceViews("need at least one source view")
    if len(src_feats) != len(src_cams):
        raise ShapeMismatch("one camera per source feature map")
    for f in src_feats:
        if f.shape[0] != ref_feat.shape[0]:
            raise ShapeMismatch("feature channel counts differ")
    _, h, w = ref_feat.shape
    depth = _broadcast_hyps(hyps, (h, w))
    samplings, warped = [], []
    for feat, cam in zip(src_feats, src_cams):
        s = bilinear_taps(warp_coordinates(ref_cam, cam, depth), feat.shape[1:])
        samplings.append(s)
        warped.append(gather(feat, s))
    ref = np.broadcast_to(ref_feat[:, None], warped[0].shape)
    valid = [s.valid.astype(np.float64) for s in samplings]
    count = 1.0 + sum(valid)
    mean = (ref + sum(v * m for v, m in zip(warped, valid))) / count
    sq = (ref - mean) ** 2
    for v, m in zip(warped, valid):
        sq = sq + m * (v - mean) ** 2
    cost = (sq / count).mean(axis=0)
    mask = sum(valid) / len(src_feats)
    cache = {"samplings": samplings, "warped": warped, "mean": mean, "count": count, "ref": ref_feat,
             "srcs": list(src_feats), "cams": (ref_cam, list(src_cams)), "depth": depth}
    return CostVolume(cost, mask, cache)


def cost_volume_backward(dcost: np.ndarray, cv: CostVolume):
    """Gradients of the cost w.r.t. the reference and source feature maps."""
    cache = cv.cache
    ref, mean, count = cache["ref"], cache["mean"], cache["count"]
    c = ref.shape[0]
    g = (2.0 / c) * dcost / count  # d(cost)/d(V) = g * (V - mean)
    # the mean's own derivative cancels since sum of (V - mean) is zero
    dref = (g * (ref[:, None] - mean)).sum(axis=1)
    dsrcs = []
    for s, v in zip(cache["samplings"], cache["warped"]):
        dv = g * (v - mean) * s.valid
        dsrcs.append(scatter(dv, s, c))
    return dref, dsrcs


def tap_gradients(feat: np.ndarray, s: Sampling) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the bilinear sample w.r.t. the sampling coordinates, each ``(C, ...)``.

    Zero where the sample is out of bounds.
    """
    flat = feat.reshape(feat.shape[0], -1)
    f00, f01, f10, f11 = (flat[:, s.idx[k]] for k in range(4))
    fx = s.weights[1] + s.weights[3]  # recovers the fractional offsets on valid taps
    fy = s.weights[2] + s.weights[3]
    dx = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
    dy = (1 - fx) * (f10 - f00) + fx * (f11 - f01)
    return dx * s.valid, dy * s.valid


def cost_volume_depth_grad(dcost: np.ndarray, cv: CostVolume) -> np.ndarray:
    """Gradient of the cost w.r.t. per-pixel hypothesis depths, shape ``(D, H, W)``.

    Flows through the warped sample positions; the in-bounds mask is piecewise
    constant and contributes nothing.
    """
    cache = cv.cache
    mean, count = cache["mean"], cache["count"]
    ref_cam, src_cams = cache["cams"]
    c = mean.shape[0]
    g = (2.0 / c) * dcost / count
    out = np.zeros(dcost.shape)
    for s, v, feat, cam in zip(cache["samplings"], cache["warped"], cache["srcs"], src_cams):
        dv = g * (v - mean) * s.valid  # (C, D, H, W)
        gx, gy = tap_gradients(feat, s)
        jac = warp_coordinates_grad(ref_cam, cam, cache["depth"])
        out += (dv * gx).sum(axis=0) * jac[..., 0] + (dv * gy).sum(axis=0) * jac[..., 1]
    return out


def _box1d(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    if r == 0:
        return x
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x)
    for k in range(2 * r + 1):
        out += np.take(xp, np.arange(k, k + n), axis=axis)
    return out


def _box1d_adjoint(g: np.ndarray, r: int, axis: int) -> np.ndarray:
    if r == 0:
        return g
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    gp = np.zeros((n + 2 * r,) + g.shape[1:])
    for k in range(2 * r + 1):
        gp[k : k + n] += g
    gp[r] += gp[:r].sum(axis=0)
    gp[r + n - 1] += gp[r + n :].sum(axis=0)
    return np.moveaxis(gp[r : r + n], 0, axis)


def box3d(x: np.ndarray, rs: int, rd: int) -> np.ndarray:
    """Replicate-padded window sum over ``(2rd+1) x (2rs+1)^2`` on a ``(D, H, W)`` volume."""
    return _box1d(_box1d(_box1d(x, rd, 0), rs, 1), rs, 2)


def box3d_adjoint(g: np.ndarray, rs: int, rd: int) -> np.ndarray:
    return _box1d_adjoint(_box1d_adjoint(_box1d_adjoint(g, rs, 2), rs, 1), rd, 0)


@dataclass
class ProbabilityVolume:
    prob: np.ndarray  # (D, H, W), sums to one along axis 0
    valid: np.ndarray  # (H, W) bool; False where every source view was out of bounds
    temperature: float
    cache: dict = field(default=None, repr=False)


def auto_temperature(cv: CostVolume) -> float:
    sel = cv.mask > 0
    if not sel.any():
        return 1.0
    return max(TEMPERATURE_FRACTION * float(cv.cost[sel].mean()), _MIN_TEMPERATURE)


def regularize(cv: CostVolume, spatial_radius: int = 1, depth_radius: int = 1, temperature=None) -> ProbabilityVolume:
    """Mask-weighted box smoothing followed by a tempered softmax over planes.

    ``temperature=None`` selects ``0.05 * mean cost`` of the volume. Entries
    whose smoothing window holds no in-bounds sample take the largest smoothed
    cost of their pixel; pixels never seen by any source view become uniform
    and are flagged invalid.
    """
    auto = temperature is None
    if auto:
        temperature = auto_temperature(cv)
    elif not temperature > 0:
        raise NonPositiveTemperature(f"temperature {temperature} must be positive")
    w = cv.mask
    den = box3d(w, spatial_radius, depth_radius)
    num = box3d(w * cv.cost, spatial_radius, depth_radius)
    has = den > 0
    smooth = np.where(has, num / np.where(has, den, 1.0), -np.inf)
    arg = np.argmax(smooth, axis=0)
    fill = np.take_along_axis(smooth, arg[None], axis=0)[0]
    valid = (w > 0).any(axis=0)
    smooth = np.where(has, smooth, np.where(valid, fill, 0.0)[None])
    smooth[:, ~valid] = 0.0
    logits = -smooth / temperature
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    prob = e / e.sum(axis=0, keepdims=True)
    prob[:, ~valid] = 1.0 / prob.shape[0]
    floored = temperature <= _MIN_TEMPERATURE
    cache = dict(
        smooth=smooth, den=den, has=has, arg=arg, w=w, rs=spatial_radius, rd=depth_radius, auto=auto and not floored
    )
    return ProbabilityVolume(prob, valid, float(temperature), cache)


def regularize_backward(dprob: np.ndarray, pv: ProbabilityVolume, cv: CostVolume) -> np.ndarray:
    """Gradient w.r.t. ``cv.cost`` (includes the auto temperature's dependence)."""
    cache = pv.cache
    p, t = pv.prob, pv.temperature
    dlogit = p * (dprob - (p * dprob).sum(axis=0, keepdims=True))
    dlogit[:, ~pv.valid] = 0.0
    smooth = cache["smooth"]
    ds = -dlogit / t
    dt = float((dlogit * smooth).sum()) / t**2
    has = cache["has"]
    keep = has & pv.valid[None]
    filled = ~has & pv.valid[None]
    if filled.any():
        extra = np.where(filled, ds, 0.0).sum(axis=0)
        ds = np.where(keep, ds, 0.0)
        np.put_along_axis(ds, cache["arg"][None], np.take_along_axis(ds, cache["arg"][None], axis=0) + extra[None], axis=0)
    else:
        ds = np.where(keep, ds, 0.0)
    dnum = np.where(has, ds / np.where(has, cache["den"], 1.0), 0.0)
    dcost = cache["w"] * box3d_adjoint(dnum, cache["rs"], cache["rd"])
    if cache["auto"]:
        sel = cv.mask > 0
        dcost[sel] += dt * TEMPERATURE_FRACTION / sel.sum()
    return dcost


def soft_argmin(prob: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    """Expected depth ``sum_j L_j P_j`` per pixel."""
    prob = np.asarray(prob)
    hyps = np.asarray(hyps, dtype=np.float64)
    if hyps.ndim == 1:
        if hyps.shape[0] != prob.shape[0]:
            raise ShapeMismatch("plane counts differ")
        return np.clip(np.tensordot(hyps, prob, axes=(0, 0)), hyps.min(), hyps.max())
    if hyps.shape != prob.shape:
        raise ShapeMismatch(f"hypotheses {hyps.shape} vs probabilities {prob.shape}")
    # clip guards the bound against rounding in the weighted sum
    return np.clip((hyps * prob).sum(axis=0), hyps.min(axis=0), hyps.max(axis=0))
