"""Range estimation network and the per-pixel dynamic depth range.

The network maps a probability volume ``(B, D, H, W)`` to an uncertainty map
``(B, H, W)`` in (0, 1) through five 3x3 convolutions; the first four are
followed by batch norm and a rectifier, the last by a sigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    ChannelMismatch,
    IoError,
    NonPositiveLambda,
    ShapeMismatch,
    StaleCache,
)
from .resample import upsample_bilinear

CHANNELS = (16, 32, 32, 16, 1)
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_VERSION = 1
_OUT_CLIP = 1e-12


class RemWeights:
    """Parameters and batch-norm running statistics of one network."""

    def __init__(self, d_in: int, params: dict[str, np.ndarray]):
        self.d_in = d_in
        self.params = params

    @classmethod
    def init(cls, d_in: int, seed: int = 0, init_uncertainty: float = 0.5) -> RemWeights:
        """He-initialized convolutions; the output bias starts the map near ``init_uncertainty``."""
        rng = np.random.default_rng(seed)
        params = {}
        cin = d_in
        for i, cout in enumerate(CHANNELS):
            std = np.sqrt(2.0 / (cin * 9)) if i < 4 else 0.1 / np.sqrt(cin * 9)
            params[f"conv{i}.weight"] = rng.normal(0.0, std, (cout, cin, 3, 3))
            params[f"conv{i}.bias"] = np.zeros(cout)
            cin = cout
        params["conv4.bias"][:] = np.log(init_uncertainty / (1.0 - init_uncertainty))
        for i, c in enumerate(CHANNELS[:4]):
            params[f"bn{i}.gamma"] = np.ones(c)
            params[f"bn{i}.beta"] = np.zeros(c)
            params[f"bn{i}.running_mean"] = np.zeros(c)
            params[f"bn{i}.running_var"] = np.ones(c)
        return cls(d_in, params)

    @classmethod
    def zeros(cls, d_in: int) -> RemWeights:
        w = cls.init(d_in)
        for k, v in w.params.items():
            if k.endswith(("weight", "bias", "beta", "running_mean")):
                v[:] = 0.0
        return w

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if "running" not in k}

    def copy(self) -> RemWeights:
        return RemWeights(self.d_in, {k: v.copy() for k, v in self.params.items()})


@dataclass
class RemCache:
    x_shape: tuple
    layers: list  # per layer: (input shape, cols, bn cache or None, pre-activation)
    out: np.ndarray
    mode: str


def rem_forward(prob: np.ndarray, w: RemWeights, mode: str = "eval", update_stats: bool = True):
    """Run the network; returns ``(uncertainty (B, H, W), cache)``.

    In ``train`` mode batch statistics are used and, unless ``update_stats`` is
    False, the running statistics are blended in with momentum 0.9.
    """
    x = prob[None] if prob.ndim == 3 else prob
    if x.shape[1] != w.d_in:
        raise ChannelMismatch(f"volume has {x.shape[1]} planes, network expects {w.d_in}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    p = w.params
    layers = []
    h = x
    for i in range(5):
        z, cols = nn.conv3x3(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        bn = None
        if i < 4:
            g, b = p[f"bn{i}.gamma"], p[f"bn{i}.beta"]
            if mode == "train":
                y, bn = nn.batchnorm_train(z, g, b, BN_EPS)
                if update_stats:
                    rm, rv = p[f"bn{i}.running_mean"], p[f"bn{i}.running_var"]
                    rm *= BN_MOMENTUM
                    rm += (1 - BN_MOMENTUM) * bn[2]
                    rv *= BN_MOMENTUM
                    rv += (1 - BN_MOMENTUM) * bn[3]
            else:
                y, _ = nn.batchnorm_eval(z, g, b, p[f"bn{i}.running_mean"], p[f"bn{i}.running_var"], BN_EPS)
            layers.append((h.shape, cols, bn, y))
            h = np.maximum(y, 0.0)
        else:
            layers.append((h.shape, cols, None, z))
            h = nn.sigmoid(z)
    out = np.clip(h[:, 0], _OUT_CLIP, 1.0 - _OUT_CLIP)
    return out, RemCache(x.shape, layers, out, mode)


def rem_backward(grad_out: np.ndarray, cache: RemCache, w: RemWeights):
    """Analytic gradients; returns ``(param grads, input grad (B, D, H, W))``."""
    g = grad_out[None] if grad_out.ndim == 2 else grad_out
    if g.shape != cache.out.shape:
        raise StaleCache(f"gradient {g.shape} does not match cached output {cache.out.shape}")
    if cache.mode != "train":
        raise StaleCache("backward needs a train-mode forward")
    p = w.params
    grads = {}
    out = cache.out
    inside = (out > _OUT_CLIP) & (out < 1.0 - _OUT_CLIP)
    dz = (g * out * (1.0 - out) * inside)[:, None]
    for i in range(4, -1, -1):
        x_shape, cols, bn, pre = cache.layers[i]
        if i < 4:
            dy = dz * (pre > 0)
            xhat, inv_std = bn[0], bn[1]
            dz, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = nn.batchnorm_train_backward(
                dy, p[f"bn{i}.gamma"], xhat, inv_std
            )
        dx, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = nn.conv3x3_backward(
            dz, cols, p[f"conv{i}.weight"], x_shape
        )
        dz = dx
    return grads, dz


@dataclass
class DepthRangeMap:
    dmin: np.ndarray
    dmax: np.ndarray

    @property
    def length(self) -> np.ndarray:
        return self.dmax - self.dmin

    def upsample(self) -> DepthRangeMap:
        return DepthRangeMap(upsample_bilinear(self.dmin), upsample_bilinear(self.dmax))


@dataclass
class RangeCache:
    lam: float
    unc: np.ndarray
    prev_len: np.ndarray
    lo_free: np.ndarray  # lower bound not clipped
    hi_free: np.ndarray
    snapped: np.ndarray


def dynamic_range(depth, unc, lam: float, prev_range_len, scene_range, snap_width: float | None = None, return_cache=False):
    """Interval ``depth +/- lam * unc * prev_range_len`` clipped to the scene range.

    Intervals emptied by clipping snap to a width-``snap_width`` interval at the
    nearest in-range point (default: 1e-3 of the scene range).
    """
    if not lam > 0:
        raise NonPositiveLambda(f"lambda {lam} must be positive")
    depth = np.asarray(depth, dtype=np.float64)
    unc = np.asarray(unc, dtype=np.float64)
    prev_len = np.broadcast_to(np.asarray(prev_range_len, dtype=np.float64), depth.shape)
    if unc.shape != depth.shape:
        raise ShapeMismatch(f"uncertainty {unc.shape} vs depth {depth.shape}")
    lo, hi = float(scene_range[0]), float(scene_range[1])
    half = lam * unc * prev_len
    raw_lo = depth - half
    raw_hi = depth + half
    dmin = np.maximum(raw_lo, lo)
    dmax = np.minimum(raw_hi, hi)
    snapped = dmin > dmax
    if snapped.any():
        width = (hi - lo) * 1e-3 if snap_width is None else snap_width
        width = min(width, hi - lo)
        c = np.clip(depth[snapped], lo + width / 2, hi - width / 2)
        dmin[snapped] = c - width / 2
        dmax[snapped] = c + width / 2
    rng = DepthRangeMap(dmin, dmax)
    if not return_cache:
        return rng
    cache = RangeCache(lam, unc, prev_len, (raw_lo > lo) & ~snapped, (raw_hi < hi) & ~snapped, snapped)
    return rng, cache


def dynamic_range_backward(g_min: np.ndarray, g_max: np.ndarray, cache: RangeCache):
    """Gradients w.r.t. ``(depth, unc, prev_range_len)``."""
    a = g_min * cache.lo_free
    b = g_max * cache.hi_free
    g_depth = a + b
    g_half = b - a
    g_unc = g_half * cache.lam * cache.prev_len
    g_prev = g_half * cache.lam * cache.unc
    return g_depth, g_unc, g_prev


_LAYOUT = [(f"conv{i}.weight", f"conv{i}.bias") for i in range(5)]


def _record_keys():
    keys = [k for pair in _LAYOUT for k in pair]
    for i in range(4):
        keys += [f"bn{i}.gamma", f"bn{i}.beta", f"bn{i}.running_mean", f"bn{i}.running_var"]
    return keys


def write_checkpoint(path, nets: list[RemWeights]) -> None:
    """Write one "REMW" record per network, back to back."""
    chunks = []
    for w in nets:
        chunks.append(b"REMW" + struct.pack("<II", CHECKPOINT_VERSION, w.d_in))
        for k in _record_keys():
            chunks.append(np.ascontiguousarray(w.params[k], dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_checkpoint(path) -> list[RemWeights]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    nets = []
    pos = 0
    while pos < len(raw):
        if raw[pos : pos + 4] != b"REMW":
            raise IoError(f"{path}: bad record magic at byte {pos}")
        version, d_in = struct.unpack("<II", raw[pos + 4 : pos + 12])
        if version != CHECKPOINT_VERSION:
            raise IoError(f"{path}: unsupported checkpoint version {version}")
        pos += 12
        template = RemWeights.init(d_in)
        params = {}
        for k in _record_keys():
            shape = template.params[k].shape
            n = int(np.prod(shape))
            if pos + 4 * n > len(raw):
                raise IoError(f"{path}: truncated record")
            params[k] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * n
        nets.append(RemWeights(d_in, params))
    return nets
