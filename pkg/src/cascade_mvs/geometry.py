"""Pinhole cameras, projection and plane-sweep homographies.

Extrinsics are world-to-camera: ``x_cam = R @ x_world + t`` so the camera
center is ``-R.T @ t``. Homographies map reference pixels to source pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BehindCamera, EmptyRange, IoError, NonPositiveDepth, ZeroCount

_Z_EPS = 1e-12


@dataclass(frozen=True)
class CameraParams:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64).reshape(3, 3)
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation")
        if np.abs(np.tril(K, -1)).max() > 0 or np.any(np.diag(K) <= 0):
            raise ValueError("K must be upper-triangular with positive diagonal")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def n(self) -> np.ndarray:
        """Principal axis in world coordinates (third row of R)."""
        return self.R[2].copy()

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def scaled(self, ratio: float) -> CameraParams:
        """Camera for an image resampled by ``ratio`` (rows 1-2 of K scaled)."""
        K = self.K.copy()
        K[:2] *= ratio
        return CameraParams(K, self.R, self.t)


def look_at(center, target, K) -> CameraParams:
    """Camera at ``center`` whose principal axis points at ``target`` (image y down)."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraParams(K, R, -R @ center)


def intrinsics(f: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])


def project(cam: CameraParams, point) -> tuple[np.ndarray, float]:
    """Project one world point; returns ``(pixel, depth)``."""
    pc = cam.R @ np.asarray(point, dtype=np.float64) + cam.t
    if pc[2] <= _Z_EPS:
        raise BehindCamera(f"camera-frame z = {pc[2]:.3g}")
    h = cam.K @ pc
    return h[:2] / h[2], float(pc[2])


def project_points(cam: CameraParams, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of ``(..., 3)`` world points.

    Points behind the camera are not rejected; their pixel is NaN.
    """
    pc = points @ cam.R.T + cam.t
    z = pc[..., 2]
    h = pc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / h[..., 2:3]
    uv[z <= _Z_EPS] = np.nan
    return uv, z


def backproject(cam: CameraParams, pixels: np.ndarray, depth) -> np.ndarray:
    """World points at camera-frame ``depth`` along the rays of ``pixels`` ``(..., 2)``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    ph = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    rays = ph @ cam.K_inv.T  # z component is exactly 1
    pc = rays * depth[..., None]
    return (pc - cam.t) @ cam.R


def _normalize(H: np.ndarray) -> np.ndarray:
    if abs(H[2, 2]) < 1e-300:
        raise ValueError("homography has zero bottom-right entry")
    return H / H[2, 2]


def _sweep_terms(ref: CameraParams, src: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, b)`` with ``H(d) ~ A + outer(b, e3) / d``."""
    # the translation appearing in the sweep formula is R^T t = -C, not t itself
    tau_ref = ref.R.T @ ref.t
    tau_src = src.R.T @ src.t
    KR = src.K @ src.R
    A = KR @ ref.R.T @ ref.K_inv
    b = -KR @ (tau_ref - tau_src)
    return A, b


def homography_first_stage(ref: CameraParams, src: CameraParams, d: float) -> np.ndarray:
    """Plane-induced homography at fronto-parallel depth ``d`` of the reference."""
    if not d > 0:
        raise NonPositiveDepth(f"depth {d} must be positive")
    tau_ref = ref.R.T @ ref.t
    tau_src = src.R.T @ src.t
    M = np.eye(3) - np.outer(tau_ref - tau_src, ref.n) / d
    return _normalize(src.K @ src.R @ M @ ref.R.T @ ref.K_inv)


def homography_residual(ref: CameraParams, src: CameraParams, d_prev: float, delta: float) -> np.ndarray:
    """Homography for a residual hypothesis ``delta`` around a previous depth."""
    return homography_first_stage(ref, src, d_prev + delta)


def apply_homography(H: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    ph = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1) @ H.T
    return ph[..., :2] / ph[..., 2:3]


def warp_coordinates(ref: CameraParams, src: CameraParams, depth: np.ndarray) -> np.ndarray:
    """Source-pixel coordinates for every reference pixel at per-pixel depths.

    ``depth`` has shape ``(..., H, W)``; the result has shape ``(..., H, W, 2)``.
    Entries whose point falls behind the source camera are NaN.
    """
    h, w = depth.shape[-2:]
    A, b = _sweep_terms(ref, src)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    base = A @ np.stack([u.ravel(), v.ravel(), np.ones(h * w)])  # (3, HW)
    base = base.reshape(3, h, w)
    inv_d = 1.0 / depth
    x = base[0] + b[0] * inv_d
    y = base[1] + b[1] * inv_d
    z = base[2] + b[2] * inv_d
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.stack([x / z, y / z], axis=-1)
    out[z <= _Z_EPS] = np.nan
    return out


def warp_coordinates_grad(ref: CameraParams, src: CameraParams, depth: np.ndarray) -> np.ndarray:
    """Derivative of :func:`warp_coordinates` w.r.t. the per-pixel depth, shape ``(..., H, W, 2)``."""
    h, w = depth.shape[-2:]
    A, b = _sweep_terms(ref, src)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    base = (A @ np.stack([u.ravel(), v.ravel(), np.ones(h * w)])).reshape(3, h, w)
    inv_d = 1.0 / depth
    x = base[0] + b[0] * inv_d
    y = base[1] + b[1] * inv_d
    z = base[2] + b[2] * inv_d
    # d(x/z)/dd with dx/dd = -b0/d^2 and dz/dd = -b2/d^2
    with np.errstate(divide="ignore", invalid="ignore"):
        k = inv_d * inv_d / z
        du = k * (x / z * b[2] - b[0])
        dv = k * (y / z * b[2] - b[1])
    out = np.stack([du, dv], axis=-1)
    out[z <= _Z_EPS] = 0.0
    return out


def sample_depth_planes(low: float, high: float, count: int) -> np.ndarray:
    """``count`` evenly spaced depths over ``[low, high]`` with inclusive ends."""
    if count < 1:
        raise ZeroCount("plane count must be >= 1")
    if high < low:
        raise EmptyRange(f"[{low}, {high}] is empty")
    if count == 1:
        return np.array([0.5 * (low + high)])
    if high == low:
        raise EmptyRange("degenerate range needs count == 1")
    return low + (high - low) * np.arange(count) / (count - 1)


def sample_depth_planes_map(dmin: np.ndarray, dmax: np.ndarray, count: int) -> np.ndarray:
    """Per-pixel version of :func:`sample_depth_planes`; returns ``(count, H, W)``.

    Zero-length intervals are allowed here and yield repeated depths.
    """
    if count < 1:
        raise ZeroCount("plane count must be >= 1")
    if count == 1:
        return (0.5 * (dmin + dmax))[None]
    frac = (np.arange(count) / (count - 1))[:, None, None]
    return dmin[None] + (dmax - dmin)[None] * frac


def read_camera_file(path) -> tuple[CameraParams, float, float]:
    """Parse a camera text file; returns ``(camera, depth_min, depth_range_length)``."""
    try:
        tokens = Path(path).read_text().split()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        i = tokens.index("extrinsic")
        E = np.array([float(x) for x in tokens[i + 1 : i + 17]]).reshape(4, 4)
        j = tokens.index("intrinsic")
        K = np.array([float(x) for x in tokens[j + 1 : j + 10]]).reshape(3, 3)
        dmin, dlen = (float(x) for x in tokens[j + 10 : j + 12])
    except (ValueError, IndexError) as exc:
        raise IoError(f"{path}: malformed camera file ({exc})") from exc
    return CameraParams(K, E[:3, :3], E[:3, 3]), dmin, dlen


def write_camera_file(path, cam: CameraParams, depth_min: float, depth_range_length: float) -> None:
    E = np.eye(4)
    E[:3, :3] = cam.R
    E[:3, 3] = cam.t
    fmt = lambda row: " ".join(repr(float(x)) for x in row)
    lines = ["extrinsic", *(fmt(r) for r in E), "intrinsic", *(fmt(r) for r in cam.K)]
    lines.append(f"{float(depth_min)!r} {float(depth_range_length)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
