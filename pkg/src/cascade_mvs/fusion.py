"""Multi-view depth fusion with forward-backward geometric consistency, and PLY output."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, TooFewViews
from .geometry import CameraParams, backproject, project_points


@dataclass
class FusionParams:
    reproj_tol_px: float = 0.75
    rel_depth_tol: float = 0.01
    min_consistent_views: int = 2


@dataclass
class PointCloud:
    xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rgb: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.uint8))

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
        if len(self.xyz) != len(self.rgb):
            raise ValueError("one color per point")
        if not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)


def sample_depth(depth: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup at ``uv (N, 2)``, interpolating inverse depth.

    Inverse depth is affine in the pixel coordinates on a plane, so planar
    surfaces are reproduced exactly. A lookup is valid when all four taps are
    in bounds and hold positive depth.
    """
    h, w = depth.shape
    u, v = uv[:, 0], uv[:, 1]
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    u = np.where(ok, u, 0.0)
    v = np.where(ok, v, 0.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = u - x0, v - y0
    taps = [depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]]
    for t in taps:
        ok &= t > 0
    with np.errstate(divide="ignore"):
        inv = [np.where(t > 0, 1.0 / np.where(t > 0, t, 1.0), 0.0) for t in taps]
    s = (1 - fy) * ((1 - fx) * inv[0] + fx * inv[1]) + fy * ((1 - fx) * inv[2] + fx * inv[3])
    return np.where(ok, 1.0 / np.where(ok, s, 1.0), 0.0), ok


def _fuse_view(r: int, depth_maps, cams: list[CameraParams], images, params: FusionParams):
    depth = depth_maps[r]
    ys, xs = np.nonzero(depth > 0)
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    pts = backproject(cams[r], pix, depth[ys, xs])
    acc = pts.copy()
    count = np.zeros(len(pix), dtype=np.int64)
    for i, cam in enumerate(cams):
        if i == r:
            continue
        uv, z_proj = project_points(cam, pts)
        d_i, ok = sample_depth(depth_maps[i], uv)
        ok &= z_proj > 0
        back = backproject(cam, np.where(ok[:, None], uv, 0.0), d_i)
        uv_r, _ = project_points(cams[r], back)
        err = np.linalg.norm(uv_r - pix, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            good = ok & (err < params.reproj_tol_px) & (np.abs(d_i - z_proj) / z_proj < params.rel_depth_tol)
        count += good
        acc += np.where(good[:, None], back, 0.0)
    keep = count >= params.min_consistent_views
    xyz = acc[keep] / (1.0 + count[keep])[:, None]
    img = np.asarray(images[r], dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    rgb = np.clip(np.round(img[ys[keep], xs[keep]] * 255.0), 0, 255).astype(np.uint8)
    return xyz, rgb


def fuse(depth_maps, cams, images, params: FusionParams | None = None, threads: int = 1) -> PointCloud:
    """Fuse per-view depth maps into one cloud.

    A reference pixel is consistent with another view when its back-projected
    point, re-projected through that view's depth, lands within
    ``reproj_tol_px`` of the pixel and the depths agree to ``rel_depth_tol``.
    Kept points average the reference point and every consistent view's
    back-projection. Output order is view index, then row-major pixel order.
    """
    params = params or FusionParams()
    if len(depth_maps) < 2 or len(cams) != len(depth_maps) or len(images) != len(depth_maps):
        raise TooFewViews("fusion needs >= 2 views with matching cameras and images")
    views = range(len(depth_maps))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda r: _fuse_view(r, depth_maps, cams, images, params), views))
    else:
        parts = [_fuse_view(r, depth_maps, cams, images, params) for r in views]
    return PointCloud(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(pc: PointCloud, path, fmt: str = "binary_le") -> None:
    """PLY with float32 ``x y z`` and uchar ``red green blue`` per vertex."""
    if fmt not in ("ascii", "binary_le"):
        raise ValueError(f"unknown PLY format {fmt!r}")
    header = (
        "ply\n"
        f"format {'ascii' if fmt == 'ascii' else 'binary_little_endian'} 1.0\n"
        f"element vertex {len(pc)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    rec = np.empty(len(pc), dtype=_PLY_DTYPE)
    xyz = pc.xyz.astype(np.float32)
    for k, name in enumerate("xyz"):
        rec[name] = xyz[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        rec[name] = pc.rgb[:, k]
    if fmt == "binary_le":
        body = rec.tobytes()
    else:
        body = "".join(
            f"{float(a)!r} {float(b)!r} {float(c)!r} {r} {g} {bl}\n"
            for a, b, c, r, g, bl in zip(xyz[:, 0], xyz[:, 1], xyz[:, 2], *pc.rgb.T)
        ).encode("ascii")
    try:
        Path(path).write_bytes(header + body)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_ply(path) -> PointCloud:
    """Reader for the vertex layout produced by ``write_ply``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise IoError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    fmt = next(l.split()[1] for l in lines if l.startswith("format"))
    n = int(next(l.split()[2] for l in lines if l.startswith("element vertex")))
    body = raw[end + len(b"end_header\n") :]
    if fmt == "binary_little_endian":
        if len(body) < n * _PLY_DTYPE.itemsize:
            raise IoError(f"{path}: truncated vertex data")
        rec = np.frombuffer(body, dtype=_PLY_DTYPE, count=n)
        xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1)
        rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1)
    elif fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:n]
        vals = np.array([r.split() for r in rows], dtype=np.float64).reshape(n, 6)
        xyz = vals[:, :3].astype(np.float32)
        rgb = vals[:, 3:].astype(np.uint8)
    else:
        raise IoError(f"{path}: unsupported PLY format {fmt}")
    return PointCloud(xyz.astype(np.float64), rgb)


__all__ = ["FusionParams", "PointCloud", "fuse", "read_ply", "sample_depth", "write_ply"]
