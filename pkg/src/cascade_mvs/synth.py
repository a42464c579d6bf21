"""Procedural multi-view scenes with exact ground-truth depth.

Views are rendered by ray casting analytic geometry whose albedo is a
multi-octave value noise defined in world coordinates, so every view sees the
same texture on the same surface point (Lambertian, no lighting).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, IoError
from .geometry import (
    CameraParams,
    intrinsics,
    look_at,
    read_camera_file,
    write_camera_file,
)
from .io import read_pfm, read_pnm, write_pfm, write_pnm

KINDS = ("fronto", "slanted", "sphere", "occlusion")
SCENE_RANGE = (425.0, 933.8)
_LATTICE = 64


@dataclass
class SceneSpec:
    kind: str = "fronto"
    depth: float = 680.0  # plane depth at the image center / background depth
    tilt: tuple[float, float] = (0.0, 0.0)  # plane slope angles about y and x (radians)
    radius: float = 120.0  # sphere radius
    near_depth: float = 560.0  # sphere center depth or occluder depth
    occluder_edge: float = 0.0  # occluder covers world x < edge
    width: int = 128
    height: int = 96
    focal: float = 130.0
    baseline: float = 150.0
    n_views: int = 3
    verge: bool = True
    wavelength: float = 60.0
    octaves: int = 4
    scene_range: tuple[float, float] = SCENE_RANGE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DegenerateGeometry(f"unknown geometry kind {self.kind!r}")
        if self.width % 4 or self.height % 4 or self.n_views < 2:
            raise DegenerateGeometry("image sides must be divisible by 4 and there must be >= 2 views")
        if self.octaves < 3:
            raise DegenerateGeometry("texture needs at least 3 octaves")
        self.tilt = tuple(self.tilt)
        self.scene_range = tuple(self.scene_range)


@dataclass
class SceneData:
    images: list[np.ndarray]  # (H, W, 3) floats in [0, 1]
    cams: list[CameraParams]
    depths: list[np.ndarray]  # per-view ground truth, 0 where nothing was hit
    masks: list[np.ndarray]
    scene_range: tuple[float, float]
    seed: int = 0
    spec: SceneSpec | None = field(default=None, repr=False)

    @property
    def gt_depth(self) -> np.ndarray:
        return self.depths[0]

    @property
    def mask(self) -> np.ndarray:
        return self.masks[0]


class ValueNoise:
    """Band-limited 3-D value noise from a seeded periodic lattice."""

    def __init__(self, seed: int, wavelength: float, octaves: int):
        rng = np.random.default_rng(seed)
        self.tables = rng.random((4, _LATTICE, _LATTICE, _LATTICE))
        self.offsets = rng.random((4, octaves, 3)) * _LATTICE
        self.wavelength = wavelength
        self.octaves = octaves

    def _lattice(self, table: np.ndarray, p: np.ndarray) -> np.ndarray:
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        f = f * f * f * (f * (f * 6 - 15) + 10)
        i0 %= _LATTICE
        i1 = (i0 + 1) % _LATTICE
        out = 0.0
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1 - f[..., 0]
            ix = i1[..., 0] if dx else i0[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1 - f[..., 1]
                iy = i1[..., 1] if dy else i0[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1 - f[..., 2]
                    iz = i1[..., 2] if dz else i0[..., 2]
                    out = out + wx * wy * wz * table[ix, iy, iz]
        return out

    def channel(self, k: int, points: np.ndarray) -> np.ndarray:
        total = np.zeros(points.shape[:-1])
        norm = 0.0
        for o in range(self.octaves):
            scale = 2.0**o / self.wavelength
            amp = 0.5**o
            total += amp * self._lattice(self.tables[k], points * scale + self.offsets[k, o])
            norm += amp
        n = total / norm
        return 0.5 + 0.5 * np.tanh(5.0 * (n - 0.5))

    def albedo(self, points: np.ndarray) -> np.ndarray:
        """RGB albedo ``(..., 3)`` at world points ``(..., 3)``."""
        gray = self.channel(0, points)
        return np.stack([0.7 * gray + 0.3 * self.channel(k, points) for k in (1, 2, 3)], axis=-1)


class Scene:
    """Analytic geometry plus texture; ray casting against a list of primitives."""

    def __init__(self, spec: SceneSpec, seed: int):
        self.spec = spec
        self.noise = ValueNoise(seed, spec.wavelength, spec.octaves)
        self.planes = []  # (normal, offset, bound) with bound = max world x or None
        self.spheres = []
        s = spec
        if s.kind == "fronto":
            self.planes.append((np.array([0.0, 0.0, 1.0]), s.depth, None))
        elif s.kind == "slanted":
            ay, ax = s.tilt
            n = np.array([np.sin(ay), np.sin(ax), np.cos(ay) * np.cos(ax)])
            n /= np.linalg.norm(n)
            self.planes.append((n, float(n @ [0.0, 0.0, s.depth]), None))
        elif s.kind == "sphere":
            if s.radius <= 0:
                raise DegenerateGeometry("sphere radius must be positive")
            self.spheres.append((np.array([0.0, 0.0, s.near_depth]), s.radius))
            self.planes.append((np.array([0.0, 0.0, 1.0]), s.depth, None))
        else:
            if s.near_depth >= s.depth:
                raise DegenerateGeometry("occluder must be in front of the background")
            self.planes.append((np.array([0.0, 0.0, 1.0]), s.near_depth, s.occluder_edge))
            self.planes.append((np.array([0.0, 0.0, 1.0]), s.depth, None))

    def cameras(self) -> list[CameraParams]:
        s = self.spec
        K = intrinsics(s.focal, (s.width - 1) / 2.0, (s.height - 1) / 2.0)
        cams = [CameraParams(K, np.eye(3), np.zeros(3))]
        for i in range(1, s.n_views):
            side = 1.0 if i % 2 else -1.0
            ring = (i + 1) // 2
            center = np.array([side * s.baseline * ring, 0.0, 0.0])
            if i >= 3:
                center[1] = 0.5 * s.baseline * (1 if (i // 2) % 2 else -1)
            if s.verge:
                cams.append(look_at(center, [0.0, 0.0, s.depth], K))
            else:
                cams.append(CameraParams(K, np.eye(3), -center))
        return cams

    def cast(self, cam: CameraParams, pixels: np.ndarray):
        """Cast rays through ``pixels (..., 2)``; returns ``(depth, points, hit)``.

        ``depth`` is the camera-frame z of the nearest hit (0 where nothing is hit).
        """
        ph = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
        d = (ph @ cam.K_inv.T) @ cam.R  # world direction with unit camera-frame z
        c = cam.center
        best = np.full(pixels.shape[:-1], np.inf)
        for n, off, bound in self.planes:
            nd = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (off - n @ c) / nd
            ok = np.isfinite(t) & (t > 0)
            if bound is not None:
                x = c[0] + t * d[..., 0]
                ok &= x < bound
            best = np.where(ok & (t < best), t, best)
        for center, r in self.spheres:
            oc = c - center
            a = (d * d).sum(-1)
            b = 2.0 * (d @ oc)
            cc = oc @ oc - r * r
            disc = b * b - 4 * a * cc
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(disc)
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            t = np.where(t0 > 0, t0, t1)
            ok = (disc >= 0) & (t > 0)
            best = np.where(ok & (t < best), t, best)
        hit = np.isfinite(best)
        depth = np.where(hit, best, 0.0)
        points = c + depth[..., None] * d
        return depth, points, hit

    def render(self, cam: CameraParams):
        s = self.spec
        v, u = np.mgrid[0 : s.height, 0 : s.width].astype(np.float64)
        depth, points, hit = self.cast(cam, np.stack([u, v], axis=-1))
        image = np.where(hit[..., None], self.noise.albedo(points), 0.0)
        return image, depth, hit


def generate_scene(spec: SceneSpec, seed: int = 0) -> SceneData:
    """Render every view of ``spec``; view 0 is the reference."""
    scene = Scene(spec, seed)
    cams = scene.cameras()
    images, depths, masks = [], [], []
    for cam in cams:
        img, depth, hit = scene.render(cam)
        images.append(img)
        depths.append(depth)
        masks.append(hit)
    lo, hi = spec.scene_range
    ref, m = depths[0], masks[0]
    if not m.any():
        raise DegenerateGeometry("reference view sees no geometry")
    if ref[m].min() < lo or ref[m].max() > hi:
        raise DegenerateGeometry(f"reference depths [{ref[m].min():.1f}, {ref[m].max():.1f}] leave the scene range")
    return SceneData(images, cams, depths, masks, spec.scene_range, seed, spec)


def random_spec(rng: np.random.Generator, **overrides) -> SceneSpec:
    """Draw a scene whose reference depths stay inside the default scene range."""
    kind = overrides.pop("kind", None) or KINDS[int(rng.integers(len(KINDS)))]
    params = dict(kind=kind, depth=float(rng.uniform(560.0, 800.0)))
    if kind == "slanted":
        params["tilt"] = (float(rng.uniform(-0.4, 0.4)), float(rng.uniform(-0.3, 0.3)))
    elif kind == "sphere":
        params["depth"] = float(rng.uniform(720.0, 860.0))
        params["radius"] = float(rng.uniform(70.0, 130.0))
        low = max(params["depth"] - 250.0, SCENE_RANGE[0] + params["radius"] + 20.0)
        params["near_depth"] = float(rng.uniform(low, params["depth"] - 140.0))
    elif kind == "occlusion":
        params["depth"] = float(rng.uniform(700.0, 880.0))
        params["near_depth"] = float(rng.uniform(480.0, params["depth"] - 120.0))
        params["occluder_edge"] = float(rng.uniform(-80.0, 80.0))
    params.update(overrides)
    return SceneSpec(**params)


def make_dataset(n: int, seed: int, **overrides) -> list[SceneData]:
    """``n`` random scenes; scene ``i`` is fully determined by ``(seed, i)``."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            spec = random_spec(rng, **dict(overrides))
            try:
                out.append(generate_scene(spec, seed=int(rng.integers(2**31))))
                break
            except DegenerateGeometry:
                continue
    return out


def write_scene(scene: SceneData, out_dir) -> Path:
    """Write images (PPM), cameras, per-view GT depth (PFM) and a JSON manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    lo, hi = scene.scene_range
    views = []
    for i, (img, cam, depth) in enumerate(zip(scene.images, scene.cams, scene.depths)):
        names = {"image": f"view_{i}.ppm", "camera": f"view_{i}_cam.txt", "depth": f"view_{i}_depth.pfm"}
        write_pnm(out / names["image"], img)
        write_camera_file(out / names["camera"], cam, lo, hi - lo)
        write_pfm(out / names["depth"], depth)
        views.append(names)
    manifest = {"seed": scene.seed, "scene_range": [lo, hi], "views": views}
    if scene.spec is not None:
        manifest["spec"] = asdict(scene.spec)
    (out / "scene.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_scene(scene_dir) -> SceneData:
    d = Path(scene_dir)
    try:
        manifest = json.loads((d / "scene.json").read_text())
    except (OSError, ValueError) as exc:
        raise IoError(f"{d}: cannot read scene manifest ({exc})") from exc
    images, cams, depths, masks = [], [], [], []
    for v in manifest["views"]:
        img = read_pnm(d / v["image"])
        images.append(img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=-1))
        cam, _, _ = read_camera_file(d / v["camera"])
        cams.append(cam)
        if (d / v["depth"]).exists():
            depth = read_pfm(d / v["depth"]).astype(np.float64)
        else:
            depth = np.zeros(img.shape[:2])
        depths.append(depth)
        masks.append(depth > 0)
    spec = SceneSpec(**manifest["spec"]) if "spec" in manifest else None
    return SceneData(images, cams, depths, masks, tuple(manifest["scene_range"]), manifest["seed"], spec)
