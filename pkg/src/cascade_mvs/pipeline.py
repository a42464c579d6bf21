"""Three-stage cascaded inference.

Stage 1 sweeps the whole scene range with planes shared by every pixel at a
quarter of the input resolution. Each later stage doubles the resolution and
sweeps a per-pixel interval derived from the previous stage: either the
learned uncertainty (``infer``) or a fixed shrink factor
(``fixed_range_baseline``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost_volume import ProbabilityVolume, build_cost_volume, regularize, soft_argmin
from .errors import BadDimensions, TooFewViews
from .features import FeatureWeights, extract_pyramid
from .geometry import CameraParams, sample_depth_planes, sample_depth_planes_map
from .rem import DepthRangeMap, RemWeights, dynamic_range, rem_forward
from .resample import upsample_bilinear, upsample_nearest

DIVISORS = (4, 2, 1)
# fixed-interval comparator: stage-to-stage length ratios 169.72/508.8 and 21.09/169.72
DEFAULT_SHRINK = (0.3336, 0.1243)


@dataclass
class StageConfig:
    planes: tuple[int, int, int] = (48, 32, 8)
    lambdas: tuple[float, float] = (1.5, 0.75)
    spatial_radius: int = 1
    depth_radius: int = 1
    temperature: float | None = None  # None: 0.05 * mean cost, per volume

    def __post_init__(self):
        self.planes = tuple(int(p) for p in self.planes)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if len(self.planes) != 3 or min(self.planes) < 1:
            raise ValueError("need three plane counts >= 1")
        if len(self.lambdas) != 2 or min(self.lambdas) <= 0:
            raise ValueError("need two positive lambdas")


@dataclass
class CascadeOutput:
    depths: list[np.ndarray]  # 1/4, 1/2, full resolution
    valid: list[np.ndarray]
    uncertainties: list[np.ndarray]  # stages 1-2, at their own resolution
    ranges: list[DepthRangeMap]  # intervals swept by stages 2 and 3, at their resolution
    coarse_ranges: list[DepthRangeMap]  # the same intervals before upsampling
    hyps: list[np.ndarray] = field(default_factory=list)
    probs: list[ProbabilityVolume] = field(default_factory=list)


@dataclass
class StageResult:
    hyps: np.ndarray  # (D,) or (D, H, W)
    pv: ProbabilityVolume
    depth: np.ndarray
    cv: object = None


def stage_cameras(cams: list[CameraParams]) -> list[list[CameraParams]]:
    return [[c.scaled(1.0 / d) for c in cams] for d in DIVISORS]


def check_views(images, cams) -> None:
    if len(images) < 2 or len(cams) != len(images):
        raise TooFewViews(f"need a reference and >= 1 source view, got {len(images)} images / {len(cams)} cameras")
    h, w = images[0].shape[:2]
    if h % 4 or w % 4:
        raise BadDimensions(f"image {w}x{h} must have sides divisible by 4")


def view_features(images, feature_weights: FeatureWeights | None = None) -> list[list[np.ndarray]]:
    """``[stage][view] -> (C, H, W)`` feature maps."""
    per_view = [extract_pyramid(img, feature_weights) for img in images]
    return [[pv[k] for pv in per_view] for k in range(3)]


def run_stage(feats, cams, hyps, cfg: StageConfig, keep_cost=False) -> StageResult:
    cv = build_cost_volume(feats[0], feats[1:], cams[0], cams[1:], hyps)
    pv = regularize(cv, cfg.spatial_radius, cfg.depth_radius, cfg.temperature)
    depth = soft_argmin(pv.prob, hyps)
    return StageResult(hyps, pv, depth, cv if keep_cost else None)


def _cascade(images, cams, scene_range, cfg: StageConfig, next_range, feature_weights=None, retain=False):
    check_views(images, cams)
    lo, hi = float(scene_range[0]), float(scene_range[1])
    feats = view_features(images, feature_weights)
    scams = stage_cameras(cams)
    hyps = sample_depth_planes(lo, hi, cfg.planes[0])
    out = CascadeOutput([], [], [], [], [])
    prev_len = np.full(feats[0][0].shape[1:], hi - lo)
    for k in range(3):
        res = run_stage(feats[k], scams[k], hyps, cfg)
        out.depths.append(res.depth)
        out.valid.append(res.pv.valid)
        if retain:
            out.hyps.append(np.array(hyps))
            out.probs.append(res.pv)
        if k == 2:
            break
        rng, unc = next_range(k, res, prev_len)
        if unc is not None:
            out.uncertainties.append(unc)
        out.coarse_ranges.append(rng)
        up = rng.upsample()
        out.ranges.append(up)
        prev_len = up.length
        hyps = sample_depth_planes_map(up.dmin, up.dmax, cfg.planes[k + 1])
    return out


def infer(images, cams, scene_range, rems: list[RemWeights], cfg: StageConfig | None = None,
          feature_weights: FeatureWeights | None = None, retain: bool = False) -> CascadeOutput:
    """Cascade with learned per-pixel ranges; ``rems`` holds the stage-1 and stage-2 networks."""
    cfg = cfg or StageConfig()
    lo, hi = float(scene_range[0]), float(scene_range[1])

    def next_range(k, res, prev_len):
        unc, _ = rem_forward(res.pv.prob, rems[k], mode="eval")
        snap = float(np.mean(prev_len)) / max(cfg.planes[k] - 1, 1)
        return dynamic_range(res.depth, unc[0], cfg.lambdas[k], prev_len, (lo, hi), snap_width=snap), unc[0]

    return _cascade(images, cams, scene_range, cfg, next_range, feature_weights, retain)


def baseline_range(depth: np.ndarray, length: float, scene_range) -> DepthRangeMap:
    """Interval of fixed ``length`` centered on ``depth``, clipped to the scene range."""
    half = 0.5 * float(length)
    return DepthRangeMap(np.maximum(depth - half, scene_range[0]), np.minimum(depth + half, scene_range[1]))


def fixed_range_baseline(images, cams, scene_range, cfg: StageConfig | None = None,
                         shrink_factors=DEFAULT_SHRINK, feature_weights=None, retain=False) -> CascadeOutput:
    """Cascade whose next interval length is ``shrink * previous length`` for every pixel."""
    cfg = cfg or StageConfig()
    lo, hi = float(scene_range[0]), float(scene_range[1])
    nominal = [hi - lo]
    for s in shrink_factors:
        nominal.append(nominal[-1] * float(s))

    def next_range(k, res, prev_len):
        return baseline_range(res.depth, nominal[k + 1], (lo, hi)), None

    return _cascade(images, cams, scene_range, cfg, next_range, feature_weights, retain)


def upsample_mask(mask: np.ndarray) -> np.ndarray:
    return upsample_nearest(mask)


__all__ = [
    "CascadeOutput",
    "StageConfig",
    "baseline_range",
    "fixed_range_baseline",
    "infer",
    "run_stage",
    "upsample_bilinear",
    "upsample_mask",
]
