"""Point-cloud metrics, depth error statistics and range diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMask, IoError, ShapeMismatch
from .rem import DepthRangeMap


@dataclass
class RangeDiagnostics:
    mean_length: float
    coverage: float
    pixels: int


@dataclass
class DepthErrors:
    mae: float
    rmse: float
    within_spacing: float


def _points(cloud) -> np.ndarray:
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3)


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def cloud_metrics(pred, gt, dist_cap: float) -> tuple[float, float, float]:
    """``(accuracy, completeness, overall)`` with per-point distances capped at ``dist_cap``."""
    p, g = _points(pred), _points(gt)
    if len(p) == 0 or len(g) == 0:
        raise EmptyCloud("both clouds must hold at least one point")
    acc = float(np.minimum(nearest_distances(p, g), dist_cap).mean())
    comp = float(np.minimum(nearest_distances(g, p), dist_cap).mean())
    return acc, comp, 0.5 * (acc + comp)


def range_diagnostics(ranges: DepthRangeMap, gt_depth: np.ndarray, mask: np.ndarray) -> RangeDiagnostics:
    """Mean interval length and the fraction of pixels whose interval holds the ground truth."""
    mask = np.asarray(mask, dtype=bool)
    if ranges.dmin.shape != gt_depth.shape or mask.shape != gt_depth.shape:
        raise ShapeMismatch("range map, ground truth and mask must share a shape")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("no valid pixels")
    lo, hi, g = ranges.dmin[mask], ranges.dmax[mask], gt_depth[mask]
    return RangeDiagnostics(float((hi - lo).mean()), float(((lo <= g) & (g <= hi)).mean()), n)


def pooled_diagnostics(items: list[RangeDiagnostics]) -> RangeDiagnostics:
    """Pixel-weighted pooling across scenes."""
    n = sum(d.pixels for d in items)
    if n == 0:
        raise EmptyMask("no valid pixels")
    length = sum(d.mean_length * d.pixels for d in items) / n
    cov = sum(d.coverage * d.pixels for d in items) / n
    return RangeDiagnostics(float(length), float(cov), n)


def depth_error_stats(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, spacing: float = 1.0) -> DepthErrors:
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeMismatch("prediction, ground truth and mask must share a shape")
    if not mask.any():
        raise EmptyMask("no valid pixels")
    r = np.abs(pred[mask] - gt[mask])
    return DepthErrors(float(r.mean()), float(np.sqrt((r * r).mean())), float((r <= spacing).mean()))


def range_table_rows(results: dict[str, list[RangeDiagnostics]]) -> list[dict]:
    """One row per method: stage-2 and stage-3 mean range and coverage ratio."""
    rows = []
    for name, (d2, d3) in results.items():
        rows.append(
            {
                "method": name,
                "range2": d2.mean_length,
                "ratio2": d2.coverage,
                "range3": d3.mean_length,
                "ratio3": d3.coverage,
            }
        )
    return rows


def format_range_table(rows: list[dict]) -> str:
    head = f"{'Method':<22}{'2nd Range':>11}{'2nd Ratio':>11}{'3rd Range':>11}{'3rd Ratio':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['method']:<22}{r['range2']:>11.2f}{r['ratio2']:>11.4f}{r['range3']:>11.2f}{r['ratio3']:>11.4f}"
        )
    return "\n".join(lines)


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    except OSError as exc:
        raise IoError(str(exc)) from exc


__all__ = [
    "DepthErrors",
    "RangeDiagnostics",
    "cloud_metrics",
    "depth_error_stats",
    "format_range_table",
    "pooled_diagnostics",
    "range_diagnostics",
    "range_table_rows",
    "write_csv",
]
