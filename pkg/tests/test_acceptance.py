"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained-model criteria share one session fixture that trains the full
model and the beta = (0, 0) ablation through the CLI with default settings
(32 scenes, 256 steps, seed 0) and evaluates on 8 held-out scenes.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, random_camera

from cascade_mvs.cli import _stage3_spacing, evaluate_dir, main
from cascade_mvs.cost_volume import CostVolume, regularize, soft_argmin
from cascade_mvs.evaluation import pooled_diagnostics, range_diagnostics
from cascade_mvs.fusion import FusionParams, _fuse_view, fuse
from cascade_mvs.geometry import (
    apply_homography,
    backproject,
    homography_first_stage,
    homography_residual,
    project_points,
)
from cascade_mvs.loss import MIN_MASS, clamp_refine, refined_depth
from cascade_mvs.pipeline import (
    DEFAULT_SHRINK,
    StageConfig,
    baseline_range,
    fixed_range_baseline,
    infer,
)
from cascade_mvs.rem import DepthRangeMap, dynamic_range, read_checkpoint, rem_forward
from cascade_mvs.synth import Scene, SceneSpec, generate_scene, load_scene
from cascade_mvs.trainer import (
    check_probability_path,
    check_refined_wrt_unc,
    check_rem,
    check_semi_gradient,
    gt_pyramid,
)

TEST_SEED = 1000  # held-out scenes; training uses seed 0


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def four_point(ref, src, d):
    """Back-project four corners at depth ``d`` and project them into ``src`` with plain matrices."""
    px = np.array([[0.0, 0.0], [120.0, 0.0], [0.0, 90.0], [120.0, 90.0]])
    P = src.K @ np.hstack([src.R, src.t[:, None]])
    out = []
    for u, v in px:
        X = ref.R.T @ (np.linalg.solve(ref.K, [u, v, 1.0]) * d - ref.t)
        h = P @ np.append(X, 1.0)
        out.append(h[:2] / h[2])
    return px, np.array(out)


def test_criterion_1_geometry_oracles():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    px_err = comp_err = 0.0
    for _ in range(1000):
        ref, src = random_camera(rng), random_camera(rng)
        d_prev = rng.uniform(2.0, 6.0)
        delta = rng.uniform(-0.5, 0.5) * d_prev
        H1 = homography_first_stage(ref, src, d_prev)
        H2 = homography_residual(ref, src, d_prev, delta)
        px, oracle1 = four_point(ref, src, d_prev)
        _, oracle2 = four_point(ref, src, d_prev + delta)
        px_err = max(px_err, np.abs(apply_homography(H1, px) - oracle1).max())
        px_err = max(px_err, np.abs(apply_homography(H2, px) - oracle2).max())
        comp_err = max(comp_err, np.abs(H2 - homography_first_stage(ref, src, d_prev + delta)).max())
    elapsed = time.perf_counter() - t0
    verdict(
        1,
        px_err <= 1e-9 and comp_err <= 1e-12 and elapsed < 5.0,
        f"1000 pairs, max pixel error {px_err:.2e} (<= 1e-9), composition error {comp_err:.2e} (<= 1e-12), "
        f"{elapsed:.2f} s (< 5 s)",
    )


def random_volume(rng, i):
    d, h, w = int(rng.integers(1, 40)), int(rng.integers(1, 12)), int(rng.integers(1, 12))
    scale = 10.0 ** rng.uniform(-8, 8)
    cost = rng.exponential(scale, size=(d, h, w))
    if i % 10 == 0:
        cost[:] = scale  # flat volume
    mask = rng.uniform(size=cost.shape)
    mask[mask < 0.3] = 0.0  # out-of-bounds samples, including whole unseen pixels
    if i % 7 == 0:
        mask[:, : h // 2] = 0.0
    return CostVolume(cost, mask)


def test_criterion_2_probability_invariants():
    rng = np.random.default_rng(202)
    worst_sum = 0.0
    negative = outside = 0
    for i in range(100):
        cv = random_volume(rng, i)
        temp = None if i % 2 else 10.0 ** rng.uniform(-6, 3)
        pv = regularize(cv, int(rng.integers(0, 3)), int(rng.integers(0, 3)), temp)
        worst_sum = max(worst_sum, np.abs(pv.prob.sum(axis=0) - 1.0).max())
        negative += int((pv.prob < 0).sum())
        d = cv.cost.shape[0]
        flat = np.sort(rng.uniform(400, 950, d))
        per_pixel = np.sort(rng.uniform(400, 950, cv.cost.shape), axis=0)
        for hyps in (flat, per_pixel):
            est = soft_argmin(pv.prob, hyps)
            outside += int(((est < hyps.min(axis=0)) | (est > hyps.max(axis=0))).sum())
    verdict(
        2,
        worst_sum <= 1e-5 and negative == 0 and outside == 0,
        f"100 volumes, max |sum - 1| {worst_sum:.1e} (<= 1e-5), {negative} negative entries, "
        f"{outside} soft-argmin estimates outside the hypothesis extrema",
    )


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    reports = {
        "rem": check_rem(eps=1e-4),
        "refined_wrt_unc": check_refined_wrt_unc(eps=1e-4),
        "semi_gradient": check_semi_gradient(eps=1e-4),
        "probability_path": check_probability_path(eps=1e-4),
    }
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in reports.values())
    ok = all(r.passed and r.max_error <= 1e-4 for r in reports.values()) and elapsed < 60.0
    parts = ", ".join(f"{k} {r.max_error:.1e} ({r.checked} entries)" for k, r in reports.items())
    verdict(3, ok, f"max relative error {worst:.1e} (<= 1e-4): {parts}; {elapsed:.1f} s (< 60 s)")


def oracle_refined(h, p, lo, hi):
    keep = [(hj, pj) for hj, pj in zip(h, p) if lo < hj < hi]
    mass = math.fsum(pj for _, pj in keep)
    if mass < MIN_MASS:
        return None
    return math.fsum(hj * pj for hj, pj in keep) / mass


def test_criterion_4_clamp_exactness():
    rng = np.random.default_rng(404)
    n, d = 10_000, 8
    h = np.sort(rng.uniform(1.0, 10.0, (d, 1, n)), axis=0)
    p = rng.dirichlet(np.ones(d), size=n).T.reshape(d, 1, n)
    lo, hi = np.sort(rng.uniform(0.0, 11.0, (2, 1, n)), axis=0)
    # a tenth of the cases exclude every hypothesis
    empty = np.arange(n) % 10 == 0
    lo[0, empty] = h[-1, 0, empty] + 0.1
    hi[0, empty] = lo[0, empty] + 1.0
    # and a tenth put a bound exactly on a hypothesis
    edge = np.arange(n) % 10 == 5
    lo[0, edge] = h[2, 0, edge]
    rd = clamp_refine(h, p, DepthRangeMap(lo, hi))
    depth, valid = refined_depth(rd)
    worst, mismatch, invalid = 0.0, 0, 0
    for j in range(n):
        want = oracle_refined(h[:, 0, j], p[:, 0, j], lo[0, j], hi[0, j])
        if want is None:
            invalid += 1
            mismatch += bool(valid[0, j])
        else:
            mismatch += not valid[0, j]
            worst = max(worst, abs(depth[0, j] - want))
    # hard/soft agreement with the bounds at least 20 tau from every hypothesis
    hs = np.linspace(2.0, 4.0, d)
    spacing = hs[1] - hs[0]
    tau = 1e-4 * spacing
    lo2 = rng.uniform(1.5, 3.0, (1, n))
    hi2 = lo2 + rng.uniform(0.5, 2.0, (1, n))
    margin = np.minimum(np.abs(hs[:, None, None] - lo2).min(0), np.abs(hs[:, None, None] - hi2).min(0))
    away = margin[0] >= 20 * tau
    hard = refined_depth(clamp_refine(hs, p, DepthRangeMap(lo2, hi2)))
    soft = refined_depth(clamp_refine(hs, p, DepthRangeMap(lo2, hi2), mode="soft", tau=tau))
    both = away & hard[1][0] & soft[1][0]
    agree = float(np.abs(hard[0][0, both] - soft[0][0, both]).max())
    valid_flip = int((hard[1][0, away] != soft[1][0, away]).sum())
    verdict(
        4,
        worst <= 1e-12 and mismatch == 0 and agree <= 1e-6 and valid_flip == 0,
        f"10000 pixels ({invalid} all-clamped), max oracle error {worst:.1e} (<= 1e-12), {mismatch} validity "
        f"mismatches; hard/soft max gap {agree:.1e} (<= 1e-6) over {int(both.sum())} pixels",
    )


# ---------------------------------------------------------------- trained models


def _cli(*argv):
    rc = main([str(a) for a in argv])
    assert rc == 0, argv
    return rc


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    _cli("synth", "--out", root / "test_scenes", "--seed", TEST_SEED, "--synth.scenes", 8)
    t0 = time.perf_counter()
    _cli("train", "--out", root / "full.bin", "--seed", 0)
    train_full = time.perf_counter() - t0
    _cli("train", "--out", root / "beta0.bin", "--seed", 0, "--beta", "0,0")
    scenes = sorted((root / "test_scenes").iterdir())
    t0 = time.perf_counter()
    for s in scenes:
        _cli("infer", "--scene", s, "--checkpoint", root / "full.bin", "--out", root / "full" / s.name)
    infer_full = time.perf_counter() - t0
    for s in scenes:
        _cli("infer", "--scene", s, "--checkpoint", root / "beta0.bin", "--out", root / "beta0" / s.name)
    return {"root": root, "scenes": scenes, "train_seconds": train_full, "infer_seconds": infer_full}


def test_criterion_5_cascade_improves(trained):
    cfg = StageConfig()
    rows = [evaluate_dir(trained["root"] / "full" / s.name, s, cfg) for s in trained["scenes"]]
    better = sum(r["mae3"] < r["mae1"] for r in rows)
    per_scene = " ".join(f"{r['mae1']:.1f}->{r['mae3']:.1f}" for r in rows)
    secs = trained["infer_seconds"]
    verdict(
        5,
        better == 8 and secs < 300,
        f"stage-3 MAE below stage-1 MAE on {better}/8 scenes ({per_scene}); inference {secs:.1f} s (< 300 s)",
    )


def _reordered(scene, r):
    order = [r] + [i for i in range(len(scene.images)) if i != r]
    return [scene.images[i] for i in order], [scene.cams[i] for i in order]


def _f32(a):
    return a.astype(np.float32).astype(np.float64)


class MatchedBaseline:
    """Stage-3 coverage and length of the fixed-shrink baseline as a function of the last shrink factor.

    The stage-3 interval only depends on the stage-2 depth, which does not
    depend on that factor, so one cascade pass per view serves the whole
    search. Intervals go through float32 like the maps written to disk.
    """

    def __init__(self, scene_dirs):
        self.items = []
        for d in scene_dirs:
            scene = load_scene(d)
            for r in range(len(scene.images)):
                images, cams = _reordered(scene, r)
                out = fixed_range_baseline(images, cams, scene.scene_range)
                gts, masks = gt_pyramid(scene.depths[r], scene.masks[r])
                self.items.append((out.depths[1], scene.scene_range, gts[2], masks[2]))

    def diagnostics(self, s3):
        diags = []
        for depth2, (lo, hi), gt, mask in self.items:
            up = baseline_range(depth2, (hi - lo) * DEFAULT_SHRINK[0] * s3, (lo, hi)).upsample()
            diags.append(range_diagnostics(DepthRangeMap(_f32(up.dmin), _f32(up.dmax)), gt, mask))
        return pooled_diagnostics(diags)

    def match(self, coverage, iters=40):
        """Smallest factor whose coverage reaches ``coverage``."""
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if self.diagnostics(mid).coverage >= coverage:
                hi = mid
            else:
                lo = mid
        return hi


def test_criterion_6_learned_ranges_beat_baselines(trained, capsys):
    """The cmd_eval report (range and coverage per stage) goes straight to the terminal."""
    root, scenes = trained["root"], trained["scenes"]
    cfg = StageConfig()
    full = evaluate_dir(root / "full", root / "test_scenes", cfg)
    matcher = MatchedBaseline(scenes)
    s3 = matcher.match(full["ratio3"])
    shrink = f"{DEFAULT_SHRINK[0]!r},{s3!r}"
    for s in scenes:
        _cli("infer", "--scene", s, "--baseline", "--shrink", shrink, "--out", root / "matched" / s.name)
    with capsys.disabled():
        print()
        _cli(
            "eval", "--gt", root / "test_scenes", "--report", root / "ranges.csv",
            "--pred", f"baseline (matched)={root / 'matched'}",
            "--pred", f"REM (beta=0)={root / 'beta0'}",
            "--pred", f"REM + refined loss={root / 'full'}",
        )
    rows = {r.split(",")[0]: r.split(",") for r in (root / "ranges.csv").read_text().splitlines()}
    head = rows.pop("method")
    rows = {k: {h: float(x) for h, x in zip(head[1:], v[1:]) if x} for k, v in rows.items()}
    base, b0, ours = rows["baseline (matched)"], rows["REM (beta=0)"], rows["REM + refined loss"]
    assert ours["ratio3"] == full["ratio3"] and ours["range3"] == full["range3"]
    # the disk round trip reproduces the in-memory search exactly
    assert base["ratio3"] == matcher.diagnostics(s3).coverage

    a_ok = base["ratio3"] >= ours["ratio3"] and ours["range3"] < base["range3"]
    shorter, higher = ours["range3"] < b0["range3"], ours["ratio3"] > b0["ratio3"]
    cov_drop = b0["ratio3"] - ours["ratio3"]
    len_growth = (ours["range3"] - b0["range3"]) / b0["range3"]
    b_ok = (shorter and cov_drop < 0.02) or (higher and len_growth < 0.02)
    verdict(
        6,
        a_ok and b_ok,
        f"(a) stage-3 range {ours['range3']:.2f} vs matched baseline {base['range3']:.2f} "
        f"(coverage {ours['ratio3']:.4f} vs {base['ratio3']:.4f}, shrink {s3:.4f}); "
        f"(b) vs beta=0 range {b0['range3']:.2f} coverage {b0['ratio3']:.4f} "
        f"(coverage change {-cov_drop:+.4f}, range change {100 * len_growth:+.1f}%)",
    )


def test_criterion_7_lambda_nesting(trained):
    rems = read_checkpoint(trained["root"] / "full.bin")
    cfg = StageConfig()
    lams = (0.5, 1.0, 1.5, 2.0)
    covs = {0: [], 1: []}
    lens = {0: [], 1: []}
    for d in trained["scenes"]:
        scene = load_scene(d)
        lo, hi = scene.scene_range
        out = infer(scene.images, scene.cams, scene.scene_range, rems, cfg, retain=True)
        gts, masks = gt_pyramid(scene.depths[0], scene.masks[0])
        prev = [np.full(out.depths[0].shape, hi - lo), out.ranges[0].length]
        for k in range(2):
            unc = rem_forward(out.probs[k].prob, rems[k], mode="eval")[0][0]
            assert np.array_equal(unc, out.uncertainties[k])
            c_row, l_row = [], []
            for lam in lams:
                rng = dynamic_range(out.depths[k], unc, lam, prev[k], (lo, hi))
                c_row.append(range_diagnostics(rng.upsample(), gts[k + 1], masks[k + 1]).coverage)
                raw = dynamic_range(out.depths[k], unc, lam, prev[k], (-np.inf, np.inf))
                l_row.append(float(raw.length.mean()))
            covs[k].append(c_row)
            lens[k].append(l_row)
    monotone = all(np.all(np.diff(row) >= 0) for k in covs for row in covs[k])
    lin = max(
        abs(row[i] / lams[i] - row[1]) / row[1] for k in lens for row in lens[k] for i in range(len(lams))
    )
    mean_cov = {k: np.round(np.mean(covs[k], axis=0), 4).tolist() for k in covs}
    verdict(
        7,
        monotone and lin <= 1e-12,
        f"coverage non-decreasing over lambda {lams} on 8 scenes x 2 transitions (mean {mean_cov}); "
        f"pre-clipping length linear to {lin:.1e} relative",
    )


def test_criterion_8_fusion(trained):
    spec = SceneSpec(kind="slanted", depth=700.0, tilt=(0.3, -0.2))
    scene = generate_scene(spec, seed=8)
    (n, off, _), = Scene(spec, 8).planes

    def plane_rms(pc):
        return float(np.sqrt(np.mean((pc.xyz @ n - off) ** 2)))

    interior = interior_count(scene)
    kept_ref = len(_fuse_view(0, scene.depths, scene.cams, scene.images, FusionParams())[0])
    rms_gt = plane_rms(fuse(scene.depths, scene.cams, scene.images))

    rems = read_checkpoint(trained["root"] / "full.bin")
    preds, spacings = [], []
    for r in range(len(scene.images)):
        images, cams = _reordered(scene, r)
        out = infer(images, cams, scene.scene_range, rems, retain=True)
        preds.append(out.depths[2])
        spacings.append(float(np.mean(np.diff(out.hyps[2], axis=0))))
    pred_cloud = fuse(preds, scene.cams, scene.images)
    rms_pred = plane_rms(pred_cloud)
    lo, hi = scene.scene_range
    spacing = min(float(np.mean(spacings)), _stage3_spacing(StageConfig(), hi - lo))
    frac = kept_ref / interior
    verdict(
        8,
        frac >= 0.95 and rms_gt <= 1e-6 and len(pred_cloud) > 0 and rms_pred <= spacing,
        f"ground truth: {100 * frac:.1f}% of {interior} interior pixels fused (>= 95%), plane RMS {rms_gt:.1e} "
        f"(<= 1e-6); predicted depths: {len(pred_cloud)} points, plane RMS {rms_pred:.3f} "
        f"(<= stage-3 spacing {spacing:.3f})",
    )


def interior_count(scene, margin=0.0):
    """Reference pixels whose surface point lands inside every other view."""
    h, w = scene.depths[0].shape
    ys, xs = np.nonzero(scene.masks[0])
    pts = backproject(scene.cams[0], np.stack([xs, ys], -1).astype(float), scene.depths[0][ys, xs])
    ok = np.ones(len(pts), bool)
    for cam in scene.cams[1:]:
        uv, z = project_points(cam, pts)
        ok &= (z > 0) & (uv[:, 0] >= margin) & (uv[:, 0] <= w - 1 - margin)
        ok &= (uv[:, 1] >= margin) & (uv[:, 1] <= h - 1 - margin)
    return int(ok.sum())


def _tree_bytes(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(trained, tmp_path):
    small = ["--train.scenes", 4, "--epochs", 2]
    for name in ("a", "b"):
        _cli("train", "--out", tmp_path / f"{name}.bin", "--seed", 7, "--threads", 1, *small)
    train_same = all(
        (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes() for ext in ("bin", "csv")
    )
    scene = trained["scenes"][0]
    outs = []
    for threads in (1, 1, 2, 4):
        out = tmp_path / f"infer_{len(outs)}"
        _cli("infer", "--scene", scene, "--checkpoint", trained["root"] / "full.bin", "--out", out,
             "--threads", threads)
        outs.append(_tree_bytes(out))
    infer_same = all(o == outs[0] for o in outs[1:])
    verdict(
        9,
        train_same and infer_same,
        f"train reruns at --threads 1 byte-identical: {train_same}; "
        f"infer at --threads 1, 1, 2, 4 byte-identical ({len(outs[0])} files): {infer_same}",
    )
