"""Command-line entry point: synth, train, infer, fuse, eval, gradcheck.

Settings come from built-in defaults, then ``--config FILE`` (INI), then any
``--key value`` / ``--section.key value`` pairs on the command line.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import dump_config, load_config
from .errors import CascadeError, ConfigError, IoError
from .evaluation import (
    RangeDiagnostics,
    cloud_metrics,
    format_range_table,
    pooled_diagnostics,
    range_diagnostics,
    range_table_rows,
    write_csv,
)
from .fusion import fuse, read_ply, write_ply
from .geometry import read_camera_file, write_camera_file
from .io import read_pfm, read_pnm, write_pfm, write_pnm
from .pipeline import DEFAULT_SHRINK, fixed_range_baseline, infer
from .rem import DepthRangeMap, read_checkpoint, write_checkpoint
from .synth import load_scene, make_dataset, write_scene
from .trainer import GRAD_TARGETS, grad_check_report, gt_pyramid, train


def _scene_dirs(root: Path) -> list[Path]:
    if (root / "scene.json").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "scene.json").is_file()) if root.is_dir() else []
    if not dirs:
        raise IoError(f"no scene directories under {root}")
    return dirs


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise IoError(f"file not found: {path}")
    return path


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(cfg, out_dir: Path) -> list[Path]:
    s = cfg.values["synth"]
    _writable_dir(out_dir)
    scenes = make_dataset(s["scenes"], cfg.seed, width=s["width"], height=s["height"], n_views=s["views"])
    return [write_scene(sc, out_dir / f"scene_{i:03d}") for i, sc in enumerate(scenes)]


def cmd_train(cfg, scenes_dir: Path | None, out_checkpoint: Path, log_path: Path | None = None, verbose=False):
    if scenes_dir is not None:
        dataset = [load_scene(d) for d in _scene_dirs(scenes_dir)]
    else:
        dataset = make_dataset(cfg.get("train", "scenes"), cfg.seed)
    _writable_dir(out_checkpoint.parent)
    log_path = log_path or out_checkpoint.with_suffix(".csv")
    progress = None
    if verbose:
        def progress(row):
            print(f"step {int(row['step'])} lr {row['lr']:.2e} total {row['total']:.4f}", file=sys.stderr)
    result = train(dataset, cfg.train_config(), cfg.stage_config(), log_path=log_path, progress=progress)
    write_checkpoint(out_checkpoint, result.rems)
    return result


def _reordered(scene, r: int):
    order = [r] + [i for i in range(len(scene.images)) if i != r]
    return [scene.images[i] for i in order], [scene.cams[i] for i in order]


def _infer_view(scene, r, rems, stage_cfg, baseline, shrink):
    images, cams = _reordered(scene, r)
    if baseline:
        return fixed_range_baseline(images, cams, scene.scene_range, stage_cfg, shrink_factors=shrink)
    return infer(images, cams, scene.scene_range, rems, stage_cfg)


def cmd_infer(cfg, scene_dir: Path, checkpoint: Path | None, out_dir: Path, baseline=False, shrink=DEFAULT_SHRINK):
    """Every view in turn is the reference; writes per-stage depth, uncertainty and range maps."""
    scene = load_scene(scene_dir)
    rems = None
    if not baseline:
        if checkpoint is None:
            raise ConfigError("infer needs --checkpoint (or --baseline)")
        rems = read_checkpoint(_require_file(checkpoint))
        if len(rems) != 2:
            raise IoError(f"{checkpoint}: expected two network records, found {len(rems)}")
    _writable_dir(out_dir)
    stage_cfg = cfg.stage_config()
    views = range(len(scene.images))
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        outs = list(pool.map(lambda r: _infer_view(scene, r, rems, stage_cfg, baseline, shrink), views))
    lo, hi = scene.scene_range
    for r, out in zip(views, outs):
        write_pnm(out_dir / f"view_{r}.ppm", scene.images[r])
        write_camera_file(out_dir / f"view_{r}_cam.txt", scene.cams[r], lo, hi - lo)
        for k, d in enumerate(out.depths):
            write_pfm(out_dir / f"view_{r}_depth_stage{k + 1}.pfm", d)
        for k, u in enumerate(out.uncertainties):
            write_pfm(out_dir / f"view_{r}_unc_stage{k + 1}.pfm", u)
        for k, rng in enumerate(out.ranges):
            stem = out_dir / f"view_{r}_range_stage{k + 2}"
            write_pfm(Path(f"{stem}.min.pfm"), rng.dmin)
            write_pfm(Path(f"{stem}.max.pfm"), rng.dmax)
    return outs


def _view_indices(d: Path, pattern: str) -> list[int]:
    idx = sorted(int(p.name.split("_")[1]) for p in d.glob(pattern))
    if not idx:
        raise IoError(f"no files matching {pattern} in {d}")
    return idx


def cmd_fuse(cfg, depth_dir: Path, out_ply: Path, source: str = "pred"):
    """``source='pred'`` fuses stage-3 predictions; ``'gt'`` fuses ``view_i_depth.pfm`` files."""
    name = "view_{}_depth_stage3.pfm" if source == "pred" else "view_{}_depth.pfm"
    views = _view_indices(depth_dir, name.format("*"))
    depths, cams, images = [], [], []
    for i in views:
        depths.append(read_pfm(_require_file(depth_dir / name.format(i))).astype(np.float64))
        cam, _, _ = read_camera_file(_require_file(depth_dir / f"view_{i}_cam.txt"))
        cams.append(cam)
        img_path = depth_dir / f"view_{i}.ppm"
        images.append(read_pnm(img_path) if img_path.is_file() else np.zeros(depths[-1].shape))
    pc = fuse(depths, cams, images, cfg.fusion_params(), threads=cfg.threads)
    write_ply(pc, out_ply, cfg.get("fusion", "ply_format"))
    return pc


def _load_ranges(d: Path, view: int, stage: int):
    stem = d / f"view_{view}_range_stage{stage}"
    lo, hi = Path(f"{stem}.min.pfm"), Path(f"{stem}.max.pfm")
    if not (lo.is_file() and hi.is_file()):
        return None
    return DepthRangeMap(read_pfm(lo).astype(np.float64), read_pfm(hi).astype(np.float64))


def _scene_pairs(pred_dir: Path, gt_dir: Path) -> list[tuple[Path, Path]]:
    """One scene directory, or a root of scene directories mirrored under ``pred_dir``."""
    if (gt_dir / "scene.json").is_file():
        return [(pred_dir, gt_dir)]
    return [(pred_dir / d.name, d) for d in _scene_dirs(gt_dir)]


def evaluate_dir(pred_dir: Path, gt_dir: Path, stage_cfg) -> dict:
    """Per-method summary: pooled depth errors per stage and range diagnostics per transition.

    Everything is pooled over all views of all scenes, weighted by valid pixels.
    """
    errors = {k: [] for k in range(3)}
    diags = {0: [], 1: []}
    for pdir, gdir in _scene_pairs(pred_dir, gt_dir):
        scene = load_scene(gdir)
        for v in range(len(scene.images)):
            gts, masks = gt_pyramid(scene.depths[v], scene.masks[v])
            for k in range(3):
                path = pdir / f"view_{v}_depth_stage{k + 1}.pfm"
                if not path.is_file() and k == 2:
                    path = pdir / f"view_{v}_depth.pfm"
                if not path.is_file() or not masks[k].any():
                    continue
                pred = read_pfm(path).astype(np.float64)
                errors[k].append(np.abs(pred - gts[k])[masks[k]])
            for t in range(2):
                rng = _load_ranges(pdir, v, t + 2)
                if rng is not None and masks[t + 1].any():
                    diags[t].append(range_diagnostics(rng, gts[t + 1], masks[t + 1]))
    if not errors[2]:
        raise IoError(f"no depth predictions found in {pred_dir}")
    row = {}
    for k in range(3):
        if errors[k]:
            r = np.concatenate(errors[k])
            row[f"mae{k + 1}"] = float(r.mean())
            row[f"rmse{k + 1}"] = float(np.sqrt((r * r).mean()))
    for t in range(2):
        if diags[t]:
            p = pooled_diagnostics(diags[t])
            row[f"range{t + 2}"] = p.mean_length
            row[f"ratio{t + 2}"] = p.coverage
    return row


def cmd_eval(cfg, preds: list[tuple[str, Path]], gt_dir: Path, report_csv: Path, pred_ply=None, gt_ply=None):
    stage_cfg = cfg.stage_config()
    rows = []
    for name, d in preds:
        row = {"method": name}
        row.update(evaluate_dir(d, gt_dir, stage_cfg))
        rows.append(row)
    if pred_ply is not None and gt_ply is not None:
        lo, hi = load_scene(_scene_pairs(gt_dir, gt_dir)[0][1]).scene_range
        spacing3 = _stage3_spacing(stage_cfg, hi - lo)
        cap = cfg.get("eval", "dist_cap_factor") * spacing3
        acc, comp, overall = cloud_metrics(read_ply(_require_file(pred_ply)), read_ply(_require_file(gt_ply)), cap)
        for row in rows:
            row.update(accuracy=acc, completeness=comp, overall=overall)
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    rows = [{k: row.get(k, "") for k in keys} for row in rows]
    write_csv(rows, report_csv)
    return rows


def _stage3_spacing(stage_cfg, scene_len: float) -> float:
    """Nominal stage-3 plane spacing from the nominal interval schedule."""
    length = scene_len
    for s in DEFAULT_SHRINK:
        length *= s
    return length / max(stage_cfg.planes[2] - 1, 1)


def range_table_text(rows: list[dict]) -> str:
    usable = [r for r in rows if all(k in r and r[k] != "" for k in ("range2", "ratio2", "range3", "ratio3"))]
    if not usable:
        return ""
    results = {
        r["method"]: [RangeDiagnostics(r["range2"], r["ratio2"], 0), RangeDiagnostics(r["range3"], r["ratio3"], 0)]
        for r in usable
    }
    return format_range_table(range_table_rows(results))


def cmd_gradcheck(cfg, targets=None, eps: float = 1e-4) -> list[tuple[str, object]]:
    targets = targets or ["rem", "refined", "semi_gradient", "probability", "features"]
    return [(t, grad_check_report(t, seed=cfg.seed, eps=eps)) for t in targets]


# ---------------------------------------------------------------- argument handling


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            k, v = tok[2:], extra[i + 1]
            i += 2
        pairs.append((k, v))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap (default 1)")

    p = argparse.ArgumentParser(prog="cascade-mvs", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render synthetic scenes")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train", parents=[common], help="train the range networks")
    s.add_argument("--scenes", type=Path, help="directory of scenes (default: generate in memory)")
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    s.add_argument("--log", type=Path, help="CSV log path (default: checkpoint with .csv suffix)")
    s.add_argument("--verbose", action="store_true")

    s = sub.add_parser("infer", parents=[common], help="run the cascade on every view of a scene")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--baseline", action="store_true", help="fixed shrink-factor ranges instead of learned ones")
    s.add_argument("--shrink", type=str, default=",".join(repr(x) for x in DEFAULT_SHRINK))

    s = sub.add_parser("fuse", parents=[common], help="fuse depth maps into a PLY cloud")
    s.add_argument("--depths", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--source", choices=("pred", "gt"), default="pred")

    s = sub.add_parser("eval", parents=[common], help="depth, range and cloud metrics")
    s.add_argument("--pred", action="append", required=True, help="NAME=DIR or DIR; repeatable")
    s.add_argument("--gt", type=Path, required=True, help="scene directory, or a root of scene directories")
    s.add_argument("--report", type=Path, required=True)
    s.add_argument("--pred-ply", type=Path)
    s.add_argument("--gt-ply", type=Path)

    s = sub.add_parser("gradcheck", parents=[common], help="compare analytic and numeric gradients")
    s.add_argument("--target", action="append", choices=sorted(GRAD_TARGETS) + ["end_to_end_stage_loss"])
    s.add_argument("--eps", type=float, default=1e-4)

    s = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _split_overrides(extra)
    for name in ("seed", "threads"):
        if name in args:
            overrides.append((name, str(getattr(args, name))))
    cfg = load_config(getattr(args, "config", None), overrides)
    # single-threaded BLAS keeps every reduction order fixed
    with threadpool_limits(limits=1):
        return _dispatch(args, cfg)


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "synth":
        for d in cmd_synth(cfg, args.out):
            print(d)
    elif cmd == "train":
        result = cmd_train(cfg, args.scenes, args.out, args.log, args.verbose)
        last = result.log[-1]
        print(f"trained {int(last['step'])} steps; final total loss {last['total']:.6f}; checkpoint {args.out}")
    elif cmd == "infer":
        shrink = tuple(float(x) for x in args.shrink.split(","))
        cmd_infer(cfg, args.scene, args.checkpoint, args.out, args.baseline, shrink)
        print(args.out)
    elif cmd == "fuse":
        pc = cmd_fuse(cfg, args.depths, args.out, args.source)
        print(f"{len(pc)} points -> {args.out}")
    elif cmd == "eval":
        preds = []
        for item in args.pred:
            name, _, path = item.rpartition("=")
            preds.append((name or Path(path).name, Path(path)))
        rows = cmd_eval(cfg, preds, args.gt, args.report, args.pred_ply, args.gt_ply)
        table = range_table_text(rows)
        if table:
            print(table)
        for row in rows:
            print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    elif cmd == "gradcheck":
        ok = True
        for target, rep in cmd_gradcheck(cfg, args.target, args.eps):
            status = "PASS" if rep.passed else "FAIL"
            ok &= rep.passed
            print(
                f"{status} {target}: max relative error {rep.max_error:.3e} over {rep.checked} entries "
                f"({rep.zeros} structural zeros, max {rep.zero_max:.1e}; {rep.skipped} kink probes skipped)"
            )
        return 0 if ok else 1
    elif cmd == "config":
        print(dump_config(cfg), end="")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (CascadeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
