"""Command-line pipeline: terrain gen, expert demos, dataset build, train,
eval, compare, export, gradcheck.

Every subcommand resolves one JSON config, echoes it into the output
directory as config.lock.json, and exits 0 on success, 2 on validation
errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, terrain, training
from .config import ConfigError, load_config, write_lock
from .dataset import build_dataset, load_dataset, save_dataset
from .expert import ExpertPath, PlannerParams, generate_demos
from .policy import init_params

log = logging.getLogger("noeplan")


def _setup_logging():
    level = os.environ.get("NOE_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _out_dir(args, cfg, name):
    if args.out:
        out = Path(args.out)
    else:
        digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:8]
        out = Path("runs") / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}-{digest}"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_terrain(path):
    if not Path(path).exists():
        raise ConfigError(f"terrain file not found: {path}")
    return terrain.load_elevation(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_terrain_gen(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args, cfg, "terrain")
    t = cfg["terrain"]
    grid = terrain.generate_terrain(cfg["seed"], t["extent"], t["cell_size"], t["relief"])
    terrain.save_elevation(grid, out / "terrain.elev")
    evaluation.export_scene(grid, [], [], out / "terrain")
    write_lock(cfg, out)
    log.info("terrain %dx%d cells -> %s", grid.width, grid.height, out)
    print(out / "terrain.elev")
    return 0


def cmd_expert_demos(args) -> int:
    cfg = load_config(args.config, args.seed)
    grid = _load_terrain(args.terrain)
    out = _out_dir(args, cfg, "demos")
    params = cfgmod.make_planner_params(cfg)
    e = cfg["expert"]
    results = generate_demos(
        grid, params, e["n_demos"], tuple(e["train_region"]),
        e["min_separation"], e["max_separation"], cfg["seed"],
        jobs=args.jobs, retries=e["retries"],
    )
    manifest = {"demos": [], "n_requested": e["n_demos"], "terrain": str(args.terrain)}
    kept = 0
    for index, start, goal, seed, path in results:
        if path is None:
            log.warning("pair %d: planning failed, dropped", index)
            manifest["demos"].append({"index": index, "failed": True, "seed": seed})
            continue
        name = f"demo_{index:04d}.csv"
        path.save_csv(out / name)
        manifest["demos"].append({
            "index": index,
            "file": name,
            "seed": seed,
            "cost": path.cost,
            "cost_trace": path.cost_trace,
            "n_samples": len(path),
            "start": [start.x, start.y, start.z, start.yaw],
            "goal": [goal.x, goal.y, goal.z, goal.yaw],
        })
        kept += 1
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    write_lock(cfg, out)
    log.info("%d/%d demos planned -> %s", kept, e["n_demos"], out)
    if kept == 0:
        raise RuntimeError("no demonstration could be planned")
    return 0


def cmd_dataset_build(args) -> int:
    cfg = load_config(args.config, args.seed)
    grid = _load_terrain(args.terrain)
    demos_dir = Path(args.demos)
    manifest_path = demos_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"demos manifest not found in {demos_dir}")
    manifest = json.loads(manifest_path.read_text())
    demos = [
        ExpertPath.load_csv(demos_dir / row["file"])
        for row in manifest["demos"]
        if not row.get("failed")
    ]
    out = _out_dir(args, cfg, "dataset")
    ds = build_dataset(demos, grid, cfgmod.make_dataset_config(cfg), cfg["seed"],
                       terrain_ref=str(args.terrain))
    save_dataset(ds, out)
    write_lock(cfg, out)
    log.info("dataset %d samples hash %s -> %s", len(ds), ds.content_hash[:12], out)
    print(ds.content_hash)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    grid = _load_terrain(args.terrain)
    ds = load_dataset(args.dataset)
    if args.resume:
        manifest_file = Path(args.resume).parent / (
            "baseline_manifest.json" if Path(args.resume).stem == "baseline" else "policy_manifest.json"
        )
        if not manifest_file.exists():
            raise ConfigError(f"no manifest next to checkpoint {args.resume}")
        prev = json.loads(manifest_file.read_text())
        if prev["dataset_hash"] != ds.content_hash:
            raise ConfigError(
                f"checkpoint was trained on dataset {prev['dataset_hash'][:12]}, "
                f"given {ds.content_hash[:12]}"
            )
    out = _out_dir(args, cfg, "train")
    tcfg = cfgmod.make_train_config(cfg)
    result = training.train(ds, grid, tcfg, baseline=args.baseline, log=log.info)
    ckpt, manifest = training.save_policy_bundle(out, result, ds.content_hash)
    evaluation.render_training_curves(
        result.metrics, out / ("baseline_curves.png" if args.baseline else "curves.png")
    )
    write_lock(cfg, out)
    log.info("trained %s best epoch %d val %.4f -> %s",
             "baseline" if args.baseline else "hybrid", result.best_epoch,
             result.best_val_total, ckpt)
    print(ckpt)
    return 0


def _rollout_pair(task):
    (index, start, goal), params, pcfg, dcfg, grid, ecfg = task
    return evaluation.rollout(params, pcfg, dcfg, start, goal, grid, ecfg, index=index)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    grid = _load_terrain(args.terrain)
    params, pcfg, manifest = training.load_policy_bundle(args.checkpoint)
    dcfg = cfgmod.make_dataset_config(cfg)
    ecfg = cfgmod.make_eval_config(cfg)
    band = cfgmod.make_band(cfg)
    depth_err = None
    if args.dataset:
        ds = load_dataset(args.dataset)
        if manifest["dataset_hash"] != ds.content_hash:
            raise ConfigError("checkpoint/dataset hash mismatch")
        depth_err = evaluation.depth_error_meters(
            params, pcfg, ds.by_split("val"), dcfg.depth_scale, dcfg.max_range
        )
    pairs = evaluation.sample_eval_pairs(grid, band, ecfg)
    tasks = [((i, s, g), params, pcfg, dcfg, grid, ecfg) for i, (s, g) in enumerate(pairs)]
    if args.jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(args.jobs) as pool:
            results = pool.map(_rollout_pair, tasks)
    else:
        results = [_rollout_pair(t) for t in tasks]
    results.sort(key=lambda r: r.index)
    report = evaluation.compute_metrics(results, grid, mean_depth_error=depth_err)
    out = _out_dir(args, cfg, "eval")
    evaluation.save_report(report, out)
    evaluation.export_scene(
        grid,
        [("policy", r.executed) for r in results if len(r.executed)],
        [r.goal for r in results],
        out / "eval",
    )
    write_lock(cfg, out)
    log.info("eval: len %.1f m, elev %.2f m, collision-free %.0f%%, success %.0f%% -> %s",
             report.avg_length, report.avg_elevation,
             100 * report.collision_free_rate, 100 * report.success_rate, out)
    print(out / "report.json")
    return 0


def cmd_compare(args) -> int:
    bc = evaluation.load_report(args.bc)
    ours = evaluation.load_report(args.ours)
    comparison = evaluation.compare(bc, ours)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.save_compare(comparison, out)
    print(f"elevation reduction: {comparison['elevation_reduction'] * 100:.2f}%")
    return 0


def cmd_export(args) -> int:
    grid = _load_terrain(args.terrain)
    paths = []
    for spec in args.path or []:
        tag, _, file = spec.partition("=")
        if not file:
            raise ConfigError(f"--path must be tag=file.csv, got {spec}")
        rows = Path(file).read_text().splitlines()[1:]
        pts = np.array([[float(v) for v in r.split(",")[:3]] for r in rows])
        paths.append((tag, pts))
    if args.report:
        report = evaluation.load_report(args.report)
        for r in report.pairs:
            if len(r.executed):
                paths.append(("policy", r.executed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png = evaluation.export_scene(grid, paths, [], out / "scene")
    print(png)
    return 0


def cmd_gradcheck(args) -> int:
    from .autodiff import Tensor, gradient_check, mse, relu, tsum

    rng = np.random.default_rng(0)
    worst = {}
    a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    worst["matmul"] = gradient_check(lambda: tsum(a @ b), {"a": a, "b": b})
    c = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    worst["relu+mse"] = gradient_check(lambda: mse(relu(c), np.ones((3, 4))), {"c": c})
    from .autodiff import conv2d, transposed_conv2d

    x = Tensor(rng.standard_normal((1, 2, 8, 8)) * 0.5, requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 4, 4)) * 0.5, requires_grad=True)
    worst["conv2d"] = gradient_check(lambda: tsum(conv2d(x, w, stride=2, padding="same")), {"x": x, "w": w})
    wt = Tensor(rng.standard_normal((2, 3, 4, 4)) * 0.5, requires_grad=True)
    worst["tconv2d"] = gradient_check(lambda: tsum(transposed_conv2d(x, wt, stride=2, padding="same")), {"x": x, "wt": wt})

    ok = True
    for name, err in worst.items():
        status = "ok" if err <= 1e-3 else "FAIL"
        if err > 1e-3:
            ok = False
        print(f"{name}: max rel err {err:.3e} [{status}]")
    if not ok:
        raise RuntimeError("gradient check failed")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p, terrain_arg=False):
    p.add_argument("--config", default=None, help="JSON config path (defaults built in)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--force", action="store_true", help="allow non-empty output directory")
    if terrain_arg:
        p.add_argument("--terrain", required=True, help="terrain .elev file")


def build_parser():
    parser = argparse.ArgumentParser(prog="noeplan",
                                     description="terrain-aware low-altitude planning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    terrain_p = sub.add_parser("terrain", help="terrain tools")
    terrain_sub = terrain_p.add_subparsers(dest="subcommand", required=True)
    gen = terrain_sub.add_parser("gen", help="generate procedural terrain")
    _add_common(gen)
    gen.set_defaults(func=cmd_terrain_gen)

    expert_p = sub.add_parser("expert", help="expert planner tools")
    expert_sub = expert_p.add_subparsers(dest="subcommand", required=True)
    demos = expert_sub.add_parser("demos", help="plan expert demonstrations")
    _add_common(demos, terrain_arg=True)
    demos.add_argument("--jobs", type=int, default=1)
    demos.set_defaults(func=cmd_expert_demos)

    dataset_p = sub.add_parser("dataset", help="dataset tools")
    dataset_sub = dataset_p.add_subparsers(dest="subcommand", required=True)
    build = dataset_sub.add_parser("build", help="render training samples from demos")
    _add_common(build, terrain_arg=True)
    build.add_argument("--demos", required=True)
    build.set_defaults(func=cmd_dataset_build)

    train_p = sub.add_parser("train", help="train the policy")
    _add_common(train_p, terrain_arg=True)
    train_p.add_argument("--dataset", required=True)
    train_p.add_argument("--baseline", action="store_true", help="pure behavior cloning")
    train_p.add_argument("--resume", default=None, help="checkpoint to validate against")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="closed-loop evaluation")
    _add_common(eval_p, terrain_arg=True)
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--dataset", default=None, help="dataset dir for depth error")
    eval_p.add_argument("--jobs", type=int, default=1)
    eval_p.set_defaults(func=cmd_eval)

    compare_p = sub.add_parser("compare", help="compare two eval reports")
    compare_p.add_argument("--bc", required=True)
    compare_p.add_argument("--ours", required=True)
    compare_p.add_argument("--out", required=True)
    compare_p.set_defaults(func=cmd_compare)

    export_p = sub.add_parser("export", help="export scene files")
    export_p.add_argument("--terrain", required=True)
    export_p.add_argument("--path", action="append", help="tag=file.csv (repeatable)")
    export_p.add_argument("--report", default=None, help="eval report.json to overlay")
    export_p.add_argument("--out", required=True)
    export_p.set_defaults(func=cmd_export)

    grad_p = sub.add_parser("gradcheck", help="finite-difference engine check")
    grad_p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("validation error: %s", exc)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        log.error("validation error: %s", exc)
        return 2
    except Exception as exc:  # planning/training/runtime failures
        log.error("runtime failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
