"""Closed-loop evaluation: receding-horizon rollouts, summary metrics, baseline
comparison, and scene exports.

A rollout renders the two shaded views at the current pose with the camera
yawed at the goal, feeds the policy, picks the mode with the lowest predicted
collision cost, executes the first K decoded points, and replans from the
K-th. The heading input is the clamped goal-direction vector so the policy
sees the same input distribution it was trained on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .dataset import DatasetConfig
from .expert import yaw_to_quat
from .policy import PolicyConfig, forward, to_world
from .terrain import ElevationBand, ElevationGrid, grid_to_points, render_shaded, save_ply, terrain_penetration


@dataclass
class EvalConfig:
    n_pairs: int = 20
    min_separation: float = 50.0
    max_separation: float = 100.0
    goal_radius: float = 5.0
    exec_points: int = 3
    max_replans: int = 60
    seed: int = 0
    edge_margin: float = 8.0
    train_region: tuple = (0.0, 0.0, 100.0, 100.0)  # excluded from eval sampling

    def __post_init__(self):
        if not (self.min_separation < self.max_separation):
            raise ValueError("separations must satisfy min < max")
        if self.exec_points < 1:
            raise ValueError("exec_points must be >= 1")


@dataclass
class StepRecord:
    position: tuple
    chosen_mode: int
    collision_preds: tuple


@dataclass
class PairResult:
    index: int
    start: tuple
    goal: tuple
    executed: np.ndarray          # (N, 3)
    length: float = 0.0
    mean_elevation: float = 0.0
    collision: bool = False
    success: bool = False
    steps: list = field(default_factory=list)


@dataclass
class EvalReport:
    pairs: list
    avg_length: float = 0.0
    avg_elevation: float = 0.0
    collision_free_rate: float = 0.0
    success_rate: float = 0.0
    mean_depth_error: float | None = None

    ROW_NAMES = (
        ("Average Path Length (m)", "avg_length"),
        ("Average Path Elevation (m)", "avg_elevation"),
        ("Collision-free Rate", "collision_free_rate"),
        ("Success Rate", "success_rate"),
        ("Mean Depth Error (m)", "mean_depth_error"),
    )


def _in_region(x, y, region):
    x0, y0, x1, y1 = region
    return x0 <= x <= x1 and y0 <= y <= y1


def sample_eval_pairs(grid: ElevationGrid, band: ElevationBand, config: EvalConfig):
    """Seeded rejection sampling of band-valid start/goal pairs outside the
    training region, planar separation within [min, max]."""
    rng = np.random.default_rng(config.seed)
    m = config.edge_margin
    pairs = []
    attempts = 0
    while len(pairs) < config.n_pairs:
        attempts += 1
        if attempts > 200000:
            raise RuntimeError("eval pair sampling did not converge")
        ax = rng.uniform(grid.origin[0] + m, grid.max_x - m)
        ay = rng.uniform(grid.origin[1] + m, grid.max_y - m)
        bx = rng.uniform(grid.origin[0] + m, grid.max_x - m)
        by = rng.uniform(grid.origin[1] + m, grid.max_y - m)
        if _in_region(ax, ay, config.train_region) or _in_region(bx, by, config.train_region):
            continue
        if not (config.min_separation <= math.hypot(bx - ax, by - ay) <= config.max_separation):
            continue
        ea = float(grid.interpolate(ax, ay))
        eb = float(grid.interpolate(bx, by))
        az = rng.uniform(ea + band.min_rel, ea + band.max_rel)
        bz = rng.uniform(eb + band.min_rel, eb + band.max_rel)
        pairs.append((np.array([ax, ay, az]), np.array([bx, by, bz])))
    return pairs


def rollout(params: dict, policy_cfg: PolicyConfig, data_cfg: DatasetConfig,
            start, goal, grid: ElevationGrid, config: EvalConfig, index: int = 0) -> PairResult:
    """Receding-horizon execution from start toward goal; deterministic."""
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if not bool(grid.contains(start[0], start[1])):
        raise ValueError("start outside the map")
    if start[2] <= float(grid.interpolate(start[0], start[1])):
        raise ValueError("start below terrain")

    fwd_cam = data_cfg.forward_camera()
    down_cam = data_cfg.down_camera()
    k = config.exec_points
    pos = start.copy()
    executed: list[np.ndarray] = []
    steps: list[StepRecord] = []
    result = PairResult(index, tuple(start), tuple(goal), np.zeros((0, 3)))

    for _ in range(config.max_replans):
        if math.hypot(goal[0] - pos[0], goal[1] - pos[1]) <= config.goal_radius:
            result.success = True
            break
        if not bool(grid.contains(pos[0], pos[1])):
            break
        if pos[2] <= float(grid.interpolate(pos[0], pos[1])):
            result.collision = True
            break
        yaw = math.atan2(goal[1] - pos[1], goal[0] - pos[0])
        fwd_img = render_shaded(grid, pos, yaw, fwd_cam) / data_cfg.shade_scale
        down_img = render_shaded(grid, pos, yaw, down_cam) / data_cfg.shade_scale
        heading = (goal - pos) / data_cfg.h_const
        norm = float(np.linalg.norm(heading))
        if norm > data_cfg.max_heading_norm:
            heading = heading * (data_cfg.max_heading_norm / norm)
        att = np.asarray(yaw_to_quat(yaw), dtype=np.float32)

        with no_grad():
            out = forward(fwd_img, down_img, att, heading.astype(np.float32), params, policy_cfg)
        collisions = np.array([float(c.data[0, 0]) for c in out.mode_collisions])
        mode = int(np.argmin(collisions))
        world = to_world(out.mode_paths[mode].data[0], pos, policy_cfg.output_scale)
        executed.extend(world[:k])
        steps.append(StepRecord(tuple(pos), mode, tuple(collisions)))
        pos = world[k - 1].copy()
    else:
        # budget exhausted; re-test goal condition at the final pose
        if math.hypot(goal[0] - pos[0], goal[1] - pos[1]) <= config.goal_radius:
            result.success = True

    result.executed = np.asarray(executed).reshape(-1, 3)
    result.steps = steps
    return result


def _interpolate_path(points: np.ndarray, step: float = 0.5) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        seg = float(np.linalg.norm(b - a))
        n = max(1, int(math.ceil(seg / step)))
        for i in range(1, n + 1):
            out.append(a + (b - a) * (i / n))
    return np.asarray(out)


def compute_metrics(pairs: list, grid: ElevationGrid, mean_depth_error=None) -> EvalReport:
    """Per-pair length/elevation/collision plus aggregate means.

    Collision is checked on a 0.5 m interpolation of the executed polyline;
    out-of-map interpolants are skipped (the rollout already aborts there).
    """
    for pr in pairs:
        pts = pr.executed
        if len(pts) == 0:
            pr.length = 0.0
            pr.mean_elevation = float(abs(pr.start[2]))
            continue
        pr.length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
        pr.mean_elevation = float(np.abs(pts[:, 2]).mean())
        dense = _interpolate_path(pts) if len(pts) > 1 else pts
        inside = grid.contains(dense[:, 0], dense[:, 1])
        if inside.any():
            pen = terrain_penetration(grid, dense[inside])
            if np.any(pen > 0.0):
                pr.collision = True

    report = EvalReport(pairs)
    if pairs:
        report.avg_length = float(np.mean([p.length for p in pairs]))
        report.avg_elevation = float(np.mean([p.mean_elevation for p in pairs]))
        report.collision_free_rate = float(np.mean([0.0 if p.collision else 1.0 for p in pairs]))
        report.success_rate = float(np.mean([1.0 if p.success else 0.0 for p in pairs]))
    report.mean_depth_error = mean_depth_error
    return report


def depth_error_meters(params: dict, policy_cfg: PolicyConfig, samples: list,
                       depth_scale: float, max_range: float, batch_size: int = 32) -> float:
    """Mean absolute depth error in meters after de-logging, over held-out views.

    Predictions are clamped to the physical range before exponentiation."""
    lo = math.log(0.1) / depth_scale
    hi = math.log(max_range) / depth_scale
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            fwd = np.stack([s.forward_shaded for s in chunk])
            down = np.stack([s.down_shaded for s in chunk])
            att = np.stack([s.quaternion for s in chunk]).astype(np.float32)
            heading = np.stack([s.heading for s in chunk]).astype(np.float32)
            out = forward(fwd, down, att, heading, params, policy_cfg)
            pred = np.clip(out.pred_log_depth.data[:, 0], lo, hi)
            gt = np.stack([s.gt_log_depth for s in chunk])
            err = np.abs(np.exp(depth_scale * pred) - np.exp(depth_scale * gt))
            total += float(err.sum())
            count += err.size
    return total / count


def compare(report_bc: EvalReport, report_ours: EvalReport) -> dict:
    """Side-by-side table plus relative elevation reduction (unclamped)."""
    rows = []
    for name, attr in EvalReport.ROW_NAMES:
        rows.append((name, getattr(report_bc, attr), getattr(report_ours, attr)))
    reduction = 0.0
    if report_bc.avg_elevation != 0.0:
        reduction = (report_bc.avg_elevation - report_ours.avg_elevation) / report_bc.avg_elevation
    return {"rows": rows, "elevation_reduction": reduction}


# ---------------------------------------------------------------------------
# Report and scene files
# ---------------------------------------------------------------------------


def save_report(report: EvalReport, out_dir, stem: str = "report"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "aggregates": {attr: getattr(report, attr) for _, attr in EvalReport.ROW_NAMES},
        "pairs": [
            {
                "index": p.index,
                "start": list(p.start),
                "goal": list(p.goal),
                "length": p.length,
                "mean_elevation": p.mean_elevation,
                "collision": p.collision,
                "success": p.success,
                "executed": p.executed.tolist(),
                "modes": [s.chosen_mode for s in p.steps],
            }
            for p in report.pairs
        ],
    }
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, attr in EvalReport.ROW_NAMES:
            value = getattr(report, attr)
            writer.writerow([name, "" if value is None else repr(float(value))])
    return out / f"{stem}.json"


def load_report(path) -> EvalReport:
    payload = json.loads(Path(path).read_text())
    pairs = []
    for row in payload["pairs"]:
        pr = PairResult(
            row["index"], tuple(row["start"]), tuple(row["goal"]),
            np.asarray(row["executed"]).reshape(-1, 3),
            length=row["length"], mean_elevation=row["mean_elevation"],
            collision=row["collision"], success=row["success"],
        )
        pairs.append(pr)
    agg = payload["aggregates"]
    return EvalReport(
        pairs,
        avg_length=agg["avg_length"],
        avg_elevation=agg["avg_elevation"],
        collision_free_rate=agg["collision_free_rate"],
        success_rate=agg["success_rate"],
        mean_depth_error=agg.get("mean_depth_error"),
    )


def save_compare(comparison: dict, out_dir, render_figure: bool = True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "bc", "ours"])
        for name, bc_v, ours_v in comparison["rows"]:
            writer.writerow([name, _fmt(bc_v), _fmt(ours_v)])
        writer.writerow(["Elevation Reduction", "", repr(float(comparison["elevation_reduction"]))])
    (out / "compare.json").write_text(json.dumps(
        {
            "rows": [[n, bc_v, ours_v] for n, bc_v, ours_v in comparison["rows"]],
            "elevation_reduction": comparison["elevation_reduction"],
        },
        indent=2, sort_keys=True,
    ))
    if render_figure:
        render_compare_figure(comparison, out / "compare.png")
    return out / "compare.csv"


def _fmt(v):
    return "" if v is None else repr(float(v))


PATH_COLORS = {"expert": (255, 165, 0), "policy": (60, 200, 60), "baseline": (80, 120, 255)}


def export_scene(grid: ElevationGrid, paths: list, goals: list, out_prefix):
    """Terrain PLY, tagged path polylines (PLY + CSV), and a top-down heatmap
    PNG at exactly grid resolution with path overlays.

    paths: iterable of (tag, (N, 3) array); tags choose overlay colors.
    """
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    save_ply(grid_to_points(grid), f"{out_prefix}_terrain.ply", comment="terrain heightfield")

    for i, (tag, pts) in enumerate(paths):
        pts = np.asarray(pts).reshape(-1, 3)
        save_ply(pts, f"{out_prefix}_path{i:02d}_{tag}.ply", comment=f"path tag={tag}")
        with open(f"{out_prefix}_path{i:02d}_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z"])
            for p in pts:
                writer.writerow([repr(float(v)) for v in p])

    import matplotlib

    matplotlib.use("Agg")

    h = grid.heights.astype(np.float64)
    span = h.max() - h.min()
    norm = (h - h.min()) / (span if span > 0 else 1.0)
    rgb = (matplotlib.colormaps["terrain"](norm)[:, :, :3] * 255).astype(np.uint8)

    def paint(x, y, color):
        ix = int(round((x - grid.origin[0]) / grid.cell_size))
        iy = int(round((y - grid.origin[1]) / grid.cell_size))
        if 0 <= ix < grid.width and 0 <= iy < grid.height:
            rgb[iy, ix] = color

    for tag, pts in paths:
        color = PATH_COLORS.get(tag, (255, 255, 255))
        pts = np.asarray(pts).reshape(-1, 3)
        if len(pts) > 1:
            pts = _interpolate_path(pts, step=grid.cell_size / 2)
        for p in pts:
            paint(p[0], p[1], color)
    for g in goals:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                paint(g[0] + dx * grid.cell_size, g[1] + dy * grid.cell_size, (230, 30, 30))

    import matplotlib.pyplot as plt

    plt.imsave(f"{out_prefix}_scene.png", rgb[::-1], origin="upper")
    return Path(f"{out_prefix}_scene.png")


def render_compare_figure(comparison: dict, out_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names, bc_vals, ours_vals = [], [], []
    for name, bc_v, ours_v in comparison["rows"]:
        if bc_v is None or ours_v is None:
            continue
        names.append(name.replace(" (m)", ""))
        bc_vals.append(bc_v)
        ours_vals.append(ours_v)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(x - 0.18, bc_vals, width=0.36, label="BC", color="#5078ff")
    ax.bar(x + 0.18, ours_vals, width=0.36, label="hybrid", color="#3cc83c")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=12, ha="right", fontsize=8)
    ax.set_title(f"elevation reduction: {comparison['elevation_reduction'] * 100:.1f}%")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def render_training_curves(metrics_rows, out_path):
    """Loss-curve figure from per-epoch metric dicts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [m["epoch"] for m in metrics_rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(epochs, [m["train"].total for m in metrics_rows], label="train")
    ax.plot(epochs, [m["val"].total for m in metrics_rows], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
