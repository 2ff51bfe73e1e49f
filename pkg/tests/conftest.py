"""Session fixtures for the acceptance suite: the desk-scale end-to-end
experiment, the flat-world convergence experiment, and shared helpers.

These are expensive (the headline run trains two policies from scratch) and
session-scoped; only the acceptance tests request them.
"""

import math
import time

import numpy as np
import pytest

from noeplan.dataset import DatasetConfig, build_dataset
from noeplan.evaluation import (
    EvalConfig,
    compute_metrics,
    depth_error_meters,
    rollout,
    sample_eval_pairs,
)
from noeplan.expert import ExpertPath, PlannerParams, generate_demos, yaw_to_quat
from noeplan.terrain import ElevationBand, ElevationGrid, generate_terrain
from noeplan.training import TrainConfig, train


def _run_policy_eval(result, policy_cfg, data_cfg, pairs, grid, ecfg, dataset):
    prs = [
        rollout(result.params, policy_cfg, data_cfg, start, goal, grid, ecfg, index=i)
        for i, (start, goal) in enumerate(pairs)
    ]
    derr = depth_error_meters(
        result.params, policy_cfg, dataset.by_split("val"),
        data_cfg.depth_scale, data_cfg.max_range,
    )
    return compute_metrics(prs, grid, mean_depth_error=derr)


@pytest.fixture(scope="session")
def headline():
    """Desk-scale end-to-end: terrain, >=100 expert demos, dataset, hybrid and
    BC policies with identical seeds/configs, 20 unseen-region rollouts each."""
    t0 = time.time()
    grid = generate_terrain(7, 200.0, 1.0, 60.0)
    band = ElevationBand()

    planner = PlannerParams(max_iterations=700, rng_seed=7, time_budget=None, rrt_range=40.0)
    demo_results = generate_demos(
        grid, planner, n_demos=160, region=(0, 0, 100, 100),
        min_sep=50.0, max_sep=100.0, seed=7, jobs=2,
    )
    demos = [r[4] for r in demo_results if r[4] is not None]
    assert len(demos) >= 100, f"only {len(demos)} demos planned"

    data_cfg = DatasetConfig()
    dataset = build_dataset(demos, grid, data_cfg, seed=7)

    train_cfg = TrainConfig(epochs=65, lr0=3e-4, depth_pretrain_epochs=20,
                            seed=7, early_stop_patience=12)
    hybrid = train(dataset, grid, train_cfg)
    baseline = train(dataset, grid, train_cfg, baseline=True)

    ecfg = EvalConfig(n_pairs=20, seed=7)
    pairs = sample_eval_pairs(grid, band, ecfg)
    report_hybrid = _run_policy_eval(hybrid, train_cfg.policy, data_cfg, pairs, grid, ecfg, dataset)
    report_bc = _run_policy_eval(baseline, train_cfg.policy, data_cfg, pairs, grid, ecfg, dataset)

    return {
        "grid": grid,
        "band": band,
        "demos": demos,
        "dataset": dataset,
        "hybrid": hybrid,
        "baseline": baseline,
        "report_hybrid": report_hybrid,
        "report_bc": report_bc,
        "elapsed": time.time() - t0,
    }


def straight_flat_demo(origin, direction, length, z, step=0.15):
    n = int(round(length / step)) + 1
    ss = np.arange(n) * step
    positions = np.stack(
        [origin[0] + ss * math.cos(direction), origin[1] + ss * math.sin(direction),
         np.full(n, z)], axis=1,
    )
    quats = np.tile(yaw_to_quat(direction), (n, 1))
    return ExpertPath(np.arange(n) * 0.03, positions, quats, step)


@pytest.fixture(scope="session")
def flatworld():
    """Flat terrain at height h with synthetic demonstrations labeled at
    h + 10: the hybrid should settle near h + dz_des, the baseline near the
    labels."""
    h = 12.0
    grid = ElevationGrid((0, 0), 1.0, np.full((201, 201), h, dtype=np.float32))
    band = ElevationBand()
    rng = np.random.default_rng(3)
    demos = []
    for _ in range(24):
        ox = rng.uniform(20, 90)
        oy = rng.uniform(20, 90)
        direction = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(60, 90)
        end_x = ox + length * math.cos(direction)
        end_y = oy + length * math.sin(direction)
        if not (15 < end_x < 185 and 15 < end_y < 185):
            continue
        demos.append(straight_flat_demo((ox, oy), direction, length, z=h + 10.0))
    data_cfg = DatasetConfig()
    dataset = build_dataset(demos, grid, data_cfg, seed=3)

    train_cfg = TrainConfig(epochs=40, lr0=3e-4, depth_pretrain_epochs=6,
                            seed=3, early_stop_patience=40)
    hybrid = train(dataset, grid, train_cfg)
    baseline = train(dataset, grid, train_cfg, baseline=True)

    ecfg = EvalConfig(n_pairs=6, seed=3, train_region=(0.0, 0.0, 100.0, 100.0))
    pairs = sample_eval_pairs(grid, band, ecfg)

    def mean_executed_z(result):
        zs = []
        for i, (start, goal) in enumerate(pairs):
            pr = rollout(result.params, train_cfg.policy, data_cfg, start, goal, grid, ecfg, index=i)
            if len(pr.executed):
                zs.append(float(pr.executed[:, 2].mean()))
        return float(np.mean(zs))

    return {
        "h": h,
        "hybrid_z": mean_executed_z(hybrid),
        "baseline_z": mean_executed_z(baseline),
    }
