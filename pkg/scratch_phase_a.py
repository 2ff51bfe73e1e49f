"""Phase A: full-scale demos + dataset, cached to /tmp/noe_cache."""
import json
import time
from pathlib import Path

import numpy as np

from noeplan.terrain import generate_terrain, save_elevation
from noeplan.expert import PlannerParams, generate_demos
from noeplan.dataset import DatasetConfig, build_dataset, save_dataset


def run():
    out = Path("/tmp/noe_cache")
    out.mkdir(exist_ok=True)
    t0 = time.time()
    grid = generate_terrain(7, 200.0, 1.0, 60.0)
    save_elevation(grid, out / "terrain.elev")

    params = PlannerParams(max_iterations=700, rng_seed=7, time_budget=None, rrt_range=40.0)
    results = generate_demos(grid, params, n_demos=160, region=(0, 0, 100, 100),
                             min_sep=50.0, max_sep=100.0, seed=7, jobs=2)
    demos = [r[4] for r in results if r[4] is not None]
    print(f"demos {len(demos)}/160 [{time.time()-t0:.0f}s]", flush=True)
    traces_ok = all(
        all(b[1] <= a[1] + 1e-12 for a, b in zip(d.cost_trace, d.cost_trace[1:]))
        for d in demos
    )
    relz = []
    for d in demos:
        e = grid.interpolate(d.positions[:, 0], d.positions[:, 1])
        relz.extend([(d.positions[:, 2] - e).min(), (d.positions[:, 2] - e).max()])
    print(f"traces_ok={traces_ok} relz range [{min(relz):.3f}, {max(relz):.3f}]", flush=True)

    ds = build_dataset(demos, grid, DatasetConfig(), seed=7)
    save_dataset(ds, out / "dataset")
    print(f"dataset {len(ds)} samples hash {ds.content_hash[:10]} [{time.time()-t0:.0f}s]", flush=True)


if __name__ == "__main__":
    run()
