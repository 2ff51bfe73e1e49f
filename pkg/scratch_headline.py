"""Scratch driver: reduced-scale headline experiment to tune the acceptance config."""
import sys, time, json
import numpy as np

from noeplan.terrain import generate_terrain, ElevationBand
from noeplan.expert import PlannerParams, generate_demos
from noeplan.dataset import DatasetConfig, build_dataset
from noeplan.training import TrainConfig, train
from noeplan.policy import PolicyConfig
from noeplan.evaluation import (EvalConfig, sample_eval_pairs, rollout, compute_metrics,
                                compare, depth_error_meters)

def run():
    n_demos = int(sys.argv[1]) if len(sys.argv) > 1 else 30
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
    n_pairs = int(sys.argv[3]) if len(sys.argv) > 3 else 8

    t0 = time.time()
    grid = generate_terrain(7, 200.0, 1.0, 60.0)
    band = ElevationBand()
    print(f"terrain: mean={grid.heights.mean():.1f} median={np.median(grid.heights):.1f}", flush=True)

    params = PlannerParams(max_iterations=700, rng_seed=7, time_budget=None, rrt_range=40.0)
    results = generate_demos(grid, params, n_demos=n_demos, region=(0, 0, 100, 100),
                             min_sep=50.0, max_sep=100.0, seed=7, jobs=2)
    demos = [r[4] for r in results if r[4] is not None]
    relzs, zs = [], []
    for d in demos:
        e = grid.interpolate(d.positions[:, 0], d.positions[:, 1])
        relzs.append((d.positions[:, 2] - e).mean())
        zs.append(d.positions[:, 2].mean())
    print(f"demos: {len(demos)}/{n_demos} ok, mean rel-z {np.mean(relzs):.2f}, mean z {np.mean(zs):.2f} [{time.time()-t0:.0f}s]", flush=True)

    dcfg = DatasetConfig()
    ds = build_dataset(demos, grid, dcfg, seed=7)
    print(f"dataset: {len(ds)} samples ({len(ds.train_ids)} train) [{time.time()-t0:.0f}s]", flush=True)

    tcfg = TrainConfig(epochs=epochs, seed=7, early_stop_patience=15)
    hyb = train(ds, grid, tcfg, log=lambda m: print("  H", m, flush=True))
    print(f"hybrid trained best={hyb.best_val_total:.3f} @ {hyb.best_epoch} [{time.time()-t0:.0f}s]", flush=True)
    bas = train(ds, grid, tcfg, baseline=True, log=lambda m: print("  B", m, flush=True))
    print(f"baseline trained best={bas.best_val_total:.3f} @ {bas.best_epoch} [{time.time()-t0:.0f}s]", flush=True)

    ecfg = EvalConfig(n_pairs=n_pairs, seed=7)
    pairs = sample_eval_pairs(grid, band, ecfg)
    reports = {}
    for name, result in (("hybrid", hyb), ("bc", bas)):
        prs = [rollout(result.params, tcfg.policy, dcfg, s, g, grid, ecfg, index=i)
               for i, (s, g) in enumerate(pairs)]
        derr = depth_error_meters(result.params, tcfg.policy, ds.by_split("val"), dcfg.depth_scale, dcfg.max_range)
        rep = compute_metrics(prs, grid, mean_depth_error=derr)
        reports[name] = rep
        relz = []
        for p in prs:
            if len(p.executed):
                e = grid.interpolate(np.clip(p.executed[:,0], 0, grid.max_x), np.clip(p.executed[:,1], 0, grid.max_y))
                relz.append(float((p.executed[:,2]-e).mean()))
        print(f"{name}: len={rep.avg_length:.1f} elev={rep.avg_elevation:.2f} relz={np.mean(relz):.2f} "
              f"collfree={rep.collision_free_rate:.2f} success={rep.success_rate:.2f} depth_err={rep.mean_depth_error:.2f} "
              f"[{time.time()-t0:.0f}s]", flush=True)

    c = compare(reports["bc"], reports["hybrid"])
    print(f"ELEVATION REDUCTION: {c['elevation_reduction']*100:.1f}%  "
          f"length ratio: {reports['hybrid'].avg_length/max(reports['bc'].avg_length,1e-9):.3f}", flush=True)
    print(f"total {time.time()-t0:.0f}s")

if __name__ == '__main__':
    run()
