"""Phase B: train one policy on the cached dataset, then quick eval."""
import sys
import time
from pathlib import Path

import numpy as np

from noeplan.terrain import load_elevation, ElevationBand
from noeplan.dataset import DatasetConfig, load_dataset
from noeplan.training import TrainConfig, train, save_policy_bundle
from noeplan.evaluation import (EvalConfig, sample_eval_pairs, rollout, compute_metrics,
                                depth_error_meters)


def run():
    baseline = "--baseline" in sys.argv
    epochs = int(sys.argv[1])
    lr0 = float(sys.argv[2])
    pretrain = int(sys.argv[3])
    tag = "bc" if baseline else "hyb"

    cache = Path("/tmp/noe_cache")
    grid = load_elevation(cache / "terrain.elev")
    ds = load_dataset(cache / "dataset", verify_hash=False)
    band = ElevationBand()
    dcfg = ds.config

    t0 = time.time()
    tcfg = TrainConfig(epochs=epochs, lr0=lr0, depth_pretrain_epochs=pretrain,
                       seed=7, early_stop_patience=15)
    result = train(ds, grid, tcfg, baseline=baseline,
                   log=lambda m: print(f"  {tag} {m} [{time.time()-t0:.0f}s]", flush=True))
    save_policy_bundle(cache / f"train_{tag}", result, ds.content_hash)
    print(f"{tag} trained: best={result.best_val_total:.2f} @ {result.best_epoch} [{time.time()-t0:.0f}s]", flush=True)

    derr = depth_error_meters(result.params, tcfg.policy, ds.by_split("val"),
                              dcfg.depth_scale, dcfg.max_range)
    print(f"{tag} depth err: {derr:.3f} m", flush=True)

    ecfg = EvalConfig(n_pairs=8, seed=7)
    pairs = sample_eval_pairs(grid, band, ecfg)
    prs = [rollout(result.params, tcfg.policy, dcfg, s, g, grid, ecfg, index=i)
           for i, (s, g) in enumerate(pairs)]
    rep = compute_metrics(prs, grid, mean_depth_error=derr)
    relz = []
    for p in prs:
        if len(p.executed):
            e = grid.interpolate(np.clip(p.executed[:, 0], 0, grid.max_x),
                                 np.clip(p.executed[:, 1], 0, grid.max_y))
            relz.append(float((p.executed[:, 2] - e).mean()))
    print(f"{tag}: len={rep.avg_length:.1f} elev={rep.avg_elevation:.2f} relz={np.mean(relz):.2f} "
          f"collfree={rep.collision_free_rate:.2f} success={rep.success_rate:.2f} [{time.time()-t0:.0f}s]", flush=True)


if __name__ == "__main__":
    run()
