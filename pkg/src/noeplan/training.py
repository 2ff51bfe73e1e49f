"""Hybrid training objective and trainers.

Behavior cloning supervises the planar motion of the predicted paths through a
relaxed winner-takes-all loss; altitude is supervised directly from the
terrain (a squared pull toward a fixed clearance plus a hinge on penetration).
Auxiliary heads regress collision cost and relative elevation of the network's
own paths against targets computed on those paths and treated as constants, so
no gradient chases moving labels. The BC baseline shares everything but zeroes
the two terrain terms and clones all three coordinates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step, lr_schedule, no_grad, zero_grads
from .dataset import Dataset
from .policy import PolicyConfig, PolicyOutput, count_parameters, decode_world, forward, init_params
from .terrain import ElevationGrid

COLLISION_MARGIN = 5.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    bc: float = 0.5
    c: float = 2.0
    alt: float = 1.0
    depth: float = 1e6
    terrain: float = 1e3
    elevation: float = 1.0
    eps_wta: float = 0.05
    dz_des: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.eps_wta < 1.0):
            raise ValueError(f"eps_wta must be in (0, 1): {self.eps_wta}")
        for name in ("bc", "c", "alt", "depth", "terrain", "elevation"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    bc: float = 0.0
    c: float = 0.0
    alt: float = 0.0
    depth: float = 0.0
    terrain: float = 0.0
    elevation: float = 0.0
    total: float = 0.0

    FIELDS = ("bc", "c", "alt", "depth", "terrain", "elevation", "total")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class Batch:
    forward_shaded: np.ndarray   # (B, S, S)
    down_shaded: np.ndarray
    gt_log_depth: np.ndarray     # (B, 1, S, S)
    attitude: np.ndarray         # (B, 4)
    heading: np.ndarray          # (B, 3)
    labels: np.ndarray           # (B, N_T, 3) world frame
    positions: np.ndarray        # (B, 3)


def make_batch(samples) -> Batch:
    return Batch(
        forward_shaded=np.stack([s.forward_shaded for s in samples]).astype(np.float32),
        down_shaded=np.stack([s.down_shaded for s in samples]).astype(np.float32),
        gt_log_depth=np.stack([s.gt_log_depth for s in samples]).astype(np.float32)[:, None],
        attitude=np.stack([s.quaternion for s in samples]).astype(np.float32),
        heading=np.stack([s.heading for s in samples]).astype(np.float32),
        labels=np.stack([s.labels for s in samples]).astype(np.float32),
        positions=np.stack([s.position for s in samples]).astype(np.float32),
    )


def _clamped_elevations(grid: ElevationGrid, xy: np.ndarray) -> np.ndarray:
    """Terrain height under predicted points; queries clamped onto the map so
    early-training outliers still get a defined (constant) target."""
    x = np.clip(xy[..., 0], grid.origin[0], grid.max_x)
    y = np.clip(xy[..., 1], grid.origin[1], grid.max_y)
    return grid.interpolate(x.ravel(), y.ravel()).reshape(x.shape).astype(xy.dtype)


# ---------------------------------------------------------------------------
# Loss terms (each takes decoded world-frame paths as graph tensors)
# ---------------------------------------------------------------------------


def loss_bc(decoded_modes, labels: np.ndarray, eps_wta: float, planar: bool = True) -> Tensor:
    """Relaxed winner-takes-all imitation: the best mode gets 1 - eps, the rest
    split eps evenly; per sample, planar coordinates only unless planar=False."""
    n_modes = len(decoded_modes)
    b, n_t, _ = labels.shape
    dims = 2 if planar else 3
    # per point: squared planar (or 3-D) distance; per mode: mean over points
    norm = 1.0 / n_t
    per_mode = []
    for path in decoded_modes:
        diff = path[:, :, :dims] - labels[:, :, :dims]
        sq = ad.tsum(diff * diff, axis=(1, 2))
        per_mode.append(ad.reshape(sq * norm, (b, 1)))
    mode_mse = ad.concat(per_mode, axis=1)  # (B, M)
    winners = np.argmin(mode_mse.data, axis=1)
    weights = np.full((b, n_modes), eps_wta / (n_modes - 1), dtype=mode_mse.data.dtype)
    weights[np.arange(b), winners] = 1.0 - eps_wta
    return ad.tsum(mode_mse * weights) * (1.0 / b)


def loss_elevation(decoded_modes, grid: ElevationGrid, dz_des: float) -> Tensor:
    """Squared distance of predicted z to (dz_des + terrain); the terrain query
    is a constant of the current planar prediction, so gradient flows only
    through z."""
    terms = []
    count = 0
    for path in decoded_modes:
        target = _clamped_elevations(grid, path.data[:, :, :2]) + dz_des
        z = path[:, :, 2]
        diff = z - target
        terms.append(ad.tsum(diff * diff))
        count += z.data.size
    return _sum_terms(terms) * (1.0 / count)


def loss_terrain(decoded_modes, grid: ElevationGrid) -> Tensor:
    """Mean hinge on terrain penetration, active only below the surface."""
    terms = []
    count = 0
    for path in decoded_modes:
        e = _clamped_elevations(grid, path.data[:, :, :2])
        z = path[:, :, 2]
        terms.append(ad.tsum(ad.relu(z * -1.0 + e)))
        count += z.data.size
    return _sum_terms(terms) * (1.0 / count)


def loss_collision(pred_collisions, decoded_modes, grid: ElevationGrid,
                   margin: float = COLLISION_MARGIN) -> Tensor:
    """MSE of the collision head against the mean collision cost of the mode's
    own path; targets are detached."""
    targets = []
    for path in decoded_modes:
        e = _clamped_elevations(grid, path.data[:, :, :2])
        clearance = np.maximum(0.0, path.data[:, :, 2] - e)
        cost = np.maximum(0.0, 1.0 - clearance / margin) ** 2
        targets.append(cost.mean(axis=1, keepdims=True).astype(path.data.dtype))
    preds = ad.concat(list(pred_collisions), axis=1)
    return ad.mse(preds, np.concatenate(targets, axis=1))


def loss_altitude(pred_elevations, decoded_modes, grid: ElevationGrid, scale: float) -> Tensor:
    """MSE of the relative-elevation head against (z - terrain) of the mode's
    own path, expressed at network scale; targets are detached."""
    targets = []
    for path in decoded_modes:
        e = _clamped_elevations(grid, path.data[:, :, :2])
        targets.append(((path.data[:, :, 2] - e) / scale).astype(path.data.dtype))
    preds = ad.concat(list(pred_elevations), axis=1)
    return ad.mse(preds, np.concatenate(targets, axis=1))


def loss_depth(pred_log_depth: Tensor, gt_log_depth: np.ndarray) -> Tensor:
    return ad.mse(pred_log_depth, gt_log_depth)


def _sum_terms(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def depth_pretrain_loss(batch: Batch, params: dict, weights: LossWeights, config: PolicyConfig):
    """Depth term alone, skipping the planning heads: cheaper steps for the
    optional depth-first training stage."""
    from .policy import predict_depth

    pred = predict_depth(batch.forward_shaded, batch.down_shaded, params, config)
    l_depth = loss_depth(pred, batch.gt_log_depth)
    total = l_depth * weights.depth
    return total, LossBreakdown(depth=float(l_depth.data), total=float(total.data))


def total_loss(batch: Batch, params: dict, grid: ElevationGrid, weights: LossWeights,
               config: PolicyConfig, bc_planar: bool = True):
    """Forward pass plus the weighted six-term objective.

    Returns (scalar graph tensor, LossBreakdown, PolicyOutput).
    """
    out = forward(batch.forward_shaded, batch.down_shaded, batch.attitude,
                  batch.heading, params, config)
    decoded = [decode_world(p, batch.positions, config.output_scale) for p in out.mode_paths]

    l_bc = loss_bc(decoded, batch.labels, weights.eps_wta, planar=bc_planar)
    l_c = loss_collision(out.mode_collisions, decoded, grid)
    l_alt = loss_altitude(out.mode_elevations, decoded, grid, config.output_scale)
    l_depth = loss_depth(out.pred_log_depth, batch.gt_log_depth)
    l_terrain = loss_terrain(decoded, grid)
    l_elev = loss_elevation(decoded, grid, weights.dz_des)

    total = (
        l_bc * weights.bc + l_c * weights.c + l_alt * weights.alt
        + l_depth * weights.depth + l_terrain * weights.terrain + l_elev * weights.elevation
    )
    breakdown = LossBreakdown(
        bc=float(l_bc.data), c=float(l_c.data), alt=float(l_alt.data),
        depth=float(l_depth.data), terrain=float(l_terrain.data),
        elevation=float(l_elev.data), total=float(total.data),
    )
    return total, breakdown, out


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 130
    early_stop_patience: int = 15
    seed: int = 0
    depth_pretrain_epochs: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)


@dataclass
class TrainResult:
    params: dict
    opt_state: AdamState
    metrics: list            # per-epoch dicts
    best_epoch: int
    best_val_total: float
    steps: int
    config: TrainConfig
    baseline: bool
    effective_weights: LossWeights = field(default_factory=LossWeights)


def _epoch_breakdown(rows_and_sizes) -> LossBreakdown:
    total_n = sum(n for _, n in rows_and_sizes)
    agg = LossBreakdown()
    for bd, n in rows_and_sizes:
        for f in LossBreakdown.FIELDS:
            setattr(agg, f, getattr(agg, f) + getattr(bd, f) * n / total_n)
    return agg


def train(dataset: Dataset, grid: ElevationGrid, config: TrainConfig,
          baseline: bool = False, log=None) -> TrainResult:
    """Train the policy; baseline=True zeroes the terrain-derived terms and
    clones all three coordinates, everything else identical."""
    train_samples = dataset.by_split("train")
    val_samples = dataset.by_split("val")
    if not train_samples:
        raise ValueError("empty training split")
    for s in train_samples + val_samples:
        # relu maps NaN to 0, so bad inputs would train silently; reject here
        for arr in (s.forward_shaded, s.down_shaded, s.gt_log_depth, s.heading, s.labels, s.position):
            if not np.all(np.isfinite(arr)):
                raise TrainingDiverged(f"non-finite values in sample {s.sample_id}")

    weights = LossWeights(**asdict(config.weights))
    bc_planar = True
    if baseline:
        weights.terrain = 0.0
        weights.elevation = 0.0
        bc_planar = False

    params = init_params(config.policy, config.seed)
    opt_state = AdamState()
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, math.ceil(len(train_samples) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch

    metrics = []
    best_val = math.inf
    best_epoch = -1
    best_params = None
    step = 0
    for epoch in range(config.epochs):
        depth_only = epoch < config.depth_pretrain_epochs
        order = rng.permutation(len(train_samples))
        train_rows = []
        lr = config.lr0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = make_batch([train_samples[i] for i in idx])
            zero_grads(params)
            with Tape() as tape:
                if depth_only:
                    loss, bd = depth_pretrain_loss(batch, params, weights, config.policy)
                else:
                    loss, bd, _ = total_loss(batch, params, grid, weights, config.policy, bc_planar)
                if not math.isfinite(bd.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: {bd}"
                    )
                tape.backward(loss)
            lr = lr_schedule(step, total_steps, config.lr0)
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, opt_state, lr, weight_decay=config.weight_decay)
            train_rows.append((bd, len(idx)))
            step += 1

        val_rows = []
        with no_grad():
            for lo in range(0, len(val_samples), config.batch_size):
                batch = make_batch(val_samples[lo : lo + config.batch_size])
                _, bd, _ = total_loss(batch, params, grid, weights, config.policy, bc_planar)
                val_rows.append((bd, batch.positions.shape[0]))
        train_bd = _epoch_breakdown(train_rows)
        val_bd = _epoch_breakdown(val_rows) if val_rows else train_bd
        if not math.isfinite(val_bd.total):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}: {val_bd}")
        metrics.append({"epoch": epoch, "lr": lr, "train": train_bd, "val": val_bd})
        if log:
            log(f"epoch {epoch:3d} lr {lr:.2e} train {train_bd.total:.4f} val {val_bd.total:.4f}")

        if val_bd.total < best_val - 1e-12:
            best_val = val_bd.total
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        elif epoch - best_epoch >= config.early_stop_patience and not depth_only:
            break

    if best_params is not None:
        for k, p in params.items():
            p.data = best_params[k]
    return TrainResult(params, opt_state, metrics, best_epoch, best_val, step, config, baseline, weights)


def train_bc_baseline(dataset: Dataset, grid: ElevationGrid, config: TrainConfig, log=None) -> TrainResult:
    return train(dataset, grid, config, baseline=True, log=log)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def save_metrics_csv(metrics, path):
    fields = LossBreakdown.FIELDS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr"] + [f"train_{f}" for f in fields] + [f"val_{f}" for f in fields])
        for row in metrics:
            writer.writerow(
                [row["epoch"], repr(row["lr"])]
                + [repr(v) for v in row["train"].as_row()]
                + [repr(v) for v in row["val"].as_row()]
            )


def save_policy_bundle(out_dir, result: TrainResult, dataset_hash: str):
    """Checkpoint plus a manifest tying the weights to their dataset and config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / ("baseline.noew" if result.baseline else "policy.noew")
    ad.save_checkpoint(ckpt, result.params, result.opt_state, result.steps)
    manifest = {
        "policy_config": asdict(result.config.policy),
        "loss_weights": asdict(result.effective_weights),
        "train_config": {
            k: v for k, v in asdict(result.config).items() if k not in ("weights", "policy")
        },
        "baseline": result.baseline,
        "dataset_hash": dataset_hash,
        "best_epoch": result.best_epoch,
        "best_val_total": result.best_val_total,
        "parameter_count": count_parameters(result.params),
    }
    manifest_path = out / ("baseline_manifest.json" if result.baseline else "policy_manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    save_metrics_csv(result.metrics, out / ("baseline_metrics.csv" if result.baseline else "metrics.csv"))
    return ckpt, manifest_path


def load_policy_bundle(ckpt_path):
    ckpt_path = Path(ckpt_path)
    params, opt_state, step = ad.load_checkpoint(ckpt_path)
    name = "baseline_manifest.json" if ckpt_path.stem == "baseline" else "policy_manifest.json"
    manifest = json.loads((ckpt_path.parent / name).read_text())
    config = PolicyConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in manifest["policy_config"].items()
    })
    return params, config, manifest
