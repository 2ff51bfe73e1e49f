"""Demonstrations to training samples: anchor resampling, heading vectors,
label windows, and rendered observations.

Anchors sit at exact arclength multiples of the anchor spacing along each
demonstration; labels are the next N_T anchor positions in world coordinates
(conversion to the network's relative frame happens at training time).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .expert import ExpertPath, yaw_to_quat
from .terrain import CameraModel, ElevationGrid, render_depth, render_shaded

RECORD_MAGIC = b"NOES"
RECORD_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    anchor_spacing: float = 10.0      # meters between anchors
    heading_steps: int = 750          # fine steps of lookahead for the heading vector
    n_points: int = 10                # label path length
    h_const: float = 100.0            # heading normalization divisor
    depth_scale: float = 10.0         # log-depth divisor
    shade_scale: float = 1.0          # intensity divisor (identity for [0, 1] renders)
    fine_step: float = 0.15
    image_size: int = 64
    horizontal_fov: float = math.pi / 2
    max_range: float = 40.0
    down_tilt: float = -math.pi / 6
    train_fraction: float = 0.8

    def __post_init__(self):
        for name in ("anchor_spacing", "heading_steps", "n_points", "h_const",
                     "depth_scale", "shade_scale", "fine_step", "max_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def lookahead(self) -> float:
        return self.heading_steps * self.fine_step

    @property
    def max_heading_norm(self) -> float:
        return self.lookahead / self.h_const

    def forward_camera(self) -> CameraModel:
        return CameraModel((self.image_size, self.image_size), self.horizontal_fov, self.max_range, 0.0)

    def down_camera(self) -> CameraModel:
        return CameraModel((self.image_size, self.image_size), self.horizontal_fov, self.max_range, self.down_tilt)


@dataclass
class TrainingSample:
    sample_id: str
    position: np.ndarray        # (3,)
    quaternion: np.ndarray      # (4,) yaw-only attitude
    heading: np.ndarray         # (3,) lookahead displacement / h_const
    labels: np.ndarray          # (N_T, 3) world positions
    forward_shaded: np.ndarray  # (S, S) float32
    down_shaded: np.ndarray
    gt_log_depth: np.ndarray

    def to_bytes(self) -> bytes:
        out = [RECORD_MAGIC, struct.pack("<I", RECORD_VERSION)]
        pose = np.concatenate([self.position, self.quaternion]).astype("<f8")
        out.append(pose.tobytes())
        out.append(self.heading.astype("<f8").tobytes())
        out.append(struct.pack("<I", len(self.labels)))
        out.append(self.labels.astype("<f8").tobytes())
        for img in (self.forward_shaded, self.down_shaded, self.gt_log_depth):
            h, w = img.shape
            out.append(struct.pack("<II", w, h))
            out.append(img.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, sample_id: str, raw: bytes) -> "TrainingSample":
        if raw[:4] != RECORD_MAGIC:
            raise ValueError(f"bad sample record magic for {sample_id}")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != RECORD_VERSION:
            raise ValueError(f"unsupported sample record version {version}")
        off = 8
        pose = np.frombuffer(raw, "<f8", 7, off)
        off += 56
        heading = np.frombuffer(raw, "<f8", 3, off)
        off += 24
        (n_t,) = struct.unpack_from("<I", raw, off)
        off += 4
        labels = np.frombuffer(raw, "<f8", 3 * n_t, off).reshape(n_t, 3)
        off += 24 * n_t
        images = []
        for _ in range(3):
            w, h = struct.unpack_from("<II", raw, off)
            off += 8
            images.append(np.frombuffer(raw, "<f4", w * h, off).reshape(h, w).copy())
            off += 4 * w * h
        return cls(sample_id, pose[:3].copy(), pose[3:].copy(), heading.copy(),
                   labels.copy(), *images)


@dataclass
class Dataset:
    samples: list
    train_ids: list
    val_ids: list
    config: DatasetConfig
    content_hash: str
    terrain_ref: str = ""

    def __len__(self):
        return len(self.samples)

    def by_split(self, split: str):
        ids = self.train_ids if split == "train" else self.val_ids
        lookup = {s.sample_id: s for s in self.samples}
        return [lookup[i] for i in ids]


# ---------------------------------------------------------------------------
# Anchor and label construction
# ---------------------------------------------------------------------------


def _interp_yaw(a: float, b: float, frac: float) -> float:
    diff = math.remainder(b - a, 2 * math.pi)
    return a + frac * diff


def resample_states(path: ExpertPath, spacing: float):
    """Anchor poses at cumulative arclength 0, d, 2d, ...; partial tail dropped.

    Returns (positions (K, 3), yaws (K,), fine_indices (K,)): fine_indices are
    the nearest demonstration samples, used for heading lookups.
    """
    arc = path.arclengths()
    total = arc[-1]
    count = int(total / spacing + 1e-9) + 1
    yaws = path.yaws()
    positions = np.empty((count, 3))
    out_yaws = np.empty(count)
    fine_idx = np.empty(count, dtype=np.int64)
    for k in range(count):
        s = k * spacing
        j = int(np.searchsorted(arc, s, side="right"))
        j = min(j, len(arc) - 1)
        i = max(j - 1, 0)
        seg = arc[j] - arc[i]
        frac = 0.0 if seg <= 0 else (s - arc[i]) / seg
        positions[k] = path.positions[i] + frac * (path.positions[j] - path.positions[i])
        out_yaws[k] = _interp_yaw(yaws[i], yaws[j], frac)
        fine_idx[k] = i if frac < 0.5 else j
    return positions, out_yaws, fine_idx


def heading_vector(path: ExpertPath, fine_index: int, heading_steps: int, h_const: float):
    """Lookahead displacement over heading_steps fine samples, divided by h_const;
    the lookahead index clamps to the final sample near the path end."""
    t = int(fine_index)
    ahead = min(t + heading_steps, len(path) - 1)
    return (path.positions[ahead] - path.positions[t]) / h_const


def label_positions(anchor_positions, index: int, n_points: int):
    """The next n_points anchor positions from index; the last anchor repeats
    as padding past the end."""
    k = len(anchor_positions)
    rows = [anchor_positions[min(index + j, k - 1)] for j in range(n_points)]
    return np.asarray(rows)


def render_sample(position, yaw: float, grid: ElevationGrid, config: DatasetConfig):
    """Forward shaded + depth and downward shaded views at a demonstration pose."""
    fwd_cam = config.forward_camera()
    down_cam = config.down_camera()
    forward_shaded = render_shaded(grid, position, yaw, fwd_cam) / config.shade_scale
    down_shaded = render_shaded(grid, position, yaw, down_cam) / config.shade_scale
    depth = render_depth(grid, position, yaw, fwd_cam)
    gt_log_depth = np.log(depth) / config.depth_scale
    return forward_shaded.astype(np.float32), down_shaded.astype(np.float32), gt_log_depth.astype(np.float32)


def build_dataset(demos, grid: ElevationGrid, config: DatasetConfig, seed: int,
                  terrain_ref: str = "") -> Dataset:
    """Render and label every anchor of every demonstration; 80/20 seeded split."""
    if not demos:
        raise ValueError("no demonstrations provided")
    samples = []
    for di, demo in enumerate(demos):
        positions, yaws, fine_idx = resample_states(demo, config.anchor_spacing)
        for ai in range(len(positions)):
            heading = heading_vector(demo, fine_idx[ai], config.heading_steps, config.h_const)
            labels = label_positions(positions, ai, config.n_points)
            fwd_img, down_img, depth_img = render_sample(positions[ai], yaws[ai], grid, config)
            samples.append(
                TrainingSample(
                    sample_id=f"d{di:04d}a{ai:03d}",
                    position=positions[ai].copy(),
                    quaternion=np.asarray(yaw_to_quat(yaws[ai])),
                    heading=np.asarray(heading),
                    labels=labels,
                    forward_shaded=fwd_img,
                    down_shaded=down_img,
                    gt_log_depth=depth_img,
                )
            )
    samples.sort(key=lambda s: s.sample_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(samples))
    n_train = int(round(config.train_fraction * len(samples)))
    train_ids = sorted(samples[i].sample_id for i in perm[:n_train])
    val_ids = sorted(samples[i].sample_id for i in perm[n_train:])
    ds = Dataset(samples, train_ids, val_ids, config, "", terrain_ref)
    ds.content_hash = compute_content_hash(ds)
    return ds


def compute_content_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(ds.config), sort_keys=True).encode())
    h.update(json.dumps({"train": ds.train_ids, "val": ds.val_ids}, sort_keys=True).encode())
    for s in ds.samples:
        h.update(s.sample_id.encode())
        h.update(s.to_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# On-disk layout: manifest.json plus one binary record per sample
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        (out / f"{s.sample_id}.noes").write_bytes(s.to_bytes())
    manifest = {
        "version": RECORD_VERSION,
        "config": asdict(ds.config),
        "n_samples": len(ds.samples),
        "content_hash": ds.content_hash,
        "terrain_ref": ds.terrain_ref,
        "split": {"train": ds.train_ids, "val": ds.val_ids},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(in_dir, verify_hash: bool = True) -> Dataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    config = DatasetConfig(**manifest["config"])
    sample_ids = sorted(manifest["split"]["train"] + manifest["split"]["val"])
    samples = [
        TrainingSample.from_bytes(sid, (src / f"{sid}.noes").read_bytes())
        for sid in sample_ids
    ]
    ds = Dataset(
        samples,
        manifest["split"]["train"],
        manifest["split"]["val"],
        config,
        manifest["content_hash"],
        manifest.get("terrain_ref", ""),
    )
    if verify_hash and compute_content_hash(ds) != manifest["content_hash"]:
        raise ValueError(f"dataset content hash mismatch in {in_dir}")
    return ds
