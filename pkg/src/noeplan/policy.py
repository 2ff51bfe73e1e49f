"""Multi-head planning policy.

Two shaded camera views feed a small encoder-decoder that predicts the forward
log-depth image; the decoder fuses skip connections from every encoder scale.
A second encoder consumes the two views stacked with the predicted depth, and
its features, concatenated with an embedding of attitude and heading, drive a
head that emits three candidate paths, each with a collision score and
per-point relative elevations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, conv2d, matmul, relu, reshape, transposed_conv2d


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 64
    modes: int = 3
    n_points: int = 10
    enc_channels: tuple = (16, 32, 64, 128)
    feature_dim: int = 256
    embed_dim: int = 64
    head_hidden: tuple = (256, 128)
    output_scale: float = 100.0

    def __post_init__(self):
        if self.modes < 2:
            raise ValueError("at least two path modes required")
        if self.image_size % (2 ** len(self.enc_channels)) != 0:
            raise ValueError("image_size must be divisible by the encoder downsampling")

    @property
    def per_mode(self) -> int:
        return 3 * self.n_points + 1 + self.n_points

    @property
    def head_out(self) -> int:
        return self.modes * self.per_mode

    @property
    def bottleneck(self) -> int:
        side = self.image_size // (2 ** len(self.enc_channels))
        return self.enc_channels[-1] * side * side


@dataclass
class PolicyOutput:
    """Network outputs kept as graph tensors so losses can backpropagate."""

    pred_log_depth: Tensor          # (B, 1, S, S)
    mode_paths: tuple               # per mode: (B, N_T, 3), world offsets / output_scale
    mode_collisions: tuple          # per mode: (B, 1)
    mode_elevations: tuple          # per mode: (B, N_T), relative elevation / output_scale
    raw: Tensor                     # (B, head_out)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(config: PolicyConfig, seed: int, dtype=np.float32) -> dict:
    """He fan-in initialization, zero biases; final head layer scaled by 1/10 so
    initial paths start near the current position."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_conv(name, c_out, c_in, k):
        params[f"{name}.w"] = Tensor(_he(rng, (c_out, c_in, k, k), c_in * k * k, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def add_tconv(name, c_in, c_out, k):
        params[f"{name}.w"] = Tensor(_he(rng, (c_in, c_out, k, k), c_in * k * k, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def add_linear(name, d_in, d_out, scale=1.0):
        params[f"{name}.w"] = Tensor(scale * _he(rng, (d_in, d_out), d_in, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    chans = config.enc_channels
    prev = 2
    for i, c in enumerate(chans):
        add_conv(f"depth.enc{i}", c, prev, 4)
        prev = c
    up_out = list(reversed(chans[:-1])) + [8]
    prev = chans[-1]
    for i, c in enumerate(up_out):
        add_tconv(f"depth.up{i}", prev, c, 4)
        if i < len(chans) - 1:
            skip = chans[len(chans) - 2 - i]
            add_conv(f"depth.fuse{i}", c, c + skip, 3)
        prev = c
    add_conv("depth.out", 1, up_out[-1], 3)

    prev = 3
    for i, c in enumerate(chans):
        add_conv(f"feat.enc{i}", c, prev, 4)
        prev = c
    add_linear("feat.fc", config.bottleneck, config.feature_dim)

    add_linear("embed.fc0", 7, config.embed_dim)
    add_linear("embed.fc1", config.embed_dim, config.embed_dim)

    h0, h1 = config.head_hidden
    add_linear("head.fc0", config.feature_dim + config.embed_dim, h0)
    add_linear("head.fc1", h0, h1)
    add_linear("head.out", h1, config.head_out, scale=0.1)
    return params


def count_parameters(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


def _param_dtype(params):
    return params["head.out.w"].data.dtype


def _as_image_tensor(img, config, name, dtype):
    data = np.asarray(img, dtype=dtype)
    if data.ndim == 2:
        data = data[None, None]
    elif data.ndim == 3:
        data = data[:, None]
    s = config.image_size
    if data.shape[-2:] != (s, s):
        raise ValueError(f"{name} must be {s}x{s}, got {data.shape[-2:]}")
    return Tensor(data)


def _linear(params, name, x):
    return matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def predict_depth(forward_shaded, down_shaded, params: dict, config: PolicyConfig) -> Tensor:
    """Log-depth image at input resolution from the two shaded views."""
    dtype = _param_dtype(params)
    fwd = _as_image_tensor(forward_shaded, config, "forward_shaded", dtype)
    down = _as_image_tensor(down_shaded, config, "down_shaded", dtype)
    return _depth_net(concat([fwd, down], axis=1), params, config)


def _depth_net(stacked: Tensor, params: dict, config: PolicyConfig) -> Tensor:
    skips = []
    x = stacked
    for i in range(len(config.enc_channels)):
        x = relu(conv2d(x, params[f"depth.enc{i}.w"], params[f"depth.enc{i}.b"], stride=2, padding="same"))
        skips.append(x)
    n = len(config.enc_channels)
    for i in range(n):
        x = relu(transposed_conv2d(x, params[f"depth.up{i}.w"], params[f"depth.up{i}.b"], stride=2, padding="same"))
        if i < n - 1:
            x = concat([x, skips[n - 2 - i]], axis=1)
            x = relu(conv2d(x, params[f"depth.fuse{i}.w"], params[f"depth.fuse{i}.b"], stride=1, padding="same"))
    return conv2d(x, params["depth.out.w"], params["depth.out.b"], stride=1, padding="same")


def _check_attitude(attitude, dtype):
    att = np.asarray(attitude, dtype=dtype)
    if att.ndim == 1:
        att = att[None]
    norms = np.linalg.norm(att, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off >= 1e-3):
        raise ValueError(f"attitude quaternion norm off by {off.max():.2e} (>= 1e-3)")
    if np.any(off > 1e-6):
        warnings.warn(f"normalizing attitude quaternions (max offset {off.max():.2e})")
    return att / norms[:, None]


def forward(forward_shaded, down_shaded, attitude, heading, params: dict, config: PolicyConfig) -> PolicyOutput:
    """Full policy pass; pure function of (inputs, params)."""
    dtype = _param_dtype(params)
    fwd = _as_image_tensor(forward_shaded, config, "forward_shaded", dtype)
    down = _as_image_tensor(down_shaded, config, "down_shaded", dtype)
    att = _check_attitude(attitude, dtype)
    head_vec = np.asarray(heading, dtype=dtype)
    if head_vec.ndim == 1:
        head_vec = head_vec[None]

    pred_depth = _depth_net(concat([fwd, down], axis=1), params, config)

    x = concat([fwd, down, pred_depth], axis=1)
    for i in range(len(config.enc_channels)):
        x = relu(conv2d(x, params[f"feat.enc{i}.w"], params[f"feat.enc{i}.b"], stride=2, padding="same"))
    feat = relu(_linear(params, "feat.fc", reshape(x, (x.shape[0], config.bottleneck))))

    emb_in = Tensor(np.concatenate([att, head_vec], axis=1))
    emb = relu(_linear(params, "embed.fc0", emb_in))
    emb = relu(_linear(params, "embed.fc1", emb))

    h = concat([feat, emb], axis=1)
    h = relu(_linear(params, "head.fc0", h))
    h = relu(_linear(params, "head.fc1", h))
    raw = _linear(params, "head.out", h)

    b = raw.shape[0]
    n_t = config.n_points
    paths, collisions, elevations = [], [], []
    for m in range(config.modes):
        off = m * config.per_mode
        paths.append(reshape(raw[:, off : off + 3 * n_t], (b, n_t, 3)))
        collisions.append(raw[:, off + 3 * n_t : off + 3 * n_t + 1])
        elevations.append(raw[:, off + 3 * n_t + 1 : off + config.per_mode])
    return PolicyOutput(pred_depth, tuple(paths), tuple(collisions), tuple(elevations), raw)


def decode_world(rel_path: Tensor, current_positions, scale: float) -> Tensor:
    """Graph decode: world = current + scale * rel, batched over (B, N_T, 3)."""
    pos = np.asarray(current_positions, dtype=rel_path.data.dtype)
    if pos.ndim == 1:
        pos = pos[None]
    return rel_path * scale + pos[:, None, :]


def to_world(rel_path, current_position, scale: float) -> np.ndarray:
    """Inference decode of one mode: (N_T, 3) offsets to world positions."""
    rel = np.asarray(rel_path, dtype=np.float64)
    return np.asarray(current_position, dtype=np.float64)[None, :] + scale * rel


def encode_world(world_path, current_position, scale: float) -> np.ndarray:
    """Exact inverse of to_world, used to express labels at network scale."""
    world = np.asarray(world_path, dtype=np.float64)
    return (world - np.asarray(current_position, dtype=np.float64)[None, :]) / scale
