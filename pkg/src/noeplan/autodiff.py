"""Minimal reverse-mode differentiation on numpy arrays.

A Tape records operations in execution order; backward replays them in exact
reverse, accumulating gradients additively. No graph optimization: every op is
a plain closure over saved arrays, so the engine stays auditable and the
finite-difference harness can check each primitive in isolation.

Training runs in float32; gradient checks build float64 tensors for tight
tolerances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"NOEW"
CHECKPOINT_VERSION = 1

_ACTIVE_TAPE = None
_GRAD_ENABLED = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def item(self):
        return float(self.data)


class Tape:
    """Operation recorder; ``backward`` traverses in exact reverse order."""

    def __init__(self):
        self.ops = []
        self.params = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def register(self, name, tensor):
        self.params[name] = tensor

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self.ops):
            if out.grad is not None:
                backward_fn(out.grad)


class no_grad:
    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _record(out, inputs, backward_fn):
    if _ACTIVE_TAPE is not None and _GRAD_ENABLED and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        _ACTIVE_TAPE.ops.append((out, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b):
    b_t = b if isinstance(b, Tensor) else None
    b_data = b.data if b_t is not None else np.asarray(b, dtype=a.data.dtype)
    out = Tensor(a.data + b_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b_t is not None and b_t.requires_grad:
            b_t._accumulate(_unbroadcast(g, b_t.data.shape))

    return _record(out, (a, b_t), backward)


def mul(a: Tensor, b):
    b_t = b if isinstance(b, Tensor) else None
    b_data = b.data if b_t is not None else np.asarray(b, dtype=a.data.dtype)
    out = Tensor(a.data * b_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b_data, a.data.shape))
        if b_t is not None and b_t.requires_grad:
            b_t._accumulate(_unbroadcast(g * a.data, b_t.data.shape))

    return _record(out, (a, b_t), backward)


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _record(out, (a, b), backward)


def relu(a: Tensor):
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _record(out, (a,), backward)


def concat(tensors, axis: int):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                t._accumulate(g[tuple(idx)])

    return _record(out, tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), backward)


def mse(a: Tensor, b):
    """Mean squared error over all elements; either side may be constant."""
    b_t = b if isinstance(b, Tensor) else None
    b_data = b.data if b_t is not None else np.asarray(b, dtype=a.data.dtype)
    diff = a.data - b_data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n, dtype=a.data.dtype))

    def backward(g):
        scale = 2.0 * g / n
        if a.requires_grad:
            a._accumulate((scale * diff).astype(a.data.dtype))
        if b_t is not None and b_t.requires_grad:
            b_t._accumulate((-scale * diff).astype(b_data.dtype))

    return _record(out, (a, b_t), backward)


def narrow(a: Tensor, key):
    out = Tensor(a.data[key])

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accumulate(buf)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape):
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _record(out, (a,), backward)


def mean(a: Tensor):
    return mul(tsum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2
    return int(padding), int(padding)


def _unfold(xp, k, stride):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _fold(cols, padded_shape, k, stride):
    """Adjoint of _unfold: scatter-add windows back onto the padded plane."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    n_h, n_w = cols.shape[2], cols.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * n_h : stride, j : j + stride * n_w : stride] += cols[
                :, :, :, :, i, j
            ]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="same"):
    """2-D convolution, NCHW; weight (O, C, k, k); padding 'same', 'valid' or int."""
    bn, c, h_in, w_in = x.data.shape
    o, c_w, kh, kw = w.data.shape
    if c != c_w or kh != kw:
        raise ValueError(f"incompatible conv shapes x={x.shape} w={w.shape}")
    k = kh
    pt, pb = _pad_amounts(h_in, k, stride, padding)
    pl, pr = _pad_amounts(w_in, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _unfold(xp, k, stride)  # (B, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bn * ho * wo, c * k * k)
    w2 = w.data.reshape(o, -1)
    y = cols @ w2.T
    if b is not None:
        y += b.data
    out = Tensor(np.ascontiguousarray(y.reshape(bn, ho, wo, o).transpose(0, 3, 1, 2)))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bn * ho * wo, o)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(bn, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = _fold(gcols, xp.shape, k, stride)
            x._accumulate(gxp[:, :, pt : pt + h_in, pl : pl + w_in])

    return _record(out, (x, w, b), backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, padding="same"):
    """Adjoint of conv2d with the same stride/padding; weight (C_in, C_out, k, k).

    With padding 'same' the output is exactly stride times the input size.
    """
    bn, ci, h_in, w_in = x.data.shape
    ci_w, co, kh, kw = w.data.shape
    if ci != ci_w or kh != kw:
        raise ValueError(f"incompatible tconv shapes x={x.shape} w={w.shape}")
    k = kh
    if padding == "same":
        out_h, out_w = h_in * stride, w_in * stride
    elif padding == "valid":
        out_h, out_w = (h_in - 1) * stride + k, (w_in - 1) * stride + k
    else:
        p = int(padding)
        out_h, out_w = (h_in - 1) * stride + k - 2 * p, (w_in - 1) * stride + k - 2 * p
    pt, pb = _pad_amounts(out_h, k, stride, padding)
    pl, pr = _pad_amounts(out_w, k, stride, padding)

    cols = (
        np.tensordot(x.data, w.data, axes=([1], [0]))  # (B, H, W, Co, k, k)
        .transpose(0, 3, 1, 2, 4, 5)
    )
    yp = _fold(cols, (bn, co, out_h + pt + pb, out_w + pl + pr), k, stride)
    y = yp[:, :, pt : pt + out_h, pl : pl + out_w]
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y))

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = _unfold(gp, k, stride)  # (B, Co, H, W, k, k)
        if x.requires_grad:
            gx = np.einsum("bohwij,coij->bchw", win, w.data, optimize=True)
            x._accumulate(gx.astype(x.data.dtype))
        if w.requires_grad:
            gw = np.einsum("bchw,bohwij->coij", x.data, win, optimize=True)
            w._accumulate(gw.astype(w.data.dtype))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _record(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with decoupled weight decay; mutates params in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay to zero over total_steps, floored at lr0 / 100."""
    frac = 1.0 - step / max(1, total_steps)
    return max(lr0 * frac, lr0 / 100.0)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _write_array_block(fh, name: str, arr: np.ndarray):
    encoded = name.encode()
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def _read_array_block(fh):
    (name_len,) = struct.unpack("<I", fh.read(4))
    name = fh.read(name_len).decode()
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, params: dict, opt_state: AdamState | None, step: int):
    """NOEW binary: named f32 parameter list, optimizer moments, step counter."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_array_block(fh, name, params[name].data)
        if opt_state is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", 2 * len(opt_state.m) + 1))
            _write_array_block(fh, "__t", np.array([opt_state.t], dtype=np.float32))
            for name in sorted(opt_state.m):
                _write_array_block(fh, name + ".m", opt_state.m[name])
                _write_array_block(fh, name + ".v", opt_state.v[name])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", fh.read(8))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_params):
            name, data = _read_array_block(fh)
            params[name] = Tensor(data, requires_grad=True)
        (n_state,) = struct.unpack("<I", fh.read(4))
        opt_state = None
        if n_state:
            opt_state = AdamState()
            for _ in range(n_state):
                name, data = _read_array_block(fh)
                if name == "__t":
                    opt_state.t = int(data[0])
                elif name.endswith(".m"):
                    opt_state.m[name[:-2]] = data
                else:
                    opt_state.v[name[:-2]] = data
    return params, opt_state, step


# ---------------------------------------------------------------------------
# Finite-difference harness
# ---------------------------------------------------------------------------


def gradient_check(loss_fn, params: dict, probes_per_param=4, eps=1e-5, seed=0):
    """Compare tape gradients against central differences at sampled entries.

    loss_fn() must build and return the scalar loss from the current values of
    ``params``. Returns the worst relative error over all probes.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            idx = rng.choice(n, size=min(probes_per_param, n), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(loss_fn().data)
                flat[i] = orig - eps
                lo = float(loss_fn().data)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(analytic[name].reshape(-1)[i])
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
                worst = max(worst, err)
    return worst
