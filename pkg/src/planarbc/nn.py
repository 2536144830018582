"""Small reverse-mode neural-net stack, sized for the visuomotor policy.

Exactly the layers the policy needs, nothing generic: strided cross-
correlation (im2col + one BLAS gemm per pass), rectifier, fully-connected,
spatial soft-argmax, stable sigmoid, Adam, a finite-difference gradient
checker, and a binary checkpoint format. Tensors are plain numpy arrays,
channels-first (C, H, W); float32 is the training precision, float64 the
verification precision for gradient checks.

Every layer owns its parameters inside a ParamStore and accumulates
gradients there; backward passes are hand-derived and covered by the
finite-difference harness in the tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

CHECKPOINT_MAGIC = "planarbc-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class CheckpointError(RuntimeError):
    """Checkpoint file malformed, truncated, or version-incompatible."""


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with matching gradient buffers.

    Iteration order is insertion order and therefore deterministic for a
    fixed build sequence, which makes optimizer sweeps and checkpoint
    layouts reproducible.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0

    @property
    def size(self) -> int:
        return sum(p.size for p in self._params.values())

    def as_vector(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.reshape(-1).astype(np.float64)
                               for p in self._params.values()])

    def grads_as_vector(self) -> np.ndarray:
        if not self._grads:
            return np.zeros(0)
        return np.concatenate([g.reshape(-1).astype(np.float64)
                               for g in self._grads.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        """Copy a flat vector back into the stored tensors, in place."""
        if vec.size != self.size:
            raise ShapeError(f"vector has {vec.size} entries, store holds {self.size}")
        k = 0
        for p in self._params.values():
            chunk = vec[k:k + p.size].reshape(p.shape)
            np.copyto(p, chunk.astype(p.dtype))
            k += p.size


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def uniform_init(shape, lo: float = -0.01, hi: float = 0.01,
                 rng: Optional[np.random.Generator] = None,
                 dtype=np.float32) -> np.ndarray:
    """Seeded i.i.d. uniform tensor in [lo, hi)."""
    if lo >= hi:
        raise ValueError("lo must be < hi")
    if rng is None:
        rng = np.random.default_rng(0)
    return rng.uniform(lo, hi, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


class Conv2d:
    """Strided 2D cross-correlation with bias. Input (N, C, H, W)."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, padding: str = "valid",
                 rng=None, dtype=np.float32):
        if padding not in ("valid", "same"):
            raise ValueError("padding must be 'valid' or 'same'")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.W = store.add(f"{name}.W",
                           uniform_init((out_ch, in_ch, kernel, kernel),
                                        rng=rng, dtype=dtype))
        self.b = store.add(f"{name}.b",
                           uniform_init((out_ch,), rng=rng, dtype=dtype))
        self._store, self._name = store, name
        self._cache = None

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return -(-h // self.stride), -(-w // self.stride)
        ho = _conv_out_dim(h, self.kernel, self.stride)
        wo = _conv_out_dim(w, self.kernel, self.stride)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv kernel {self.kernel} stride {self.stride} does not fit {h}x{w}")
        return ho, wo

    def _im2col(self, x: np.ndarray, ho: int, wo: int) -> np.ndarray:
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        sn, sc, sh, sw = x.strides
        view = np.lib.stride_tricks.as_strided(
            x, shape=(n, c, k, k, ho, wo),
            strides=(sn, sc, sh, sw, sh * s, sw * s), writeable=False)
        # (N, Ho, Wo, C, k, k) -> rows are receptive fields
        return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expected (N,{self.in_ch},H,W), got {x.shape}")
        n, _, h, w = x.shape
        ho, wo = self.out_shape(h, w)
        if self.padding == "same":
            ph = _same_padding(h, self.kernel, self.stride)
            pw = _same_padding(w, self.kernel, self.stride)
            x = np.pad(x, ((0, 0), (0, 0), ph, pw))
        else:
            ph = pw = (0, 0)
        cols = self._im2col(x, ho, wo)
        wf = self.W.reshape(self.out_ch, -1)
        y = cols @ wf.T + self.b
        self._cache = (cols, x.shape, ph, pw, ho, wo)
        return y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray, need_dx: bool = True) -> np.ndarray:
        cols, padded_shape, ph, pw, ho, wo = self._cache
        n, c = padded_shape[0], padded_shape[1]
        k, s = self.kernel, self.stride
        dyf = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        g = self._store.grad
        g(f"{self._name}.b")[...] += dyf.sum(axis=0)
        g(f"{self._name}.W")[...] += (dyf.T @ cols).reshape(self.W.shape)
        if not need_dx:
            return None
        dcols = dyf @ self.W.reshape(self.out_ch, -1)
        dcols = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        span_h = (ho - 1) * s + 1
        span_w = (wo - 1) * s + 1
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + span_h:s, kj:kj + span_w:s] += dcols[:, :, ki, kj]
        h0, w0 = ph[0], pw[0]
        h1 = padded_shape[2] - ph[1]
        w1 = padded_shape[3] - pw[1]
        return dxp[:, :, h0:h1, w0:w1]


class Linear:
    """y = x Wᵀ + b over the last axis. Input (N, D_in)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng=None, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        self.W = store.add(f"{name}.W", uniform_init((d_out, d_in), rng=rng, dtype=dtype))
        self.b = store.add(f"{name}.b", uniform_init((d_out,), rng=rng, dtype=dtype))
        self._store, self._name = store, name
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"linear expected (N,{self.d_in}), got {x.shape}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        g = self._store.grad
        g(f"{self._name}.W")[...] += dy.T @ self._x
        g(f"{self._name}.b")[...] += dy.sum(axis=0)
        return dy @ self.W


class ReLU:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""

    def __init__(self):
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return np.where(x > 0, x, np.zeros((), dtype=x.dtype))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._x > 0, dy, np.zeros((), dtype=dy.dtype))


class SpatialSoftArgmax:
    """Per-channel softmax-weighted expected pixel coordinate.

    Input (N, C, H, W); output (N, 2C), channel c contributing
    (x_c, y_c) at slots (2c, 2c+1). Coordinates span [-1, 1] linearly
    across pixel centers: x along width, y along height (row 0 is y=-1).
    """

    def __init__(self, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self._cache = None

    def forward(self, maps: np.ndarray) -> np.ndarray:
        if maps.ndim != 4 or maps.shape[2] < 2 or maps.shape[3] < 2:
            raise ShapeError(f"soft-argmax needs (N,C,H>=2,W>=2), got {maps.shape}")
        n, c, h, w = maps.shape
        z = maps.reshape(n, c, h * w) / np.asarray(self.temperature, dtype=maps.dtype)
        z = z - z.max(axis=2, keepdims=True)
        e = np.exp(z)
        weights = e / e.sum(axis=2, keepdims=True)
        xs = np.linspace(-1.0, 1.0, w, dtype=maps.dtype)
        ys = np.linspace(-1.0, 1.0, h, dtype=maps.dtype)
        # Antisymmetrize so mirrored pixels carry exactly opposite coordinates.
        xs = (xs - xs[::-1]) * 0.5
        ys = (ys - ys[::-1]) * 0.5
        grid_x = np.tile(xs, h)                      # (H*W,) x of each pixel
        grid_y = np.repeat(ys, w)
        out = np.empty((n, 2 * c), dtype=maps.dtype)
        out[:, 0::2] = weights @ grid_x
        out[:, 1::2] = weights @ grid_y
        self._cache = (weights, grid_x, grid_y, maps.shape)
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        weights, grid_x, grid_y, shape = self._cache
        n, c, h, w = shape
        dx = dy[:, 0::2]                             # (N, C)
        dyc = dy[:, 1::2]
        x_c = weights @ grid_x                       # (N, C)
        y_c = weights @ grid_y
        dz = weights * (
            (grid_x[None, None, :] - x_c[..., None]) * dx[..., None]
            + (grid_y[None, None, :] - y_c[..., None]) * dyc[..., None])
        return (dz / self.temperature).reshape(shape).astype(dy.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output y."""
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One Adam update from the gradients currently held in the store.

    Bias-corrected moments, epsilon outside the square root; optional
    decoupled weight decay shrinks each parameter by (1 - lr*wd) before
    the moment update touches it.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in store.items():
        g = store.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay:
            p *= (1.0 - state.lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[bool], float], store: ParamStore,
               step=1e-5, max_entries: int = 10000,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central differences.

    ``fn(want_grad)`` evaluates the scalar loss at the store's current
    parameters; when want_grad it must also leave gradients in the store.
    Checks every entry, or a seeded random subset when the store exceeds
    ``max_entries``. Relative error uses max(|a|, |b|, 1e-8) as denominator.
    Run with float64 parameters; float32 drowns the finite differences.

    ``step`` may be a sequence of step sizes; each entry then scores its
    best (smallest) error over the steps. A rectifier kink inside the
    larger window corrupts that difference while a smaller window stays
    clean, so the min rescues entries the larger step would misreport.
    """
    store.zero_grads()
    fn(True)
    analytic = store.grads_as_vector()
    theta = store.as_vector()
    steps = tuple(step) if isinstance(step, (tuple, list)) else (float(step),)
    n = theta.size
    if n > max_entries:
        idx = np.random.default_rng(seed).choice(n, size=max_entries, replace=False)
        idx.sort()
    else:
        idx = np.arange(n)
    worst = 0.0
    for i in idx:
        orig = theta[i]
        a = analytic[i]
        best = np.inf
        for h in steps:
            theta[i] = orig + h
            store.load_vector(theta)
            lp = fn(False)
            theta[i] = orig - h
            store.load_vector(theta)
            lm = fn(False)
            theta[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            best = min(best, err)
        worst = max(worst, best)
    store.load_vector(theta)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path, metadata: Optional[dict] = None) -> None:
    """One file: a JSON manifest line, then little-endian raw tensor blobs."""
    entries = []
    offset = 0
    blobs = []
    for name, p in store.items():
        dtype = "<f8" if p.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(p, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(p.shape),
                        "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
                "params": entries, "metadata": metadata or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n")
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path, store: Optional[ParamStore] = None):
    """Read a checkpoint; returns (store, metadata).

    With an existing store, values are copied in place and names/shapes
    must match exactly; otherwise a fresh store is built.
    """
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(header)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint manifest: {e}") from None
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a parameter checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} unsupported")
    total = sum(e["nbytes"] for e in manifest["params"])
    if len(blob) != total:
        raise CheckpointError(
            f"checkpoint blob is {len(blob)} bytes, manifest declares {total}")
    fresh = store is None
    if fresh:
        store = ParamStore()
    names = store.names()
    if not fresh and names != [e["name"] for e in manifest["params"]]:
        raise CheckpointError("checkpoint parameters do not match the store")
    for e in manifest["params"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        if fresh:
            store.add(e["name"], arr)
        else:
            p = store[e["name"]]
            if list(p.shape) != e["shape"]:
                raise CheckpointError(f"shape mismatch for {e['name']}")
            np.copyto(p, arr.astype(p.dtype))
    return store, manifest.get("metadata", {})
