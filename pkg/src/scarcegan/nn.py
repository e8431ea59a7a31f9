"""Small dense-network substrate: layers, batch norm, Adam, LR decay, checkpoints.

Everything runs in float64 on numpy arrays shaped (batch, features). Layers
cache their inputs on ``forward`` and consume the cache on ``backward``;
gradients are returned, never accumulated on the layer, so a caller can sum
contributions from several heads before handing them to the optimizer.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "relu", "softmax", "identity")

CHECKPOINT_MAGIC = b"SGNN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = as_matrix(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    # Jacobian-vector product of the row-wise softmax
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "leaky_relu":
        return leaky_relu(pre)
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "softmax":
        return softmax(pre)
    if activation == "identity":
        return pre
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(pre: np.ndarray, out: np.ndarray, d_out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "leaky_relu":
        return np.where(pre > 0, d_out, LEAKY_SLOPE * d_out)
    if activation == "relu":
        return np.where(pre > 0, d_out, 0.0)
    if activation == "softmax":
        return softmax_backward(out, d_out)
    if activation == "identity":
        return d_out
    raise ValueError(f"unknown activation {activation!r}")


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Dense:
    """Fully connected layer ``act(x @ W + b)``."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = glorot_uniform(n_in, n_out, rng)
        self.b = np.zeros(n_out)
        self.activation = activation
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.n_in:
            raise ShapeError(
                f"input of shape {x.shape} does not match layer weights of shape {self.W.shape}"
            )
        pre = x @ self.W + self.b
        out = activate(pre, self.activation)
        self._cache = (x, pre, out)
        return out

    def backward(self, d_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        x, pre, out = self._cache
        d_pre = activation_backward(pre, out, d_out, self.activation)
        grads = {"W": x.T @ d_pre, "b": d_pre.sum(axis=0)}
        return grads, d_pre @ self.W.T


class BatchNorm:
    """Per-feature batch normalization with running statistics for inference."""

    def __init__(self, n: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train: bool = True) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"input of shape {x.shape} does not match batch norm width {self.gamma.shape[0]}")
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            # in-place so checkpoint/buffer views stay valid
            self.running_mean *= m
            self.running_mean += (1 - m) * mean
            self.running_var *= m
            self.running_var += (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, train)
        return self.gamma * x_hat + self.beta

    def backward(self, d_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        x_hat, inv_std, train = self._cache
        grads = {"gamma": np.sum(d_out * x_hat, axis=0), "beta": d_out.sum(axis=0)}
        d_hat = d_out * self.gamma
        if not train:
            return grads, d_hat * inv_std
        n = d_out.shape[0]
        dx = (inv_std / n) * (n * d_hat - d_hat.sum(axis=0) - x_hat * np.sum(d_hat * x_hat, axis=0))
        return grads, dx


@dataclass
class LRSchedule:
    """Exponential decay: ``initial_rate * decay_rate ** (step / decay_steps)``."""

    initial_rate: float = 1e-3
    decay_rate: float = 0.96
    decay_steps: int = 1000
    staircase: bool = False

    def __post_init__(self):
        if self.initial_rate <= 0:
            raise ValueError("initial_rate must be positive")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")

    def rate(self, step: int) -> float:
        p = step / self.decay_steps
        if self.staircase:
            p = math.floor(p)
        return self.initial_rate * self.decay_rate**p


@dataclass
class Adam:
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place from ``grads`` (same keys, same shapes)."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for k, g in grads.items():
            if k not in params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != params[k].shape:
                raise ShapeError(f"gradient {k} has shape {g.shape}, parameter has {params[k].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = param[i]
        param[i] = orig + h
        fp = f()
        param[i] = orig - h
        fm = f()
        param[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


# -- checkpoint format ------------------------------------------------------
#
# magic(4) | version u32 | header_len u32 | header (utf-8 json) |
# n_arrays u32 | per array: name_len u32, name, ndim u32, dims u32*ndim, f64 data
# All integers and floats little-endian.


def _write_u32(f: BinaryIO, n: int) -> None:
    f.write(struct.pack("<I", n))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def write_arrays(f: BinaryIO, arrays: dict[str, np.ndarray], header: str = "{}") -> None:
    f.write(CHECKPOINT_MAGIC)
    _write_u32(f, CHECKPOINT_VERSION)
    hb = header.encode("utf-8")
    _write_u32(f, len(hb))
    f.write(hb)
    _write_u32(f, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        _write_u32(f, len(nb))
        f.write(nb)
        _write_u32(f, arr.ndim)
        for d in arr.shape:
            _write_u32(f, d)
        f.write(arr.tobytes(order="C"))


def read_arrays(f: BinaryIO) -> tuple[str, dict[str, np.ndarray]]:
    if f.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = _read_u32(f)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = f.read(_read_u32(f)).decode("utf-8")
    arrays = {}
    for _ in range(_read_u32(f)):
        name = f.read(_read_u32(f)).decode("utf-8")
        shape = tuple(_read_u32(f) for _ in range(_read_u32(f)))
        n = int(np.prod(shape)) if shape else 1
        raw = f.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"truncated data for array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays


def arrays_to_bytes(arrays: dict[str, np.ndarray], header: str = "{}") -> bytes:
    buf = io.BytesIO()
    write_arrays(buf, arrays, header)
    return buf.getvalue()


def adam_arrays(opt: Adam, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}.step": np.array([float(opt.step_count)])}
    for k in opt.m:
        out[f"{prefix}.m.{k}"] = opt.m[k]
        out[f"{prefix}.v.{k}"] = opt.v[k]
    return out


def adam_from_arrays(arrays: dict[str, np.ndarray], prefix: str, beta1: float, beta2: float, eps: float) -> Adam:
    opt = Adam(beta1=beta1, beta2=beta2, eps=eps)
    opt.step_count = int(arrays[f"{prefix}.step"][0])
    for name, arr in arrays.items():
        if name.startswith(f"{prefix}.m."):
            k = name[len(prefix) + 3:]
            opt.m[k] = arr.copy()
            opt.v[k] = arrays[f"{prefix}.v.{k}"].copy()
    return opt
