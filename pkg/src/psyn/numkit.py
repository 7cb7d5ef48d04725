"""Flat-vector numerics, seeded RNG streams and a small differentiable model zoo.

Every model keeps its parameters in one flat float64 vector so that the
synchronization strategies can treat all models alike.  Losses are means over
the minibatch:

* ``linear``   -- half mean squared error, ``0.5 * mean((X w - y)**2)``
* ``logistic`` -- mean binary cross entropy on logits
* ``mlp``      -- ReLU hidden layers, linear output, either softmax cross
  entropy (``loss="xent"``, integer class targets) or half squared error
  (``loss="mse"``)

Linear and logistic models have no bias term.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InputError, NumericError

# stream ids for the keyed generator; worker i uses stream i
INIT_STREAM = 0
DATA_STREAM = 1 << 40
SPLIT_STREAM = 2 << 40
SHUFFLE_STREAM = 3 << 40
WARMSTART_STREAM = 4 << 40

MODEL_KINDS = ("linear", "logistic", "mlp")
_LOSSES = {"linear": ("mse",), "logistic": ("bce",), "mlp": ("xent", "mse")}


def rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    Philox output depends only on the key and counter, so sequences are the
    same on every platform numpy supports.
    """
    if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
        raise InputError("seed and stream_id must be unsigned 64-bit integers")
    return np.random.Generator(np.random.Philox(key=(stream_id << 64) | seed))


# ---------------------------------------------------------------------------
# vectors


def as_params(values, name: str = "params") -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray, what: str = "vectors") -> None:
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch between {what}: {a.shape} vs {b.shape}")


def axpby(a: float, x: np.ndarray, b: float, y: np.ndarray) -> np.ndarray:
    _check_dims(x, y)
    return a * x + b * y


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Inner product summed strictly left to right."""
    _check_dims(x, y)
    # cumsum accumulates sequentially, unlike np.sum which is pairwise
    return float(np.cumsum(x * y)[-1])


def norm2(x: np.ndarray) -> float:
    return float(np.sqrt(dot(x, x)))


# ---------------------------------------------------------------------------
# models


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class Gradient:
    values: np.ndarray
    sample_count: int

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Model:
    kind: str
    layer_dims: tuple[int, ...]
    params: np.ndarray = field(repr=False)
    loss: str = ""

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InputError(f"unknown model kind {self.kind!r}")
        dims = tuple(int(d) for d in self.layer_dims)
        if any(d < 1 for d in dims) or len(dims) < 2:
            raise InputError(f"bad layer_dims {self.layer_dims}")
        if self.kind != "mlp" and (len(dims) != 2 or dims[1] != 1):
            raise InputError(f"{self.kind} model needs layer_dims (d, 1)")
        object.__setattr__(self, "layer_dims", dims)
        loss = self.loss or _LOSSES[self.kind][0]
        if loss not in _LOSSES[self.kind]:
            raise InputError(f"loss {loss!r} not available for {self.kind}")
        object.__setattr__(self, "loss", loss)
        params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if params.size != param_count(self.kind, dims):
            raise InputError(
                f"params.dim={params.size} but {self.kind}{list(dims)} needs "
                f"{param_count(self.kind, dims)}"
            )
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return self.params.size

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=params)


def param_count(kind: str, layer_dims: Sequence[int]) -> int:
    if kind in ("linear", "logistic"):
        return int(layer_dims[0])
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _layers(layer_dims: Sequence[int], p: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into the flat vector; W has shape (fan_out, fan_in)."""
    out, pos = [], 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w = p[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = p[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def init_model(kind: str, layer_dims: Sequence[int], seed: int = 0, loss: str = "") -> Model:
    """Zero weights for linear/logistic; Glorot-uniform weights and zero biases for MLPs."""
    dims = tuple(int(d) for d in layer_dims)
    params = np.zeros(param_count(kind, dims))
    model = Model(kind, dims, params, loss)
    if kind == "mlp":
        g = rng(seed, INIT_STREAM)
        for w, _ in _layers(dims, model.params):
            fan_out, fan_in = w.shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = g.uniform(-lim, lim, size=w.shape)
    return model


def _check_batch(model: Model, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("batch must be a non-empty 2-d feature matrix")
    if x.shape[1] != model.input_dim:
        raise InputError(f"feature dim {x.shape[1]} != model input dim {model.input_dim}")
    if y.shape[0] != x.shape[0]:
        raise InputError("batch features and targets differ in length")
    return x, y


def _finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")
    return arr


def _mse_targets(y: np.ndarray, n_out: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != n_out:
        raise InputError(f"targets have {y.shape[1]} columns, model outputs {n_out}")
    return y


def forward_loss(model: Model, batch: Batch) -> float:
    """Mean per-sample loss of ``model`` on ``batch``."""
    x, y = _check_batch(model, batch)
    layers = _layers(model.layer_dims, model.params)
    return float(_forward(model.kind, model.loss, layers, model.params, x, y))


def _forward(kind, loss, layers, params, x, y):
    # dtype-generic so the finite-difference oracle can run in extended precision
    with np.errstate(all="ignore"):
        if kind == "linear":
            r = _finite(x @ params, "layer 1 output") - y
            return np.mean(0.5 * r * r)
        if kind == "logistic":
            z = _finite(x @ params, "layer 1 output")
            # log(1 + e^z) - y z is the stable form of the logistic loss
            return np.mean(np.logaddexp(0.0, z) - y * z)
        h = x
        for i, (w, b) in enumerate(layers, start=1):
            z = _finite(h @ w.T + b, f"layer {i} pre-activation")
            h = np.maximum(z, 0.0) if i < len(layers) else z
        if loss == "mse":
            r = h - _mse_targets(y, h.shape[1]).astype(h.dtype)
            return np.mean(0.5 * np.sum(r * r, axis=1))
        cls = _class_ids(y, h.shape[1])
        m = np.max(h, axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(h - m), axis=1))
        return np.mean(lse - h[np.arange(len(cls)), cls])


def _class_ids(y: np.ndarray, n_classes: int) -> np.ndarray:
    cls = np.asarray(y).astype(np.int64)
    if np.any(cls < 0) or np.any(cls >= n_classes) or np.any(cls != np.asarray(y)):
        raise InputError(f"class targets must be integers in [0, {n_classes})")
    return cls


def backward(model: Model, batch: Batch) -> Gradient:
    """Analytic gradient of the mean loss with respect to ``model.params``."""
    x, y = _check_batch(model, batch)
    n = x.shape[0]
    with np.errstate(all="ignore"):
        if model.kind == "linear":
            r = _finite(x @ model.params, "layer 1 output") - y
            g = x.T @ r / n
        elif model.kind == "logistic":
            z = _finite(x @ model.params, "layer 1 output")
            g = x.T @ (_sigmoid(z) - y) / n
        else:
            g = _mlp_backward(model, x, y)
    return Gradient(_finite(g, "gradient"), n)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mlp_backward(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    layers = _layers(model.layer_dims, model.params)
    n = x.shape[0]
    acts, pre = [x], []
    for i, (w, b) in enumerate(layers, start=1):
        z = _finite(acts[-1] @ w.T + b, f"layer {i} pre-activation")
        pre.append(z)
        if i < len(layers):
            acts.append(np.maximum(z, 0.0))
    out = pre[-1]
    if model.loss == "mse":
        delta = (out - _mse_targets(y, out.shape[1])) / n
    else:
        cls = _class_ids(y, out.shape[1])
        e = np.exp(out - np.max(out, axis=1, keepdims=True))
        delta = e / np.sum(e, axis=1, keepdims=True)
        delta[np.arange(n), cls] -= 1.0
        delta /= n

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            # ReLU derivative taken as 0 at the kink
            delta = (delta @ w) * (pre[i - 1] > 0.0)
    flat = []
    for gw, gb in reversed(grads):
        flat.append(gw.reshape(-1))
        flat.append(gb)
    return np.concatenate(flat)


def fd_gradient(model: Model, batch: Batch, epsilon: float = 1e-5) -> Gradient:
    """Central-difference gradient, one pair of forward passes per coordinate.

    The forward passes run in ``np.longdouble`` so that rounding in the loss
    does not swamp small gradient entries; on platforms where longdouble is
    plain float64 the result is still a valid, if noisier, estimate.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise InputError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    x, y = _check_batch(model, batch)
    ld = np.longdouble
    xl = x.astype(ld)
    yl = y if model.kind == "mlp" and model.loss == "xent" else np.asarray(y, dtype=ld)
    base = model.params.astype(ld)
    eps = ld(epsilon)
    g = np.empty(base.size)
    for j in range(base.size):
        p = base.copy()
        p[j] = base[j] + eps
        up = _forward(model.kind, model.loss, _layers(model.layer_dims, p), p, xl, yl)
        p[j] = base[j] - eps
        down = _forward(model.kind, model.loss, _layers(model.layer_dims, p), p, xl, yl)
        g[j] = float((up - down) / (2 * eps))
    return Gradient(g, x.shape[0])


def sgd_step(params: np.ndarray, grad: Gradient | np.ndarray, lr: float) -> np.ndarray:
    g = grad.values if isinstance(grad, Gradient) else np.asarray(grad, dtype=np.float64)
    _check_dims(params, g, "params and gradient")
    if not lr > 0:
        raise InputError(f"learning rate must be positive, got {lr}")
    with np.errstate(all="ignore"):
        out = params - lr * g
    return _finite(out, "sgd_step result")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PSYN1"
_KIND_CODES = {("linear", "mse"): 0, ("logistic", "bce"): 1, ("mlp", "xent"): 2, ("mlp", "mse"): 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def checkpoint_bytes(model: Model) -> bytes:
    dims = model.layer_dims
    head = struct.pack(f"<{len(dims) + 3}I", _KIND_CODES[(model.kind, model.loss)],
                       len(dims), *dims, model.dim)
    return CHECKPOINT_MAGIC + head + model.params.astype("<f8").tobytes()


def model_from_bytes(data: bytes) -> Model:
    if data[:5] != CHECKPOINT_MAGIC:
        raise InputError("not a psyn checkpoint (bad magic)")
    code, n_dims = struct.unpack_from("<2I", data, 5)
    if code not in _CODE_KINDS:
        raise InputError(f"unknown model kind code {code}")
    off = 13
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    (dim,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + 8 * dim:
        raise InputError("checkpoint length does not match its header")
    params = np.frombuffer(data, dtype="<f8", count=dim, offset=off).astype(np.float64)
    kind, loss = _CODE_KINDS[code]
    return Model(kind, dims, params, loss)


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
