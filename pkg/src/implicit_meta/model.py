"""Single-hidden-layer MLP with a softplus-gated L2 penalty.

Every derivative the bilevel machinery needs is written out by hand:
reverse mode for gradients, forward mode over the backward pass for
Hessian-vector products, and closed forms for everything touching the
penalty. No Hessian is ever materialized here.

Parameter vectors are flattened in the fixed order W1, b1, W2, b2, each
row-major, so flat vectors are interchangeable between modules.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

SOFTPLUS_GUARD = 30.0


class DimensionError(ValueError):
    pass


class HyperMode(str, enum.Enum):
    PER_PARAMETER = "per_parameter"
    PER_LAYER = "per_layer"


class LossKind(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"


def softplus(x):
    """ln(1 + e^x) with linear/exponential asymptotes past +-30."""
    arr = np.asarray(x, dtype=np.float64)
    mid = np.clip(arr, -SOFTPLUS_GUARD, SOFTPLUS_GUARD)
    out = np.where(
        arr > SOFTPLUS_GUARD,
        arr,
        np.where(arr < -SOFTPLUS_GUARD, np.exp(arr), np.log1p(np.exp(mid))),
    )
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    arr = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    if y > SOFTPLUS_GUARD:
        return float(y)
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.b1.ndim != 1 or self.b2.ndim != 1:
            raise DimensionError("W1/W2 must be matrices and b1/b2 vectors")
        h = self.W1.shape[1]
        if self.b1.shape[0] != h or self.W2.shape[0] != h:
            raise DimensionError(f"hidden width mismatch: W1 {self.W1.shape}, b1 {self.b1.shape}, W2 {self.W2.shape}")
        if self.b2.shape[0] != self.W2.shape[1]:
            raise DimensionError(f"output width mismatch: W2 {self.W2.shape}, b2 {self.b2.shape}")

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[1]

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def from_flat(cls, vec, d_in: int, hidden: int, n_out: int) -> MlpParams:
        vec = np.asarray(vec, dtype=np.float64)
        sizes = param_sizes(d_in, hidden, n_out)
        if vec.shape != (sum(sizes),):
            raise DimensionError(f"expected flat vector of length {sum(sizes)}, got {vec.shape}")
        o = np.cumsum((0,) + sizes)
        return cls(
            vec[o[0]:o[1]].reshape(d_in, hidden),
            vec[o[1]:o[2]],
            vec[o[2]:o[3]].reshape(hidden, n_out),
            vec[o[3]:o[4]],
        )

    @classmethod
    def zeros(cls, d_in: int, hidden: int, n_out: int) -> MlpParams:
        return cls.from_flat(np.zeros(sum(param_sizes(d_in, hidden, n_out))), d_in, hidden, n_out)

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, hidden: int, n_out: int) -> MlpParams:
        # uniform(+-1/sqrt(fan_in)), the usual dense-layer default
        b1_bound = 1.0 / np.sqrt(d_in)
        b2_bound = 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-b1_bound, b1_bound, (d_in, hidden)),
            rng.uniform(-b1_bound, b1_bound, hidden),
            rng.uniform(-b2_bound, b2_bound, (hidden, n_out)),
            rng.uniform(-b2_bound, b2_bound, n_out),
        )

    def like(self, vec) -> MlpParams:
        return MlpParams.from_flat(vec, self.d_in, self.hidden, self.n_out)


def param_sizes(d_in: int, hidden: int, n_out: int) -> tuple[int, int, int, int]:
    return (d_in * hidden, hidden, hidden * n_out, n_out)


@dataclass(frozen=True)
class HyperSet:
    """Meta-knowledge lambda: one value per weight, or one scalar per tensor."""

    mode: HyperMode
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.values) != 4:
            raise DimensionError("HyperSet needs exactly one entry per parameter tensor")
        if self.mode == HyperMode.PER_LAYER and any(np.ndim(v) != 0 for v in self.values):
            raise DimensionError("per-layer hypers are scalars")

    @classmethod
    def constant(cls, mode, params: MlpParams, value: float) -> HyperSet:
        mode = HyperMode(mode)
        if mode == HyperMode.PER_LAYER:
            return cls(mode, tuple(np.array(float(value)) for _ in range(4)))
        return cls(mode, tuple(np.full(t.shape, float(value)) for t in params.tensors))

    @classmethod
    def random(cls, mode, params: MlpParams, rng: np.random.Generator, mean=0.0, std=0.1) -> HyperSet:
        mode = HyperMode(mode)
        if mode == HyperMode.PER_LAYER:
            return cls(mode, tuple(np.array(rng.normal(mean, std)) for _ in range(4)))
        return cls(mode, tuple(rng.normal(mean, std, t.shape) for t in params.tensors))

    @property
    def size(self) -> int:
        return sum(np.size(v) for v in self.values)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.values]).astype(np.float64)

    def like(self, vec) -> HyperSet:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"expected flat hyper vector of length {self.size}, got {vec.shape}")
        out, o = [], 0
        for v in self.values:
            n = np.size(v)
            out.append(vec[o:o + n].reshape(np.shape(v)))
            o += n
        return HyperSet(self.mode, tuple(out))

    def check(self, params: MlpParams) -> None:
        if self.mode == HyperMode.PER_PARAMETER:
            for k, (lam, w) in enumerate(zip(self.values, params.tensors)):
                if np.shape(lam) != w.shape:
                    raise DimensionError(f"hyper tensor {k} has shape {np.shape(lam)}, params have {w.shape}")

    def expand(self, params: MlpParams) -> np.ndarray:
        """Per-element lambda aligned with ``params.flat()``."""
        self.check(params)
        if self.mode == HyperMode.PER_PARAMETER:
            return self.flat()
        return np.concatenate([np.full(t.size, float(lam)) for lam, t in zip(self.values, params.tensors)])

    def reduce(self, params: MlpParams, per_element: np.ndarray) -> np.ndarray:
        """Fold a per-element quantity back onto the hyper layout (flat)."""
        if self.mode == HyperMode.PER_PARAMETER:
            return per_element
        sizes = [t.size for t in params.tensors]
        return np.add.reduceat(per_element, np.cumsum([0] + sizes[:-1]))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DimensionError("inputs must be a non-empty (n, d) matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError("one label per input row")


def _forward(params: MlpParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise DimensionError(f"inputs have shape {X.shape}, model expects {params.d_in} columns")
    z1 = X @ params.W1 + params.b1
    a = np.maximum(z1, 0.0)
    return z1, a, a @ params.W2 + params.b2


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    return _forward(params, inputs)[2]


def backprop(params: MlpParams, X: np.ndarray, dlogits: np.ndarray, cache=None) -> MlpParams:
    """Gradient of sum(dlogits * logits) with respect to every parameter."""
    z1, a, _ = cache if cache is not None else _forward(params, X)
    dz1 = (dlogits @ params.W2.T) * (z1 > 0)
    return MlpParams(X.T @ dz1, dz1.sum(0), a.T @ dlogits, dlogits.sum(0))


def mlp_jvp(params: MlpParams, X: np.ndarray, tangent: MlpParams):
    """Logits and their directional derivative along ``tangent``."""
    z1, a, logits = _forward(params, X)
    da = (X @ tangent.W1 + tangent.b1) * (z1 > 0)
    return logits, da @ params.W2 + a @ tangent.W2 + tangent.b2


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0] or logits.shape[0] < 1:
        raise DimensionError(f"logits {logits.shape} incompatible with {labels.shape[0]} labels")
    return float(-log_softmax(logits)[np.arange(labels.shape[0]), labels].mean())


def _one_hot(labels, n_out: int) -> np.ndarray:
    out = np.zeros((len(labels), n_out))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def reg_penalty(params: MlpParams, hypers: HyperSet) -> float:
    lam = hypers.expand(params)
    return float(np.sum((softplus(lam) * params.flat()) ** 2))


def val_loss(params: MlpParams, batch: Batch) -> float:
    return cross_entropy(mlp_forward(params, batch.inputs), batch.labels)


def train_loss(params: MlpParams, hypers: HyperSet, batch: Batch) -> float:
    return val_loss(params, batch) + reg_penalty(params, hypers)


def accuracy(params: MlpParams, batch: Batch) -> float:
    return float(np.mean(mlp_forward(params, batch.inputs).argmax(axis=1) == batch.labels))


def ce_grad(params: MlpParams, batch: Batch) -> tuple[float, MlpParams]:
    cache = _forward(params, batch.inputs)
    logits = cache[2]
    n = batch.inputs.shape[0]
    p = softmax(logits)
    loss = cross_entropy(logits, batch.labels)
    dlogits = (p - _one_hot(batch.labels, params.n_out)) / n
    return loss, backprop(params, batch.inputs, dlogits, cache)


def grad_w(loss_kind, params: MlpParams, hypers: HyperSet | None, batch: Batch) -> MlpParams:
    _, g = loss_and_grad(loss_kind, params, hypers, batch)
    return g


def loss_and_grad(loss_kind, params: MlpParams, hypers: HyperSet | None, batch: Batch):
    loss, g = ce_grad(params, batch)
    if LossKind(loss_kind) == LossKind.VAL:
        return loss, g
    w = params.flat()
    sp = softplus(hypers.expand(params))
    loss += float(np.sum((sp * w) ** 2))
    return loss, params.like(g.flat() + 2.0 * sp**2 * w)


def _check_vec(params: MlpParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.size,):
        raise DimensionError(f"vector has shape {v.shape}, expected ({params.size},)")
    return v


def ce_hvp(params: MlpParams, X: np.ndarray, labels, v: np.ndarray) -> np.ndarray:
    """Directional derivative of the mean cross-entropy gradient along v.

    ReLU is treated as locally linear, so the result is exact away from kinks.
    """
    V = params.like(v)
    z1, a, logits = _forward(params, X)
    mask = z1 > 0
    n = X.shape[0]
    p = softmax(logits)
    dlogits = (p - _one_hot(labels, params.n_out)) / n

    r_a = (X @ V.W1 + V.b1) * mask
    r_logits = r_a @ params.W2 + a @ V.W2 + V.b2
    r_dlogits = (p * r_logits - p * (p * r_logits).sum(axis=1, keepdims=True)) / n

    r_dz1 = (r_dlogits @ params.W2.T + dlogits @ V.W2.T) * mask
    return np.concatenate([
        (X.T @ r_dz1).ravel(),
        r_dz1.sum(0),
        (r_a.T @ dlogits + a.T @ r_dlogits).ravel(),
        r_dlogits.sum(0),
    ])


def hvp_ww(params: MlpParams, hypers: HyperSet, batch: Batch, v) -> np.ndarray:
    v = _check_vec(params, v)
    penalty_diag = 2.0 * softplus(hypers.expand(params)) ** 2
    return ce_hvp(params, batch.inputs, batch.labels, v) + penalty_diag * v


def mixed_vjp(params: MlpParams, hypers: HyperSet, batch: Batch, v) -> HyperSet:
    """v^T d2L_train/(dw dlambda^T), laid out like ``hypers``.

    Only the penalty depends on lambda, so ``batch`` does not enter the result.
    """
    v = _check_vec(params, v)
    lam = hypers.expand(params)
    per_elem = 4.0 * softplus(lam) * sigmoid(lam) * params.flat() * v
    return hypers.like(hypers.reduce(params, per_elem))
