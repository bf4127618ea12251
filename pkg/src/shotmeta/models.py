"""Classifiers, losses and inner-loop parameter masks."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParamVector
from .tensor import (
    ArrayLike,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    exp,
    log,
    matmul,
    mul,
    neg,
    relu,
    scale,
    sub,
    tsum,
)

LossFn = Callable[[ParamVector], Tensor]


# -- probabilities and losses ------------------------------------------------
def _as_rows(logits: ArrayLike, op: str) -> tuple[Tensor, bool]:
    t = as_tensor(logits)
    if t.ndim == 1:
        if t.shape[0] == 0:
            raise ShapeError(op, t.shape, detail="empty logits")
        return t.reshape(1, t.shape[0]), True
    if t.ndim != 2 or t.shape[1] == 0:
        raise ShapeError(op, t.shape, detail="expected (classes,) or (n, classes)")
    return t, False


def log_softmax(logits: ArrayLike) -> Tensor:
    """Row-wise log-softmax with max subtraction.

    The row maximum is a constant shift, so it cancels from every derivative.
    """
    rows, single = _as_rows(logits, "log_softmax")
    n, c = rows.shape
    shift = Tensor(rows.data.max(axis=1, keepdims=True))
    z = sub(rows, broadcast_to(shift, (n, c)))
    lse = log(tsum(exp(z), axis=1, keepdims=True))
    out = sub(z, broadcast_to(lse, (n, c)))
    return out.reshape(c) if single else out


def softmax(logits: ArrayLike) -> Tensor:
    return exp(log_softmax(logits))


def _onehot(labels: np.ndarray, n_classes: int, op: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ValueError(f"{op}: labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"{op}: label out of range [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """``-log softmax(logits)[label]``; averaged over rows for 2-d input."""
    rows, single = _as_rows(logits, "cross_entropy")
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size != rows.shape[0]:
        raise ShapeError("cross_entropy", rows.shape, labels.shape)
    onehot = Tensor(_onehot(labels, rows.shape[1], "cross_entropy"))
    picked = tsum(mul(onehot, log_softmax(rows)), axis=1)
    return neg(picked.sum()) if single else neg(picked.mean())


def kl_div(p_logits: ArrayLike, q_logits: ArrayLike) -> Tensor:
    """``KL(softmax(p) || softmax(q))`` in log space; mean over rows for 2-d."""
    p, single = _as_rows(p_logits, "kl_div")
    q, _ = _as_rows(q_logits, "kl_div")
    if p.shape != q.shape:
        raise ShapeError("kl_div", p.shape, q.shape)
    lp = log_softmax(p)
    lq = lp if q is p else log_softmax(q)
    per_row = tsum(mul(exp(lp), sub(lp, lq)), axis=1)
    return per_row.sum() if single else per_row.mean()


def soft_cross_entropy(p_logits: ArrayLike, q_logits: ArrayLike) -> Tensor:
    """``-sum_c softmax(p)_c log softmax(q)_c``; mean over rows for 2-d."""
    p, single = _as_rows(p_logits, "soft_cross_entropy")
    q, _ = _as_rows(q_logits, "soft_cross_entropy")
    if p.shape != q.shape:
        raise ShapeError("soft_cross_entropy", p.shape, q.shape)
    per_row = neg(tsum(mul(softmax(p), log_softmax(q)), axis=1))
    return per_row.sum() if single else per_row.mean()


def param_l2(a: ParamVector, b: ParamVector) -> Tensor:
    """Squared L2 distance divided by sqrt(number of scalars)."""
    if a.shapes() != b.shapes():
        raise ShapeError("param_l2", (a.total_len,), (b.total_len,))
    n = a.total_len
    if n == 0:
        return Tensor(0.0)
    total = None
    for name in a:
        d = sub(a[name], b[name])
        term = tsum(mul(d, d))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / math.sqrt(n))


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1)


# -- models -----------------------------------------------------------------
def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    h = matmul(x, w)
    return add(h, broadcast_to(b, h.shape))


@dataclass(frozen=True)
class MlpModel:
    """ReLU MLP producing logits. Layer ``i`` owns ``layer{i}.weight`` (in, out)
    and ``layer{i}.bias``; the last layer is the head."""

    layer_dims: tuple[int, ...]
    params: ParamVector

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def head_names(self) -> list[str]:
        i = self.n_layers - 1
        return [f"layer{i}.weight", f"layer{i}.bias"]

    def forward(self, x: ArrayLike, params: ParamVector | None = None) -> Tensor:
        p = self.params if params is None else params
        h = as_tensor(x)
        for i in range(self.n_layers):
            h = _affine(h, p[f"layer{i}.weight"], p[f"layer{i}.bias"])
            if i < self.n_layers - 1:
                h = relu(h)
        return h


def init_model(layer_dims: Sequence[int], seed: int | np.random.Generator) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigError("layer_dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ConfigError(f"every layer dimension must be >= 1, got {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    entries = {}
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        entries[f"layer{i}.weight"] = Tensor(_glorot(rng, fi, fo))
        entries[f"layer{i}.bias"] = Tensor(np.zeros(fo))
    return MlpModel(dims, ParamVector(entries))


@dataclass(frozen=True)
class LinearModel:
    """``f_c(x) = <theta_c, phi(x)>`` with one weight row per class and no bias."""

    n_classes: int
    dim: int
    params: ParamVector
    phi: Callable[[np.ndarray], np.ndarray] | None = None

    def head_names(self) -> list[str]:
        return ["weight"]

    def features(self, x: ArrayLike) -> Tensor:
        if self.phi is None:
            return as_tensor(x)
        return Tensor(self.phi(as_tensor(x).data))

    def forward(self, x: ArrayLike, params: ParamVector | None = None) -> Tensor:
        p = self.params if params is None else params
        w = p["weight"]
        return matmul(self.features(x), w.T)


def init_linear(
    n_classes: int,
    dim: int,
    seed: int | np.random.Generator | None = None,
    symmetric: bool = True,
    phi: Callable[[np.ndarray], np.ndarray] | None = None,
) -> LinearModel:
    """Linear classifier; ``symmetric`` makes every class row identical."""
    if n_classes < 1 or dim < 1:
        raise ConfigError(f"n_classes and dim must be >= 1, got {n_classes}, {dim}")
    if seed is None:
        w = np.zeros((n_classes, dim))
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (n_classes + dim))
        if symmetric:
            w = np.tile(rng.uniform(-bound, bound, size=(1, dim)), (n_classes, 1))
        else:
            w = rng.uniform(-bound, bound, size=(n_classes, dim))
    return LinearModel(n_classes, dim, ParamVector({"weight": Tensor(w)}), phi)


# -- inner-loop masks -----------------------------------------------------------
@dataclass(frozen=True)
class InnerMask:
    """Which parameter entries the inner loop may change."""

    adaptable: Mapping[str, bool]

    @classmethod
    def all_adaptable(cls, params: ParamVector) -> "InnerMask":
        return cls({k: True for k in params})

    @classmethod
    def all_frozen(cls, params: ParamVector) -> "InnerMask":
        return cls({k: False for k in params})

    @classmethod
    def anil(cls, model) -> "InnerMask":
        """Adapt only the head."""
        head = set(model.head_names())
        return cls({k: k in head for k in model.params})

    @classmethod
    def boil(cls, model) -> "InnerMask":
        """Adapt only the body; the head stays at its meta-learned value."""
        head = set(model.head_names())
        return cls({k: k not in head for k in model.params})

    def check(self, params: ParamVector) -> None:
        if set(self.adaptable) != set(params.names()):
            missing = sorted(set(params.names()) - set(self.adaptable))
            extra = sorted(set(self.adaptable) - set(params.names()))
            raise ShapeError(
                "mask", (len(self.adaptable),), (len(params),),
                detail=f"missing={missing} extra={extra}",
            )

    def __getitem__(self, name: str) -> bool:
        return self.adaptable[name]

    def frozen_names(self) -> list[str]:
        return [k for k, v in self.adaptable.items() if not v]


def apply_mask(grad: ParamVector, mask: InnerMask | None) -> ParamVector:
    """Zero the gradient of frozen entries."""
    if mask is None:
        return grad
    mask.check(grad)
    return ParamVector(
        {k: (t if mask[k] else Tensor(np.zeros(t.shape))) for k, t in grad.items()}
    )


# -- projector ------------------------------------------------------------------
@dataclass(frozen=True)
class Projector:
    """Logits -> hidden (2N, relu) -> N. Used on the reference branch only."""

    n_classes: int
    params: ParamVector
    on: str = "logits"  # or "probs": project softmax outputs instead of raw logits

    def __call__(self, logits: Tensor, params: ParamVector | None = None) -> Tensor:
        p = self.params if params is None else params
        h = logits if self.on == "logits" else softmax(logits)
        h = relu(_affine(h, p["proj0.weight"], p["proj0.bias"]))
        return _affine(h, p["proj1.weight"], p["proj1.bias"])


def init_projector(n_classes: int, seed: int | np.random.Generator, on: str = "logits") -> Projector:
    if on not in ("logits", "probs"):
        raise ConfigError(f"projector input must be 'logits' or 'probs', got {on!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    width = 2 * n_classes
    entries = {
        "proj0.weight": Tensor(_glorot(rng, n_classes, width)),
        "proj0.bias": Tensor(np.zeros(width)),
        "proj1.weight": Tensor(_glorot(rng, width, n_classes)),
        "proj1.bias": Tensor(np.zeros(n_classes)),
    }
    return Projector(n_classes, ParamVector(entries), on)


# -- loss closures ---------------------------------------------------------------
def ce_loss_fn(model, x: np.ndarray, y: np.ndarray) -> LossFn:
    """Closure ``params -> mean cross-entropy of model on (x, y)``."""
    xt = Tensor(x)
    y = np.asarray(y)

    def loss(params: ParamVector) -> Tensor:
        return cross_entropy(model.forward(xt, params), y)

    return loss
