"""Named parameter collections and Hessian-vector products."""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor, dot, grad, no_grad


class ParamVector:
    """Ordered mapping ``name -> Tensor`` viewed as one flat vector.

    Insertion order is the flattening order, so a model always produces
    the same layout. Instances are treated as immutable; every update returns
    a new ParamVector.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self.entries: dict[str, Tensor] = {}
        for name, value in (entries or {}).items():
            self.entries[name] = value if isinstance(value, Tensor) else Tensor(value)

    @property
    def total_len(self) -> int:
        return sum(t.size for t in self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def tensors(self) -> list[Tensor]:
        return list(self.entries.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.entries.items()}

    def items(self):
        return self.entries.items()

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {t.shape}" for k, t in self.entries.items())
        return f"ParamVector({inner}; total_len={self.total_len})"

    # -- conversions --------------------------------------------------
    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([t.data.reshape(-1) for t in self.entries.values()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, template: "ParamVector") -> "ParamVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != template.total_len:
            raise ShapeError("unflatten", vec.shape, (template.total_len,))
        out, pos = {}, 0
        for name, t in template.entries.items():
            n = t.size
            out[name] = Tensor(vec[pos : pos + n].reshape(t.shape))
            pos += n
        return cls(out)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        return cls({k: Tensor(v) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def detach(self) -> "ParamVector":
        return ParamVector({k: t.detach() for k, t in self.entries.items()})

    def as_leaves(self) -> "ParamVector":
        """Fresh requires-grad leaves (in the current graph) holding the same values."""
        return ParamVector(
            {k: Tensor(t.data, requires_grad=True, name=k) for k, t in self.entries.items()}
        )

    # -- arithmetic on values (no graph) ------------------------------
    def _check_same(self, other: "ParamVector", op: str) -> None:
        if self.shapes() != other.shapes():
            raise ShapeError(op, (self.total_len,), (other.total_len,), detail="layout mismatch")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector({k: Tensor(fn(t.data)) for k, t in self.entries.items()})

    def combine(
        self, other: "ParamVector", fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    ) -> "ParamVector":
        self._check_same(other, "combine")
        return ParamVector(
            {k: Tensor(fn(t.data, other.entries[k].data)) for k, t in self.entries.items()}
        )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.combine(other, np.add)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.combine(other, np.subtract)

    def scaled(self, c: float) -> "ParamVector":
        return self.map(lambda a: a * c)

    def vdot(self, other: "ParamVector") -> float:
        self._check_same(other, "vdot")
        return float(self.flatten() @ other.flatten())

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def bitwise_equal(self, other: "ParamVector") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(
            np.array_equal(t.data.view(np.int64), other.entries[k].data.view(np.int64))
            for k, t in self.entries.items()
        )

    @classmethod
    def zeros_like(cls, template: "ParamVector") -> "ParamVector":
        return template.map(np.zeros_like)


def flatten(params: ParamVector) -> np.ndarray:
    return params.flatten()


def unflatten(vec: np.ndarray, template: ParamVector) -> ParamVector:
    return ParamVector.unflatten(vec, template)


def param_grad(
    loss: Tensor, params: ParamVector, create_graph: bool = False
) -> ParamVector:
    """Gradient of ``loss`` w.r.t. every entry of ``params``, as a ParamVector."""
    gs = grad(loss, params.tensors(), create_graph=create_graph)
    return ParamVector(dict(zip(params.names(), gs)))


def loss_and_grad(
    loss_fn: Callable[[ParamVector], Tensor], theta: ParamVector
) -> tuple[float, ParamVector]:
    leaves = theta.as_leaves()
    loss = loss_fn(leaves)
    return loss.item(), param_grad(loss, leaves)


def hvp(
    loss_fn: Callable[[ParamVector], Tensor],
    theta: ParamVector,
    v: ParamVector,
    mode: str = "exact",
    eps: float | None = None,
) -> ParamVector:
    """Hessian-vector product ``H(theta) v``.

    ``exact`` differentiates ``<grad L, v>`` a second time. ``fd`` uses the
    central difference ``(grad L(theta + e v) - grad L(theta - e v)) / 2e`` with
    ``e = 1e-4 * (1 + max|theta|)`` unless ``eps`` is given.
    """
    if theta.shapes() != v.shapes():
        raise ShapeError("hvp", (theta.total_len,), (v.total_len,))
    if mode not in ("exact", "fd"):
        raise ValueError(f"unknown hvp mode {mode!r}")
    try:
        if mode == "exact":
            leaves = theta.as_leaves()
            loss = loss_fn(leaves)
            g = param_grad(loss, leaves, create_graph=True)
            if theta.total_len == 0:
                return ParamVector.zeros_like(theta)
            inner = None
            for name, gt in g.items():
                term = dot(gt, v[name].detach())
                inner = term if inner is None else inner + term
            if not inner.requires_grad:
                # gradient does not depend on theta: zero curvature
                return ParamVector.zeros_like(theta)
            out = param_grad(inner, leaves)
        else:
            if eps is None:
                flat = theta.flatten()
                eps = 1e-4 * (1.0 + (np.abs(flat).max() if flat.size else 0.0))
            plus = theta.combine(v, lambda a, b: a + eps * b)
            minus = theta.combine(v, lambda a, b: a - eps * b)
            _, gp = loss_and_grad(loss_fn, plus)
            _, gm = loss_and_grad(loss_fn, minus)
            out = gp.combine(gm, lambda a, b: (a - b) / (2.0 * eps))
    except NonFiniteError as exc:
        raise NonFiniteError(f"hvp[{mode}]", str(exc)) from exc
    if not np.isfinite(out.flatten()).all():
        raise NonFiniteError(f"hvp[{mode}]", "result contains NaN/Inf")
    with no_grad():
        return out.detach()
