"""Reference computations that share no code with the autodiff engine.

Everything here is plain numpy: a hand-derived MLP cross-entropy gradient, an
inner loop built on it, and central finite differences. The self-check and the
test suite compare the engine against these.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np


def central_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of a scalar function of a flat vector by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the max norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


# -- numpy MLP --------------------------------------------------------------------------
def mlp_shapes(layer_dims) -> list[tuple[str, tuple[int, ...]]]:
    """Entry names and shapes, in the same order as the engine's MlpModel."""
    out = []
    for i, (fi, fo) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        out.append((f"layer{i}.weight", (fi, fo)))
        out.append((f"layer{i}.bias", (fo,)))
    return out


def unpack(flat: np.ndarray, layer_dims) -> list[np.ndarray]:
    arrays, off = [], 0
    for _, shape in mlp_shapes(layer_dims):
        n = int(np.prod(shape))
        arrays.append(flat[off : off + n].reshape(shape))
        off += n
    return arrays


def mlp_forward(flat: np.ndarray, layer_dims, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    ps = unpack(flat, layer_dims)
    acts = [x]
    h = x
    n_layers = len(layer_dims) - 1
    for i in range(n_layers):
        h = h @ ps[2 * i] + ps[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def mlp_ce(flat: np.ndarray, layer_dims, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = mlp_forward(flat, layer_dims, x)
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def mlp_ce_grad(flat: np.ndarray, layer_dims, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Hand-derived backprop of mean softmax cross-entropy."""
    ps = unpack(flat, layer_dims)
    logits, acts = mlp_forward(flat, layer_dims, x)
    n = len(y)
    delta = np.exp(_log_softmax(logits))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = [None] * len(ps)  # type: ignore[list-item]
    n_layers = len(layer_dims) - 1
    for i in reversed(range(n_layers)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ ps[2 * i].T) * (acts[i] > 0)
    return np.concatenate([g.ravel() for g in grads])


def maml_objective(
    flat: np.ndarray, layer_dims, support: tuple[np.ndarray, np.ndarray],
    query: tuple[np.ndarray, np.ndarray], steps: int, lr: float,
) -> float:
    """Query loss after ``steps`` plain gradient steps on the support loss."""
    theta = np.array(flat, dtype=np.float64)
    for _ in range(steps):
        theta = theta - lr * mlp_ce_grad(theta, layer_dims, *support)
    return mlp_ce(theta, layer_dims, *query)


# -- closed forms ---------------------------------------------------------------------
def quadratic_integral(A: np.ndarray, g: np.ndarray, alpha: float) -> float:
    """``int_0^1 grad L(theta - t alpha g) . g dt = |g|^2 - (alpha/2) g^T A g``."""
    return float(g @ g - 0.5 * alpha * g @ A @ g)


def random_spd(rng: np.random.Generator, n: int, cond: float = 10.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    A = (q * eig) @ q.T
    return 0.5 * (A + A.T)


def one_step_linear_predictions(
    support_x: np.ndarray, support_y: np.ndarray, query_x: np.ndarray,
    n_way: int, w0_row: np.ndarray, lr: float,
) -> np.ndarray:
    """Argmax of a linear model (rows all ``w0_row``) after one CE gradient step."""
    W = np.tile(w0_row, (n_way, 1))
    logits = support_x @ W.T
    p = np.exp(_log_softmax(logits))
    onehot = np.eye(n_way)[support_y]
    grad = (p - onehot).T @ support_x / len(support_y)
    W1 = W - lr * grad
    return np.argmax(query_x @ W1.T, axis=1)
