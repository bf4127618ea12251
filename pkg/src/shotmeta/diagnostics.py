"""Instruments for the inner-loop geometry: how much curvature a gradient step
feels, how collinear the inner gradients are, and what the adapted classifier
reduces to when the inner loop is linear."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .engine import Trajectory
from .errors import NonFiniteError
from .models import LossFn
from .params import ParamVector, hvp, loss_and_grad
from .tasks import Episode
from .tensor import Tensor, matmul, mul, no_grad, reshape, scale, tsum


@dataclass(frozen=True)
class QuadraticLoss:
    """``L(theta) = 0.5 theta^T A theta + b^T theta`` on a single entry ``"theta"``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ValueError(f"bad quadratic shapes A{A.shape} b{b.shape}")
        if not np.array_equal(A, A.T):
            raise ValueError("A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.size

    def params(self, theta) -> ParamVector:
        return ParamVector({"theta": Tensor(theta)})

    def __call__(self, params: ParamVector) -> Tensor:
        th = params["theta"]
        col = reshape(th, (self.dim, 1))
        quad = tsum(mul(col, matmul(Tensor(self.A), col)))
        return scale(quad, 0.5) + tsum(mul(th, Tensor(self.b)))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ theta + self.b

    def value(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.A @ theta + self.b @ theta)


# -- loss-decrease integrand ------------------------------------------------------
@dataclass(frozen=True)
class IntegrandReport:
    """``loss_delta`` should equal ``-alpha * integral_estimate``; ``taylor_integral``
    is the second-order prediction ``|g|^2 - (alpha/2) g^T H g``."""

    g_norm_sq: float
    ghg: float
    integral_estimate: float
    loss_delta: float
    positive: bool
    taylor_integral: float
    quad_error: float
    alpha: float


def _trapezoid(values: np.ndarray) -> float:
    h = 1.0 / (len(values) - 1)
    return float(h * (values.sum() - 0.5 * (values[0] + values[-1])))


def integrand_report(
    loss_fn: LossFn, theta_k: ParamVector, alpha: float, quad_points: int = 33
) -> IntegrandReport:
    """Integrate ``grad L(theta(t)) . grad L(theta_k)`` along the straight segment
    from ``theta_k`` to ``theta_k - alpha g`` with the composite trapezoid rule.

    The trapezoid error is estimated by Richardson comparison of ``M`` and
    ``2M - 1`` points (``|I_2M - I_M| / 3``).
    """
    if quad_points < 2:
        raise ValueError("quad_points must be >= 2")
    loss0, g = loss_and_grad(loss_fn, theta_k)
    gflat = g.flatten()
    hg = hvp(loss_fn, theta_k, g, mode="exact")
    ghg = float(gflat @ hg.flatten())
    g_norm_sq = float(gflat @ gflat)

    fine = 2 * quad_points - 1
    ts = np.linspace(0.0, 1.0, fine)
    vals = np.empty(fine)
    for i, t in enumerate(ts):
        point = theta_k.combine(g, lambda a, b, t=t: a - (t * alpha) * b)
        try:
            _, gt = loss_and_grad(loss_fn, point)
        except NonFiniteError as exc:
            raise NonFiniteError("integrand_report", f"at t={t:.6g}: {exc}") from exc
        vals[i] = gt.flatten() @ gflat
    coarse = _trapezoid(vals[::2])
    refined = _trapezoid(vals)
    end = theta_k.combine(g, lambda a, b: a - alpha * b)
    with no_grad():
        loss1 = loss_fn(end).item()
    return IntegrandReport(
        g_norm_sq=g_norm_sq,
        ghg=ghg,
        integral_estimate=coarse,
        loss_delta=loss1 - loss0,
        positive=coarse > 0,
        taylor_integral=g_norm_sq - 0.5 * alpha * ghg,
        quad_error=abs(refined - coarse) / 3.0,
        alpha=alpha,
    )


def sign_flip_threshold(g_norm_sq: float, ghg: float) -> float:
    """Step size above which a quadratic's gradient step increases the loss."""
    if ghg <= 0:
        return float("inf")
    return 2.0 * g_norm_sq / ghg


# -- trajectory statistics -------------------------------------------------------------
def cosine_diagnostic(traj: Trajectory) -> float:
    """Mean over inner steps of cos(theta^T - theta^0, -g^k), using masked gradients."""
    if traj.steps < 1:
        raise ValueError("cosine_diagnostic needs at least one inner step")
    total = traj.thetas[-1].flatten() - traj.thetas[0].flatten()
    tn = np.linalg.norm(total)
    if tn == 0:
        raise ValueError("degenerate trajectory: theta^T == theta^0")
    cosines = []
    for k in range(traj.steps):
        d = -traj.masked_grad(k)
        dn = np.linalg.norm(d)
        if dn == 0:
            raise ValueError(f"degenerate trajectory: zero gradient at step {k}")
        cosines.append(float(np.clip(total @ d / (tn * dn), -1.0, 1.0)))
    return float(np.mean(cosines))


@dataclass(frozen=True)
class CurvatureRatio:
    ratio: float
    zero_gradient: bool


def hessian_effect_along_traj(traj: Trajectory, loss_fn: LossFn) -> list[CurvatureRatio]:
    """``g^T H g / |g|^2`` at each inner iterate, along the (masked) step direction."""
    if traj.steps < 1:
        raise ValueError("hessian_effect_along_traj needs at least one inner step")
    out = []
    for k in range(traj.steps):
        theta = traj.thetas[k].detach()
        d = ParamVector.unflatten(traj.masked_grad(k), theta)
        nsq = float(d.flatten() @ d.flatten())
        if nsq == 0:
            out.append(CurvatureRatio(0.0, True))
            continue
        hd = hvp(loss_fn, theta, d, mode="exact")
        out.append(CurvatureRatio(float(d.flatten() @ hd.flatten()) / nsq, False))
    return out


def mean_curvature_ratio(traj: Trajectory, loss_fn: LossFn) -> float:
    return float(np.mean([r.ratio for r in hessian_effect_along_traj(traj, loss_fn)]))


# -- prototype-vector view -----------------------------------------------------------------
def prototype_vectors(
    episode: Episode,
    phi: Callable[[np.ndarray], np.ndarray] | None = None,
    n_way: int | None = None,
) -> np.ndarray:
    """``V_c = sum_j beta_jc phi(x_j)`` with ``beta_jc = -dCE/df_c`` at uniform
    predictions, i.e. ``[y_j == c] - 1/N``. Returns shape (N, feature_dim)."""
    n = episode.n_way if n_way is None else n_way
    feats = episode.support_x if phi is None else phi(episode.support_x)
    onehot = np.zeros((len(episode.support_y), n))
    onehot[np.arange(len(episode.support_y)), episode.support_y] = 1.0
    beta = onehot - 1.0 / n
    return beta.T @ feats


def prototype_oracle(
    episode: Episode,
    phi: Callable[[np.ndarray], np.ndarray] | None = None,
    theta0: np.ndarray | None = None,
) -> np.ndarray:
    """Predict each query by its most similar prototype (ties -> lowest index).

    ``theta0`` (class rows of a linear model) is only checked: the equivalence with
    one gradient step needs every class to start from the same row.
    """
    if theta0 is not None:
        theta0 = np.asarray(theta0)
        if not np.all(theta0 == theta0[:1]):
            raise ValueError("prototype equivalence needs a symmetric init (all class rows equal)")
    V = prototype_vectors(episode, phi)
    q = episode.query_x if phi is None else phi(episode.query_x)
    return np.argmax(q @ V.T, axis=1)


# -- loss surface ---------------------------------------------------------------------
@dataclass(frozen=True)
class ScanResult:
    offsets: np.ndarray
    losses: np.ndarray  # NaN marks a gap where the loss was not finite
    second_differences: np.ndarray
    roughness: float


def surface_scan(
    loss_fn: LossFn,
    theta: ParamVector,
    direction: ParamVector | np.ndarray,
    half_width: float,
    samples: int = 21,
) -> ScanResult:
    """Loss along ``theta + s * d/|d|`` for ``s`` evenly spaced in ``[-hw, hw]``.

    Roughness is the mean squared second difference over gap-free triples.
    """
    if samples < 3:
        raise ValueError("samples must be >= 3")
    dflat = direction.flatten() if isinstance(direction, ParamVector) else np.asarray(direction)
    dn = np.linalg.norm(dflat)
    if dn == 0:
        raise ValueError("scan direction must be nonzero")
    dhat = ParamVector.unflatten(dflat / dn, theta)
    offsets = np.linspace(-half_width, half_width, samples)
    losses = np.empty(samples)
    for i, s in enumerate(offsets):
        point = theta.combine(dhat, lambda a, b, s=s: a + s * b)
        try:
            with no_grad():
                losses[i] = loss_fn(point).item()
        except NonFiniteError:
            losses[i] = np.nan
    sd = losses[2:] - 2.0 * losses[1:-1] + losses[:-2]
    valid = sd[np.isfinite(sd)]
    rough = float(np.mean(valid**2)) if valid.size else float("nan")
    return ScanResult(offsets, losses, sd, rough)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])
