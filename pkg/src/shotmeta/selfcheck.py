"""Fast oracle suite behind ``shotmeta selfcheck``.

Each check compares the engine with an independent computation from
:mod:`shotmeta.oracles` on a few small random instances. The full-size versions
live in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .diagnostics import QuadraticLoss, integrand_report, prototype_oracle
from .engine import InnerConfig, MetaState, ShotConfig, meta_grad_maml, outer_step_maml, outer_step_shot_r
from .models import ce_loss_fn, init_linear, init_model
from .params import ParamVector, hvp, loss_and_grad
from .tasks import PoolSpec, make_pool, sample_episode


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _rand_mlp(rng: np.random.Generator, max_params: int):
    while True:
        dims = [int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 5))]
        n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        if n <= max_params:
            return dims, init_model(dims, rng)


def check_gradients(n_models: int = 5, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        dims, model = _rand_mlp(rng, 500)
        x = rng.standard_normal((6, dims[0]))
        y = rng.integers(0, dims[-1], 6)
        _, g = loss_and_grad(ce_loss_fn(model, x, y), model.params)
        flat = model.params.flatten()
        fd = oracles.central_diff_grad(lambda v: oracles.mlp_ce(v, dims, x, y), flat)
        worst = max(worst, oracles.rel_error(g.flatten(), fd))
    return CheckResult("first-order AD vs finite differences", worst < 1e-5, f"max rel err {worst:.2e}")


def check_hvp(n_models: int = 5, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        dims, model = _rand_mlp(rng, 500)
        x = rng.standard_normal((6, dims[0]))
        y = rng.integers(0, dims[-1], 6)
        fn = ce_loss_fn(model, x, y)
        v = ParamVector.unflatten(rng.standard_normal(model.params.total_len), model.params)
        exact = hvp(fn, model.params, v, mode="exact").flatten()
        fd = hvp(fn, model.params, v, mode="fd").flatten()
        worst = max(worst, oracles.rel_error(exact, fd))
    return CheckResult("exact HVP vs finite-difference HVP", worst < 1e-4, f"max rel err {worst:.2e}")


def check_meta_gradient(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    pool = make_pool(PoolSpec(n_train=8, n_val=3, n_test=3, dim=4, high=3.0, low=-3.0, min_sep=1.0))
    worst = 0.0
    for steps in (1, 2, 3):
        dims = [4, 5, 3]
        model = init_model(dims, rng)
        ep = sample_episode(pool, 3, 2, 3, rng)
        # scale inputs down so the composed objective stays smooth at fd resolution
        sx, qx = ep.support_x / 3.0, ep.query_x / 3.0
        ep = type(ep)(sx, ep.support_y, qx, ep.query_y, ep.classes, ep.label_perm)
        cfg = InnerConfig(steps, 0.3)
        g, _ = meta_grad_maml(model.params, model, ep, cfg)
        fd = oracles.central_diff_grad(
            lambda v: oracles.maml_objective(v, dims, (sx, ep.support_y), (qx, ep.query_y), steps, 0.3),
            model.params.flatten(),
        )
        worst = max(worst, oracles.rel_error(g.flatten(), fd))
    return CheckResult("MAML meta-gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}")


def check_quadratic(n: int = 10, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(2, 6))
        A = oracles.random_spd(rng, d)
        q = QuadraticLoss(A, rng.standard_normal(d))
        theta = rng.standard_normal(d)
        alpha = float(rng.uniform(0.01, 0.3))
        rep = integrand_report(q, q.params(theta), alpha)
        want = oracles.quadratic_integral(A, q.gradient(theta), alpha)
        worst = max(worst, abs(rep.integral_estimate - want), abs(rep.loss_delta + alpha * rep.integral_estimate))
    return CheckResult("loss-decrease integrand on quadratics", worst < 1e-10, f"max abs err {worst:.2e}")


def check_prototypes(episodes: int = 50, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    pool = make_pool(PoolSpec())
    agree = 0
    for i in range(episodes):
        n_way = 2 if i % 2 == 0 else 5
        ep = sample_episode(pool, n_way, int(rng.integers(1, 6)), 5, rng, "test")
        lin = init_linear(n_way, pool.dim, seed=None)
        traj_pred = oracles.one_step_linear_predictions(
            ep.support_x, ep.support_y, ep.query_x, n_way, lin.params["weight"].data[0], 0.1)
        agree += int(np.array_equal(traj_pred, prototype_oracle(ep, theta0=lin.params["weight"].data)))
    return CheckResult("prototype oracle vs one-step linear GD", agree == episodes, f"{agree}/{episodes} episodes")


def check_lambda_zero(seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    pool = make_pool(PoolSpec())
    model = init_model([pool.dim, 8, 5], rng)
    batch = [sample_episode(pool, 5, 1, 5, rng) for _ in range(2)]
    state = MetaState.fresh(model.params)
    shot = ShotConfig.from_reference_lr(0.5, 1, 3, lam=0.0)
    a = outer_step_shot_r(state, batch, model, shot).state.theta0
    b = outer_step_maml(state, batch, model, shot.reference_inner()).state.theta0
    same = a.bitwise_equal(b)
    return CheckResult("lambda=0 SHOT update equals baseline", same, "bitwise" if same else "differs")


CHECKS = (check_gradients, check_hvp, check_meta_gradient, check_quadratic, check_prototypes, check_lambda_zero)


def run_selfcheck() -> list[CheckResult]:
    return [check() for check in CHECKS]
