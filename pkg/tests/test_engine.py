from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shotmeta import oracles
from shotmeta.checkpoint import CHECKPOINT_VERSION, load_checkpoint, save_checkpoint
from shotmeta.diagnostics import QuadraticLoss
from shotmeta.engine import (
    Adam,
    AdamState,
    InnerConfig,
    MetaState,
    ShotConfig,
    adam_update,
    build_reference_and_target,
    evaluate,
    inner_adapt,
    matched_lrs,
    meta_grad,
    meta_grad_fomaml,
    meta_grad_maml,
    outer_step_maml,
    outer_step_shot_r,
    pretrain_shot_p,
    pretrain_step,
    shot_loss,
)
from shotmeta.errors import ConfigError, InnerLoopError, TaskError
from shotmeta.models import InnerMask, ce_loss_fn, init_linear, init_model, init_projector
from shotmeta.params import ParamVector, loss_and_grad
from shotmeta.tasks import PoolSpec, make_pool, sample_episode
from shotmeta.tensor import Graph, Tensor


def _ep(pool, rng, n_way=5, k=1, q=5, split="train"):
    return sample_episode(pool, n_way, k, q, rng, split)


def _support(model, ep):
    return ce_loss_fn(model, ep.support_x, ep.support_y)


# -- configs -------------------------------------------------------------------------------
def test_inner_config_validation():
    with pytest.raises(ConfigError):
        InnerConfig(0, 0.1)
    with pytest.raises(ConfigError):
        InnerConfig(1, 0.0)
    InnerConfig(0, 0.0, allow_zero_steps=True)


def test_shot_config_rules():
    with pytest.raises(ConfigError):
        ShotConfig(t_steps=3, r_steps=3)
    with pytest.raises(ConfigError) as exc:
        ShotConfig(t_steps=0, r_steps=3, lr_target=-1.0, lam=-1.0, metric="cosine")
    assert len(exc.value.errors) >= 4
    assert ShotConfig(t_steps=1, r_steps=3, lr_target=0.5).lr_reference == pytest.approx(0.5 / 3)
    assert ShotConfig(t_steps=1, r_steps=3, lr_target=0.5).lr_reference == pytest.approx(0.16667, abs=1e-5)


def test_reference_anchor_keeps_lr_exact():
    cfg = ShotConfig.from_reference_lr(0.02, 1, 3)
    assert cfg.lr_reference == 0.02
    assert cfg.reference_inner().lr == 0.02
    assert cfg.test_time_inner().steps == 3


@given(lr=st.floats(1e-6, 10.0), t=st.integers(1, 8), extra=st.integers(1, 12),
       anchor=st.sampled_from(["reference", "target"]))
def test_matched_lrs_budget_is_exact(lr, t, extra, anchor):
    r = t + extra
    lr_t, lr_r = matched_lrs(lr, t, r, anchor)
    assert lr_t * t == lr_r * r
    kept = lr_r if anchor == "reference" else lr_t
    assert abs(kept - lr) <= 2 * math.ulp(lr)
    if anchor == "reference" and t == 1:
        assert lr_r == lr


def test_shot_config_always_matched():
    for cfg in (ShotConfig(3, 7, lr_target=0.1), ShotConfig.from_reference_lr(0.1, 3, 7)):
        a, b = cfg.budget
        assert a == b
    with pytest.raises(ConfigError, match="matched_lrs"):
        ShotConfig(1, 3, lr_target=0.3, lr_ref=0.1 + 1e-12)


# -- inner loop --------------------------------------------------------------------------------
def test_single_step_definition(small_model, pool, rng):
    ep = _ep(pool, rng)
    fn = _support(small_model, ep)
    traj = inner_adapt(small_model.params, fn, InnerConfig(1, 0.1))
    _, g = loss_and_grad(fn, small_model.params)
    want = small_model.params.combine(g, lambda a, b: a - 0.1 * b)
    assert traj.thetas[1].bitwise_equal(want)


@given(steps=st.integers(1, 4), lr=st.floats(1e-3, 0.5), seed=st.integers(0, 10_000))
def test_reconstruction_and_lengths(steps, lr, seed):
    rng = np.random.default_rng(seed)
    model = init_model([4, 6, 3], rng)
    fn = ce_loss_fn(model, rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
    mask = InnerMask.anil(model) if seed % 2 else None
    traj = inner_adapt(model.params, fn, InnerConfig(steps, lr, mask))
    assert len(traj.thetas) == steps + 1 and len(traj.grads) == steps and len(traj.losses) == steps + 1
    for k in range(steps):
        g = ParamVector.unflatten(traj.masked_grad(k), traj.thetas[k])
        # subtraction form is exact; the add-back form can differ in the last bit
        assert traj.thetas[k + 1].bitwise_equal(traj.thetas[k].combine(g, lambda a, b: a - lr * b))
        back = traj.thetas[k + 1].combine(g, lambda a, b: a + lr * b).flatten()
        np.testing.assert_allclose(back, traj.thetas[k].flatten(), rtol=0, atol=1e-12)


def test_all_frozen_mask_is_identity(small_model, pool, rng):
    fn = _support(small_model, _ep(pool, rng))
    traj = inner_adapt(small_model.params, fn, InnerConfig(5, 0.3, InnerMask.all_frozen(small_model.params)))
    assert traj.thetas[-1].bitwise_equal(small_model.params)


@given(steps=st.integers(1, 6), seed=st.integers(0, 1000))
def test_frozen_entries_never_move(steps, seed):
    rng = np.random.default_rng(seed)
    model = init_model([5, 4, 3], rng)
    fn = ce_loss_fn(model, rng.standard_normal((6, 5)), rng.integers(0, 3, 6))
    for mask in (InnerMask.anil(model), InnerMask.boil(model)):
        end = inner_adapt(model.params, fn, InnerConfig(steps, 0.2, mask)).thetas[-1]
        for name in mask.frozen_names():
            assert np.array_equal(end[name].data, model.params[name].data)


def test_quadratic_contraction_example():
    q = QuadraticLoss(np.eye(2), np.zeros(2))
    traj = inner_adapt(q.params(np.array([1.0, 1.0])), q, InnerConfig(2, 0.1))
    np.testing.assert_allclose(traj.thetas[-1]["theta"].data, [0.81, 0.81], rtol=0, atol=1e-15)


def test_non_finite_support_loss_reports_step():
    calls = {"n": 0}
    q = QuadraticLoss(np.eye(2), np.zeros(2))

    def flaky(params):
        calls["n"] += 1
        if calls["n"] == 3:
            return q(params) * Tensor(np.inf)
        return q(params)

    with pytest.raises(InnerLoopError) as exc:
        inner_adapt(q.params(np.ones(2)), flaky, InnerConfig(4, 0.1))
    assert exc.value.step == 2


def test_gradient_norm_guard():
    q = QuadraticLoss(np.eye(2) * 1e7, np.zeros(2))
    with pytest.raises(InnerLoopError, match="exceeds"):
        inner_adapt(q.params(np.ones(2)), q, InnerConfig(1, 0.1))


# -- meta-gradients ---------------------------------------------------------------------------
def test_zero_steps_gives_plain_query_gradient(small_model, pool, rng):
    ep = _ep(pool, rng)
    cfg = InnerConfig(0, 0.1, allow_zero_steps=True)
    g, _ = meta_grad_maml(small_model.params, small_model, ep, cfg)
    _, plain = loss_and_grad(ce_loss_fn(small_model, ep.query_x, ep.query_y), small_model.params)
    assert g.bitwise_equal(plain)
    fo, _ = meta_grad_fomaml(small_model.params, small_model, ep, cfg)
    assert fo.bitwise_equal(g)


def test_zero_lr_gives_plain_query_gradient(small_model, pool, rng):
    ep = _ep(pool, rng)
    g, _ = meta_grad_maml(small_model.params, small_model, ep, InnerConfig(3, 0.0, allow_zero_steps=True))
    _, plain = loss_and_grad(ce_loss_fn(small_model, ep.query_x, ep.query_y), small_model.params)
    np.testing.assert_allclose(g.flatten(), plain.flatten(), rtol=0, atol=1e-15)


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_meta_gradient_matches_finite_differences(steps):
    rng = np.random.default_rng(steps)
    dims = [3, 4, 3]
    model = init_model(dims, rng)
    sx, sy = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    qx, qy = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    g, _, _ = meta_grad(model.params, ce_loss_fn(model, sx, sy), ce_loss_fn(model, qx, qy),
                        InnerConfig(steps, 0.4))
    fd = oracles.central_diff_grad(
        lambda v: oracles.maml_objective(v, dims, (sx, sy), (qx, qy), steps, 0.4), model.params.flatten())
    assert oracles.rel_error(g.flatten(), fd) < 1e-4


def test_fomaml_equals_maml_when_support_hessian_vanishes(rng):
    # a linear support loss has identity inner Jacobian, so both meta-gradients coincide
    support = QuadraticLoss(np.zeros((3, 3)), rng.standard_normal(3))
    A = oracles.random_spd(rng, 3)
    query = QuadraticLoss(A, rng.standard_normal(3))
    theta = support.params(rng.standard_normal(3))
    so, _, _ = meta_grad(theta, support, query, InnerConfig(3, 0.2))
    fo, _, _ = meta_grad(theta, support, query, InnerConfig(3, 0.2), first_order=True)
    np.testing.assert_allclose(so.flatten(), fo.flatten(), rtol=0, atol=1e-8)


def test_fomaml_differs_on_relu_mlp(small_model, pool, rng):
    ep = _ep(pool, rng)
    so, _ = meta_grad_maml(small_model.params, small_model, ep, InnerConfig(2, 0.05))
    fo, _ = meta_grad_fomaml(small_model.params, small_model, ep, InnerConfig(2, 0.05))
    assert np.max(np.abs(so.flatten() - fo.flatten())) > 1e-6


# -- SHOT construction ----------------------------------------------------------------------
def test_target_reuses_reference_gradient(small_model, pool, rng):
    fn = _support(small_model, _ep(pool, rng))
    cfg = ShotConfig.from_reference_lr(0.02, 1, 3)
    target, reference = build_reference_and_target(small_model.params, fn, cfg)
    assert target.grads[0] is reference.grads[0]
    theta0 = small_model.params
    # the target step is built as R times the reference step's scaled gradient
    want = theta0.combine(reference.grads[0], lambda a, g: a - 3.0 * (0.02 * g))
    assert target.thetas[1].bitwise_equal(want)
    assert reference.thetas[1].bitwise_equal(theta0.combine(reference.grads[0], lambda a, g: a - 0.02 * g))
    np.testing.assert_allclose((target.thetas[1] - theta0).flatten(),
                               3.0 * (reference.thetas[1] - theta0).flatten(), rtol=1e-12, atol=1e-15)


def test_target_with_several_steps_runs_its_own_loop(small_model, pool, rng):
    fn = _support(small_model, _ep(pool, rng))
    cfg = ShotConfig.from_reference_lr(0.02, 2, 4)
    target, reference = build_reference_and_target(small_model.params, fn, cfg)
    assert target.steps == 2 and reference.steps == 4
    assert target.lr == pytest.approx(0.04)


def test_equal_branches_give_zero_shot_loss(small_model, pool, rng):
    ep = _ep(pool, rng)
    fn = _support(small_model, ep)
    cfg = ShotConfig(t_steps=3, r_steps=3, lr_target=0.02, allow_equal_steps=True)
    target, reference = build_reference_and_target(small_model.params, fn, cfg)
    assert target.thetas[-1].bitwise_equal(reference.thetas[-1])
    for metric, x in (("kl", ep.query_x), ("cross_entropy", ep.query_x), ("l2", None)):
        val = shot_loss(small_model, target.thetas[-1], reference.thetas[-1], x, metric).item()
        if metric == "cross_entropy":
            # soft CE of a distribution with itself is its entropy
            p = np.exp(small_model.forward(Tensor(ep.query_x), target.thetas[-1]).data)
            assert val > 0 and np.isfinite(val) and p.shape[0] == len(ep.query_x)
        else:
            assert val == 0.0


def test_shot_loss_metric_input_contract(small_model, pool, rng):
    ep = _ep(pool, rng)
    p = small_model.params
    with pytest.raises(ConfigError):
        shot_loss(small_model, p, p, ep.query_x, "l2")
    with pytest.raises(ConfigError):
        shot_loss(small_model, p, p, None, "kl")
    with pytest.raises(ConfigError):
        shot_loss(small_model, p, p, ep.query_x[:0], "cross_entropy")


def test_shot_loss_l2_example():
    a = ParamVector({"w": Tensor(np.ones(4))})
    b = ParamVector({"w": Tensor(np.zeros(4))})
    assert shot_loss(None, a, b, None, "l2").item() == 2.0


def test_kl_shot_loss_nonnegative(small_model, pool, rng):
    for _ in range(200):
        ep = _ep(pool, rng)
        other = small_model.params.combine(
            ParamVector.unflatten(rng.standard_normal(small_model.params.total_len), small_model.params),
            lambda a, b: a + 0.1 * b)
        assert shot_loss(small_model, small_model.params, other, ep.query_x, "kl").item() >= 0.0


@pytest.mark.parametrize("metric", ["kl", "cross_entropy", "l2"])
def test_detached_reference_receives_no_gradient(small_model, pool, rng, metric):
    ep = _ep(pool, rng)
    with Graph():
        t_end = small_model.params.as_leaves()
        r_end = small_model.params.combine(small_model.params, lambda a, b: a + 0.01 * b).as_leaves()
        x = None if metric == "l2" else ep.query_x
        loss = shot_loss(small_model, t_end, r_end, x, metric, detach_reference=True)
        from shotmeta.tensor import grad

        g = grad(loss, r_end.tensors())
    assert all(np.all(t.data == 0.0) for t in g)


def test_lambda_zero_is_bitwise_baseline(small_model, pool, rng):
    batch = [_ep(pool, rng) for _ in range(3)]
    state = MetaState.fresh(small_model.params)
    shot = ShotConfig.from_reference_lr(0.02, 1, 3, lam=0.0)
    a = outer_step_shot_r(state, batch, small_model, shot).state
    b = outer_step_maml(state, batch, small_model, InnerConfig(3, 0.02)).state
    assert a.theta0.bitwise_equal(b.theta0)
    fa = outer_step_shot_r(state, batch, small_model, shot, first_order=True).state
    fb = outer_step_maml(state, batch, small_model, InnerConfig(3, 0.02), first_order=True).state
    assert fa.theta0.bitwise_equal(fb.theta0)


def test_lambda_continuity(small_model, pool, rng):
    batch = [_ep(pool, rng) for _ in range(2)]
    state = MetaState.fresh(small_model.params)
    from shotmeta.engine import _shot_task_grad

    def task_grad(lam):
        shot = ShotConfig.from_reference_lr(0.02, 1, 3, lam=lam)
        return _shot_task_grad(state.theta0, small_model, batch[0], shot, None, False)[0]

    base = task_grad(0.0)
    diffs = []
    for lam in (1e-1, 1e-3, 1e-5):
        g = task_grad(lam)
        diffs.append(np.max(np.abs(g.flatten() - base.flatten())))
    # the regularizer enters linearly in lambda
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[1] / diffs[0] == pytest.approx(1e-2, rel=1e-3)


def test_task_error_carries_index(small_model, pool, rng):
    good = _ep(pool, rng)
    huge = dataclasses.replace(good, support_x=good.support_x * 1e12)
    state = MetaState.fresh(small_model.params)
    with pytest.raises(TaskError) as exc:
        outer_step_maml(state, [good, huge], small_model, InnerConfig(1, 0.1))
    assert exc.value.task_index == 1
    with pytest.raises(TaskError):
        outer_step_shot_r(state, [huge], small_model, ShotConfig.from_reference_lr(0.1, 1, 3))


def test_empty_meta_batch(small_model):
    with pytest.raises(ConfigError):
        outer_step_maml(MetaState.fresh(small_model.params), [], small_model, InnerConfig(1, 0.1))


# -- pretrainer ------------------------------------------------------------------------------------
class _Poisoned:
    """Query labels that explode on any read."""

    def __array__(self, *a, **k):
        raise AssertionError("query labels were read")

    def __getitem__(self, item):
        raise AssertionError("query labels were read")

    def __len__(self):
        raise AssertionError("query labels were read")


def test_pretraining_never_reads_query_labels(small_model, pool):
    rng = np.random.default_rng(0)
    batch = [_ep(pool, rng) for _ in range(2)]
    poisoned = [dataclasses.replace(ep, query_y=_Poisoned()) for ep in batch]
    permuted = [dataclasses.replace(ep, query_y=ep.query_y[::-1].copy()) for ep in batch]
    shot = ShotConfig.from_reference_lr(0.02, 1, 3, variant="pretrainer")
    proj = init_projector(5, 1)
    state = MetaState.fresh(small_model.params)
    outs = [
        pretrain_step(state, b, small_model, shot, proj, np.random.default_rng(5)).state.theta0
        for b in (batch, poisoned, permuted)
    ]
    assert outs[0].bitwise_equal(outs[1]) and outs[0].bitwise_equal(outs[2])


def test_pretraining_contract_errors(small_model, pool):
    state = MetaState.fresh(small_model.params)
    with pytest.raises(ConfigError):
        pretrain_shot_p(state, small_model, pool, ShotConfig(), init_projector(5, 0), 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        pretrain_shot_p(state, small_model, pool, ShotConfig(variant="pretrainer"), None, 1,
                        np.random.default_rng(0))


def test_zero_epoch_pretraining_is_identity(small_model, pool):
    state = MetaState.fresh(small_model.params)
    out = pretrain_shot_p(state, small_model, pool, ShotConfig(variant="pretrainer"), init_projector(5, 0),
                          0, np.random.default_rng(0))
    assert out.theta0.bitwise_equal(small_model.params)


def test_pretraining_returns_best_validation_snapshot(small_model, pool):
    seen = []
    out = pretrain_shot_p(
        MetaState.fresh(small_model.params), small_model, pool,
        ShotConfig.from_reference_lr(0.02, 1, 3, variant="pretrainer"), init_projector(5, 0), 3,
        np.random.default_rng(0), val_episodes=5, q_query=3, on_epoch=lambda e, r, acc: seen.append(acc),
    )
    assert out.best_val[0] >= max(seen)
    assert out.theta0.bitwise_equal(out.best_val[1])


def test_projector_is_untouched_by_pretraining(small_model, pool):
    proj = init_projector(5, 3)
    before = proj.params.flatten().copy()
    pretrain_step(MetaState.fresh(small_model.params), [_ep(pool, np.random.default_rng(1))], small_model,
                  ShotConfig(variant="pretrainer"), proj, np.random.default_rng(2))
    assert np.array_equal(proj.params.flatten(), before)


# -- optimizer, state, evaluation -------------------------------------------------------------
def test_adam_first_step_is_sign_times_lr():
    theta = ParamVector({"w": Tensor([1.0, -2.0, 0.5])})
    g = ParamVector({"w": Tensor([0.3, -4.0, 0.0])})
    new, st_ = adam_update(theta, g, AdamState.zeros(theta), Adam(lr=1e-3))
    # bias-corrected first step is g / (|g| + eps)
    want = np.array([1.0, -2.0, 0.5]) - 1e-3 * np.array([0.3, -4.0, 0.0]) / (np.abs([0.3, -4.0, 0.0]) + 1e-8)
    np.testing.assert_allclose(new["w"].data, want, rtol=1e-12)
    assert st_.t == 1


def test_adam_matches_reference_recursion(rng):
    theta = ParamVector({"w": Tensor(rng.standard_normal(4))})
    state = AdamState.zeros(theta)
    w, m, v = theta["w"].data.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        gk = rng.standard_normal(4)
        theta, state = adam_update(theta, ParamVector({"w": Tensor(gk)}), state)
        m = 0.9 * m + 0.1 * gk
        v = 0.999 * v + 0.001 * gk**2
        w = w - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(theta["w"].data, w, rtol=1e-13)


def test_record_val_tracks_maximum(small_model):
    state = MetaState.fresh(small_model.params)
    for acc in (0.3, 0.5, 0.4, 0.5):
        state.record_val(acc)
    assert state.best_val[0] == 0.5


def test_checkpoint_round_trip(tmp_path, small_model, pool, rng):
    state = outer_step_maml(MetaState.fresh(small_model.params), [_ep(pool, rng)], small_model,
                            InnerConfig(1, 0.1)).state
    state.epoch = 7
    state.record_val(0.42)
    path = save_checkpoint(tmp_path / "c.npz", state)
    back = load_checkpoint(path)
    assert back.theta0.bitwise_equal(state.theta0) and back.epoch == 7 and back.opt.t == state.opt.t
    assert all(np.array_equal(back.opt.m[k], state.opt.m[k]) for k in state.opt.m)
    assert all(np.array_equal(back.opt.v[k], state.opt.v[k]) for k in state.opt.v)
    assert back.best_val[0] == 0.42 and back.best_val[1].bitwise_equal(state.best_val[1])
    assert CHECKPOINT_VERSION == 1


def test_random_init_is_near_chance_with_frozen_inner_loop():
    pool = make_pool(PoolSpec())
    lin = init_linear(5, 16, seed=0, symmetric=True)
    cfg = InnerConfig(1, 0.1, InnerMask.all_frozen(lin.params))
    res = evaluate(lin.params, lin, pool, "test", 200, cfg, np.random.default_rng(0))
    # constant logits: argmax is always class 0, exactly one class in five
    assert res.mean == pytest.approx(0.2, abs=1e-12)


def test_untrained_mlp_near_chance_without_adaptation():
    pool = make_pool(PoolSpec())
    model = init_model([16, 32, 5], 0)
    cfg = InnerConfig(1, 0.1, InnerMask.all_frozen(model.params))
    res = evaluate(model.params, model, pool, "test", 300, cfg, np.random.default_rng(0))
    assert abs(res.mean - 0.2) < 3 * res.ci95 + 0.02


def test_evaluate_is_deterministic(small_model, pool):
    a = evaluate(small_model.params, small_model, pool, "val", 20, InnerConfig(2, 0.05), np.random.default_rng(4))
    b = evaluate(small_model.params, small_model, pool, "val", 20, InnerConfig(2, 0.05), np.random.default_rng(4))
    assert a.mean == b.mean and a.ci95 == b.ci95
