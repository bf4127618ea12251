"""Gradient-based meta-learning: inner adaptation, MAML/FoMAML meta-gradients,
and the SHOT trajectory-distortion penalty (regularizer and label-free pretrainer).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InnerLoopError, NonFiniteError, TaskError
from .models import (
    InnerMask,
    LossFn,
    Projector,
    ce_loss_fn,
    kl_div,
    param_l2,
    predict,
    soft_cross_entropy,
)
from .params import ParamVector, param_grad
from .tasks import ClassPool, Episode, augment, sample_episode
from .tensor import Graph, Tensor, add, no_grad, scale, sub

METRICS = ("kl", "cross_entropy", "l2")
VARIANTS = ("regularizer", "pretrainer")


# -- configuration ------------------------------------------------------------
@dataclass(frozen=True)
class InnerConfig:
    """T plain gradient steps of size ``lr`` on the support loss.

    ``allow_zero_steps`` exists for degenerate meta-gradient tests only.
    """

    steps: int
    lr: float
    mask: InnerMask | None = None
    max_grad_norm: float = 1e6
    allow_zero_steps: bool = False

    def __post_init__(self) -> None:
        errs = []
        lowest = 0 if self.allow_zero_steps else 1
        if int(self.steps) != self.steps or self.steps < lowest:
            errs.append(f"inner steps must be an integer >= {lowest}, got {self.steps}")
        if not self.lr > 0 and not (self.allow_zero_steps and self.lr == 0):
            errs.append(f"inner lr must be > 0, got {self.lr}")
        if errs:
            raise ConfigError(errs)


def _solve_exact(budget: float, steps: int, search: int = 4) -> float | None:
    """A double ``x`` with ``x * steps == budget`` in floating point, if one is near."""
    x0 = budget / steps
    for direction in (math.inf, -math.inf):
        x = x0
        for _ in range(search):
            if x * steps == budget:
                return x
            x = math.nextafter(x, direction)
    return None


def matched_lrs(lr: float, t_steps: int, r_steps: int, anchor: str = "reference",
                max_ulps: int = 64) -> tuple[float, float]:
    """``(lr_target, lr_reference)`` with ``lr_target * T == lr_reference * R`` exactly.

    The anchored lr is kept if the other side can match it exactly; otherwise it
    moves by the fewest ulps that make an exact match possible (at most 2 in
    practice). For T == 1 the anchor never moves.
    """
    own, other = (r_steps, t_steps) if anchor == "reference" else (t_steps, r_steps)
    up = down = float(lr)
    for i in range(max_ulps):
        for cand in ((up,) if i == 0 else (up, down)):
            partner = _solve_exact(cand * own, other)
            if partner is not None and partner > 0:
                return (partner, cand) if anchor == "reference" else (cand, partner)
        up, down = math.nextafter(up, math.inf), math.nextafter(down, -math.inf)
    raise ConfigError(f"no exactly matched learning rates near {lr} for T={t_steps} R={r_steps}")


@dataclass(frozen=True)
class ShotConfig:
    """Target (T steps, lr_target) vs reference (R steps, lr_reference = T/R * lr_target).

    Both rates are resolved through :func:`matched_lrs`, so ``lr_target * T ==
    lr_reference * R`` holds exactly in floating point.

    ``task_loss_at`` picks the branch whose endpoint carries the query task loss;
    that branch is also the one used at test time. ``allow_equal_steps`` is a
    test-only escape from the ``T < R`` rule.
    """

    t_steps: int = 1
    r_steps: int = 3
    lr_target: float = 1.5
    lam: float = 0.1
    metric: str = "kl"
    variant: str = "regularizer"
    detach_reference: bool = True
    task_loss_at: str = "reference"
    allow_equal_steps: bool = False
    lr_ref: float | None = None  # resolved from lr_target when not given

    def __post_init__(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        if self.lr_ref is None:
            lr_t, lr_r = matched_lrs(self.lr_target, self.t_steps, self.r_steps, anchor="target")
            object.__setattr__(self, "lr_target", lr_t)
            object.__setattr__(self, "lr_ref", lr_r)

    def problems(self) -> list[str]:
        errs = []
        if self.t_steps < 1:
            errs.append(f"t_steps must be >= 1, got {self.t_steps}")
        if self.allow_equal_steps:
            if self.t_steps > self.r_steps:
                errs.append(f"t_steps ({self.t_steps}) must not exceed r_steps ({self.r_steps})")
        elif self.t_steps >= self.r_steps:
            errs.append(f"t_steps ({self.t_steps}) must be < r_steps ({self.r_steps})")
        if not self.lr_target > 0:
            errs.append(f"lr_target must be > 0, got {self.lr_target}")
        if self.lr_ref is not None:
            if not self.lr_ref > 0:
                errs.append(f"lr_ref must be > 0, got {self.lr_ref}")
            elif self.lr_target * self.t_steps != self.lr_ref * self.r_steps:
                errs.append(f"lr_target * T ({self.lr_target * self.t_steps!r}) must equal "
                            f"lr_ref * R ({self.lr_ref * self.r_steps!r}); use matched_lrs")
        if self.lam < 0:
            errs.append(f"lambda must be >= 0, got {self.lam}")
        if self.metric not in METRICS:
            errs.append(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.variant not in VARIANTS:
            errs.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task_loss_at not in ("reference", "target"):
            errs.append(f"task_loss_at must be 'reference' or 'target', got {self.task_loss_at!r}")
        return errs

    @property
    def lr_reference(self) -> float:
        return self.lr_ref

    @property
    def budget(self) -> tuple[float, float]:
        """``(lr_target * T, lr_reference * R)``; the two entries are always equal."""
        return self.lr_target * self.t_steps, self.lr_ref * self.r_steps

    @classmethod
    def from_reference_lr(cls, lr_reference: float, t_steps: int = 1, r_steps: int = 3, **kw):
        """Anchor the reference branch at ``lr_reference`` (the baseline inner lr).

        See :func:`matched_lrs` for when the anchor moves by an ulp or two.
        """
        if not lr_reference > 0 or t_steps < 1 or r_steps < 1:
            return cls(t_steps=t_steps, r_steps=r_steps, lr_target=lr_reference, lr_ref=lr_reference, **kw)
        lr_t, lr_r = matched_lrs(lr_reference, t_steps, r_steps, anchor="reference")
        return cls(t_steps=t_steps, r_steps=r_steps, lr_target=lr_t, lr_ref=lr_r, **kw)

    def reference_inner(self, mask: InnerMask | None = None) -> InnerConfig:
        return InnerConfig(self.r_steps, self.lr_reference, mask)

    def target_inner(self, mask: InnerMask | None = None) -> InnerConfig:
        return InnerConfig(self.t_steps, self.lr_target, mask)

    def test_time_inner(self, mask: InnerMask | None = None) -> InnerConfig:
        if self.task_loss_at == "reference":
            return self.reference_inner(mask)
        return self.target_inner(mask)


# -- inner loop -----------------------------------------------------------------
@dataclass
class Trajectory:
    """theta^0..theta^T, raw support gradients g^0..g^{T-1}, support losses at every theta."""

    thetas: list[ParamVector]
    grads: list[ParamVector]
    losses: list[float]
    lr: float
    mask: InnerMask | None = None

    @property
    def steps(self) -> int:
        return len(self.grads)

    def masked_grad(self, k: int) -> np.ndarray:
        g = self.grads[k]
        parts = [
            t.data.reshape(-1) if (self.mask is None or self.mask[name]) else np.zeros(t.size)
            for name, t in g.items()
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def detached(self) -> "Trajectory":
        return Trajectory(
            [t.detach() for t in self.thetas],
            [g.detach() for g in self.grads],
            list(self.losses),
            self.lr,
            self.mask,
        )


def _step(theta: ParamVector, g: ParamVector, lr: float, mask: InnerMask | None) -> ParamVector:
    out = {}
    for name, t in theta.items():
        if mask is None or mask[name]:
            out[name] = sub(t, scale(g[name], lr))
        else:
            out[name] = t
    return ParamVector(out)


def _stretched_step(
    theta: ParamVector, g: ParamVector, lr: float, factor: int, mask: InnerMask | None
) -> ParamVector:
    """``theta - factor * (lr * g)``: one step ``factor`` times as long as an ``lr`` step."""
    out = {}
    for name, t in theta.items():
        if mask is None or mask[name]:
            out[name] = sub(t, scale(scale(g[name], lr), float(factor)))
        else:
            out[name] = t
    return ParamVector(out)


def _grad_norm(g: ParamVector) -> float:
    return math.sqrt(sum(float(np.sum(t.data * t.data)) for t in g.tensors()))


def _support_loss(loss_fn: LossFn, theta: ParamVector, k: int) -> Tensor:
    try:
        loss = loss_fn(theta)
    except NonFiniteError as exc:
        raise InnerLoopError(k, f"non-finite support loss ({exc})") from exc
    return loss


def inner_adapt(
    theta0: ParamVector, loss_fn: LossFn, cfg: InnerConfig, track: bool = False
) -> Trajectory:
    """Run ``cfg.steps`` full-batch gradient steps on ``loss_fn`` from ``theta0``.

    With ``track`` the returned thetas stay connected to ``theta0`` through every
    step (second-order graph); pass requires-grad leaves to differentiate later.
    Without it each iterate is a detached constant.
    """
    if cfg.mask is not None:
        cfg.mask.check(theta0)
    if track:
        theta = theta0 if all(t.requires_grad for t in theta0.tensors()) else theta0.as_leaves()
    else:
        theta = theta0.detach()
    thetas, grads, losses = [theta], [], []
    for k in range(cfg.steps):
        leaves = theta if track else theta.as_leaves()
        loss = _support_loss(loss_fn, leaves, k)
        if not loss.requires_grad:
            g = ParamVector.zeros_like(leaves)
        else:
            g = param_grad(loss, leaves, create_graph=track)
        norm = _grad_norm(g)
        if norm > cfg.max_grad_norm:
            raise InnerLoopError(k, f"support gradient norm {norm:.3e} exceeds {cfg.max_grad_norm:.0e}")
        losses.append(loss.item())
        if track:
            theta = _step(leaves, g, cfg.lr, cfg.mask)
        else:
            with no_grad():
                theta = _step(theta, g, cfg.lr, cfg.mask)
            g = g.detach()
        thetas.append(theta)
        grads.append(g)
    with no_grad():
        losses.append(_support_loss(loss_fn, theta, cfg.steps).item())
    return Trajectory(thetas, grads, losses, cfg.lr, cfg.mask)


# -- meta-gradients ------------------------------------------------------------------
def meta_grad(
    theta0: ParamVector,
    support_loss: LossFn,
    query_loss: LossFn,
    cfg: InnerConfig,
    first_order: bool = False,
) -> tuple[ParamVector, float, Trajectory]:
    """Gradient of ``query_loss(theta^T)`` with respect to ``theta0``.

    Second-order differentiates through every inner step; first-order takes the
    gradient at ``theta^T`` and uses it as the gradient at ``theta0``.
    """
    with Graph():
        if first_order:
            traj = inner_adapt(theta0, support_loss, cfg, track=False)
            end = traj.thetas[-1].as_leaves()
            loss = query_loss(end)
            g = param_grad(loss, end) if loss.requires_grad else ParamVector.zeros_like(end)
        else:
            leaves = theta0.as_leaves()
            traj = inner_adapt(leaves, support_loss, cfg, track=True)
            loss = query_loss(traj.thetas[-1])
            g = param_grad(loss, leaves) if loss.requires_grad else ParamVector.zeros_like(leaves)
            traj = traj.detached()
    return g.detach(), loss.item(), traj


def meta_grad_maml(theta0: ParamVector, model, episode: Episode, cfg: InnerConfig):
    """Second-order meta-gradient and query loss for one episode."""
    g, loss, _ = meta_grad(
        theta0,
        ce_loss_fn(model, episode.support_x, episode.support_y),
        ce_loss_fn(model, episode.query_x, episode.query_y),
        cfg,
        first_order=False,
    )
    return g, loss


def meta_grad_fomaml(theta0: ParamVector, model, episode: Episode, cfg: InnerConfig):
    """First-order meta-gradient and query loss for one episode."""
    g, loss, _ = meta_grad(
        theta0,
        ce_loss_fn(model, episode.support_x, episode.support_y),
        ce_loss_fn(model, episode.query_x, episode.query_y),
        cfg,
        first_order=True,
    )
    return g, loss


# -- SHOT ------------------------------------------------------------------------------
def build_reference_and_target(
    theta0: ParamVector,
    loss_fn: LossFn,
    shot_cfg: ShotConfig,
    mask: InnerMask | None = None,
    track: bool = False,
) -> tuple[Trajectory, Trajectory]:
    """Run the slow reference (R steps) and the fast target (T steps) from one start.

    For T == 1 the target's only gradient is the reference's first gradient, so
    no extra backward pass is spent on it.
    """
    errs = shot_cfg.problems()
    if errs:
        raise ConfigError(errs)
    reference = inner_adapt(theta0, loss_fn, shot_cfg.reference_inner(mask), track=track)
    if shot_cfg.t_steps != 1:
        target = inner_adapt(theta0, loss_fn, shot_cfg.target_inner(mask), track=track)
        return target, reference
    start, g0 = reference.thetas[0], reference.grads[0]
    # the step is R times the reference's first step, so the two agree bitwise
    r, lr_r = shot_cfg.r_steps, shot_cfg.lr_reference
    if track:
        end = _stretched_step(start, g0, lr_r, r, mask)
    else:
        with no_grad():
            end = _stretched_step(start, g0, lr_r, r, mask)
    with no_grad():
        end_loss = _support_loss(loss_fn, end, 1).item()
    target = Trajectory([start, end], [g0], [reference.losses[0], end_loss], shot_cfg.lr_target, mask)
    return target, reference


def shot_loss(
    model,
    target_end: ParamVector,
    reference_end: ParamVector,
    query_x: np.ndarray | None,
    metric: str = "kl",
    detach_reference: bool = True,
    projector: Projector | None = None,
    reference_query_x: np.ndarray | None = None,
) -> Tensor:
    """Distance between the adapted target and reference models.

    ``kl`` and ``cross_entropy`` compare predictive distributions on the query
    inputs (mean over points); ``l2`` compares parameters and takes no inputs.
    ``reference_query_x`` lets the reference branch see a different view of the
    same points (augmentation); ``projector`` is applied to reference logits only.
    """
    if metric == "l2":
        if query_x is not None or reference_query_x is not None:
            raise ConfigError("l2 SHOT metric compares parameters and takes no query inputs")
        ref = reference_end.detach() if detach_reference else reference_end
        return param_l2(target_end, ref)
    if metric not in ("kl", "cross_entropy"):
        raise ConfigError(f"unknown SHOT metric {metric!r}")
    if query_x is None or len(query_x) == 0:
        raise ConfigError(f"{metric} SHOT metric needs at least one query input")
    ref_x = query_x if reference_query_x is None else reference_query_x
    if len(ref_x) != len(query_x):
        raise ConfigError("reference and target query views differ in length")
    target_logits = model.forward(Tensor(query_x), target_end)
    if detach_reference:
        with no_grad():
            ref_logits = model.forward(Tensor(ref_x), reference_end.detach())
            if projector is not None:
                ref_logits = projector(ref_logits)
    else:
        ref_logits = model.forward(Tensor(ref_x), reference_end)
        if projector is not None:
            ref_logits = projector(ref_logits)
    if metric == "kl":
        return kl_div(target_logits, ref_logits)
    return soft_cross_entropy(target_logits, ref_logits)


# -- meta-optimizer and state -------------------------------------------------------------
@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> "AdamState":
        return cls(
            {k: np.zeros(t.shape) for k, t in params.items()},
            {k: np.zeros(t.shape) for k, t in params.items()},
            0,
        )


@dataclass
class MetaState:
    theta0: ParamVector
    opt: AdamState
    epoch: int = 0
    best_val: tuple[float, ParamVector] | None = None

    @classmethod
    def fresh(cls, theta0: ParamVector) -> "MetaState":
        return cls(theta0.detach(), AdamState.zeros(theta0))

    def record_val(self, accuracy: float) -> bool:
        """Keep a snapshot if ``accuracy`` beats the best seen. Returns True on improvement."""
        if self.best_val is None or accuracy > self.best_val[0]:
            self.best_val = (float(accuracy), self.theta0.detach())
            return True
        return False


def adam_update(
    theta: ParamVector, g: ParamVector, state: AdamState, opt: Adam = Adam()
) -> tuple[ParamVector, AdamState]:
    t = state.t + 1
    m, v, out = {}, {}, {}
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in theta.items():
        gk = g[name].data
        m[name] = opt.beta1 * state.m[name] + (1.0 - opt.beta1) * gk
        v[name] = opt.beta2 * state.v[name] + (1.0 - opt.beta2) * gk * gk
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        out[name] = Tensor(p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    return ParamVector(out), AdamState(m, v, t)


def _average(grads: Sequence[ParamVector]) -> ParamVector:
    total = grads[0].map(np.copy)
    for g in grads[1:]:
        total = total + g
    return total.scaled(1.0 / len(grads))


@dataclass
class OuterStepResult:
    state: MetaState
    metrics: dict[str, float]
    trajectories: list[Trajectory] = field(default_factory=list)
    loss_fns: list[LossFn] = field(default_factory=list)


def _apply(state: MetaState, grads: list[ParamVector], opt: Adam) -> MetaState:
    theta, adam = adam_update(state.theta0, _average(grads), state.opt, opt)
    return MetaState(theta, adam, state.epoch, state.best_val)


def outer_step_maml(
    state: MetaState,
    meta_batch: Sequence[Episode],
    model,
    inner: InnerConfig,
    first_order: bool = False,
    opt: Adam = Adam(),
) -> OuterStepResult:
    """One baseline meta-update (MAML, or FoMAML with ``first_order``)."""
    if not meta_batch:
        raise ConfigError("meta_batch is empty")
    grads, losses, trajs, fns = [], [], [], []
    for i, ep in enumerate(meta_batch):
        support = ce_loss_fn(model, ep.support_x, ep.support_y)
        try:
            g, loss, traj = meta_grad(
                state.theta0, support, ce_loss_fn(model, ep.query_x, ep.query_y), inner, first_order
            )
        except (InnerLoopError, NonFiniteError) as exc:
            raise TaskError(i, exc) from exc
        grads.append(g)
        losses.append(loss)
        trajs.append(traj)
        fns.append(support)
    metrics = {"query_loss": float(np.mean(losses)), "shot_loss": float("nan")}
    return OuterStepResult(_apply(state, grads, opt), metrics, trajs, fns)


def _shot_task_grad(
    theta0: ParamVector, model, ep: Episode, cfg: ShotConfig, mask, first_order: bool
) -> tuple[ParamVector, float, float, Trajectory]:
    support = ce_loss_fn(model, ep.support_x, ep.support_y)
    query = ce_loss_fn(model, ep.query_x, ep.query_y)
    with Graph():
        if first_order:
            target, reference = build_reference_and_target(theta0, support, cfg, mask, track=False)
            task_end = reference if cfg.task_loss_at == "reference" else target
            end = task_end.thetas[-1].as_leaves()
            task = query(end)
            g_task = param_grad(task, end)
            t_end = target.thetas[-1].as_leaves()
            metric_x = None if cfg.metric == "l2" else ep.query_x
            shot = shot_loss(
                model, t_end, reference.thetas[-1], metric_x, cfg.metric, cfg.detach_reference
            )
            g_shot = param_grad(shot, t_end) if shot.requires_grad else ParamVector.zeros_like(t_end)
            g = g_task.combine(g_shot, lambda a, b: a + cfg.lam * b)
            return g, task.item(), shot.item(), (reference if task_end is reference else target)
        leaves = theta0.as_leaves()
        target, reference = build_reference_and_target(leaves, support, cfg, mask, track=True)
        task_end = reference if cfg.task_loss_at == "reference" else target
        task = query(task_end.thetas[-1])
        metric_x = None if cfg.metric == "l2" else ep.query_x
        shot = shot_loss(
            model, target.thetas[-1], reference.thetas[-1], metric_x, cfg.metric, cfg.detach_reference
        )
        # task term first: keeps the backward accumulation order of the baseline
        total = add(task, scale(shot, cfg.lam))
        g = param_grad(total, leaves)
        return g.detach(), task.item(), shot.item(), task_end.detached()


def outer_step_shot_r(
    state: MetaState,
    meta_batch: Sequence[Episode],
    model,
    shot_cfg: ShotConfig,
    mask: InnerMask | None = None,
    first_order: bool = False,
    opt: Adam = Adam(),
) -> OuterStepResult:
    """Meta-update on ``task loss + lambda * SHOT`` averaged over the batch."""
    if not meta_batch:
        raise ConfigError("meta_batch is empty")
    grads, losses, shots, trajs, fns = [], [], [], [], []
    for i, ep in enumerate(meta_batch):
        try:
            g, task, shot, traj = _shot_task_grad(state.theta0, model, ep, shot_cfg, mask, first_order)
        except (InnerLoopError, NonFiniteError) as exc:
            raise TaskError(i, exc) from exc
        grads.append(g)
        losses.append(task)
        shots.append(shot)
        trajs.append(traj)
        fns.append(ce_loss_fn(model, ep.support_x, ep.support_y))
    metrics = {"query_loss": float(np.mean(losses)), "shot_loss": float(np.mean(shots))}
    return OuterStepResult(_apply(state, grads, opt), metrics, trajs, fns)


def pretrain_step(
    state: MetaState,
    meta_batch: Sequence[Episode],
    model,
    shot_cfg: ShotConfig,
    projector: Projector | None,
    rng: np.random.Generator,
    noise_std: float = 0.25,
    mask: InnerMask | None = None,
    opt: Adam = Adam(),
) -> OuterStepResult:
    """One label-free meta-update on the SHOT loss alone.

    Only support labels (inside the inner loops) and query *inputs* are used.
    Each branch sees its own augmented view of the query points.
    """
    if shot_cfg.variant != "pretrainer":
        raise ConfigError("pretrain_step needs a ShotConfig with variant='pretrainer'")
    if projector is None:
        raise ConfigError("SHOT pretraining needs a projector on the reference branch")
    if not meta_batch:
        raise ConfigError("meta_batch is empty")
    grads, shots, trajs, fns = [], [], [], []
    for i, ep in enumerate(meta_batch):
        support = ce_loss_fn(model, ep.support_x, ep.support_y)
        view_t = augment(ep.query_x, rng, noise_std)
        view_r = augment(ep.query_x, rng, noise_std)
        try:
            with Graph():
                leaves = state.theta0.as_leaves()
                target, reference = build_reference_and_target(
                    leaves, support, shot_cfg, mask, track=True
                )
                if shot_cfg.metric == "l2":
                    loss = shot_loss(model, target.thetas[-1], reference.thetas[-1], None, "l2",
                                     shot_cfg.detach_reference)
                else:
                    loss = shot_loss(
                        model, target.thetas[-1], reference.thetas[-1], view_t, shot_cfg.metric,
                        shot_cfg.detach_reference, projector, reference_query_x=view_r,
                    )
                g = param_grad(loss, leaves) if loss.requires_grad else ParamVector.zeros_like(leaves)
        except (InnerLoopError, NonFiniteError) as exc:
            raise TaskError(i, exc) from exc
        grads.append(g.detach())
        shots.append(loss.item())
        trajs.append((reference if shot_cfg.task_loss_at == "reference" else target).detached())
        fns.append(support)
    metrics = {"query_loss": float("nan"), "shot_loss": float(np.mean(shots))}
    return OuterStepResult(_apply(state, grads, opt), metrics, trajs, fns)


# -- evaluation -------------------------------------------------------------------------
@dataclass(frozen=True)
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f} +/- {100 * self.ci95:.2f}"


def episode_accuracy(theta0: ParamVector, model, ep: Episode, cfg: InnerConfig) -> float:
    traj = inner_adapt(theta0, ce_loss_fn(model, ep.support_x, ep.support_y), cfg, track=False)
    with no_grad():
        logits = model.forward(Tensor(ep.query_x), traj.thetas[-1])
    return float(np.mean(predict(logits) == np.asarray(ep.query_y)))


def evaluate(
    theta0: ParamVector,
    model,
    pool: ClassPool,
    split: str,
    episodes: int,
    cfg: InnerConfig,
    rng: np.random.Generator,
    n_way: int = 5,
    k_shot: int = 1,
    q_query: int = 15,
) -> EvalResult:
    """Mean query accuracy after adaptation, with a normal-approximation 95% CI."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    accs = np.array(
        [
            episode_accuracy(theta0, model, sample_episode(pool, n_way, k_shot, q_query, rng, split), cfg)
            for _ in range(episodes)
        ]
    )
    ci = 1.96 * accs.std(ddof=1) / math.sqrt(episodes) if episodes > 1 else float("nan")
    return EvalResult(float(accs.mean()), float(ci), accs)


def sample_meta_batch(
    pool: ClassPool, size: int, n_way: int, k_shot: int, q_query: int,
    rng: np.random.Generator, split: str = "train",
) -> list[Episode]:
    return [sample_episode(pool, n_way, k_shot, q_query, rng, split) for _ in range(size)]


def pretrain_shot_p(
    state: MetaState,
    model,
    pool: ClassPool,
    shot_cfg: ShotConfig,
    projector: Projector | None,
    epochs: int,
    rng: np.random.Generator,
    *,
    n_way: int = 5,
    k_shot: int = 1,
    q_query: int = 15,
    meta_batch_size: int = 4,
    iters_per_epoch: int = 1,
    val_episodes: int = 50,
    val_seed: int = 0,
    noise_std: float = 0.25,
    mask: InnerMask | None = None,
    opt: Adam = Adam(),
    on_epoch: Callable[[int, OuterStepResult, float], None] | None = None,
) -> MetaState:
    """Label-free SHOT pretraining, returning the best-validation snapshot as theta0.

    Validation uses a fixed set of val-split episodes (``val_seed``) so that
    snapshots are compared on the same tasks.
    """
    if shot_cfg.variant != "pretrainer":
        raise ConfigError("pretrain_shot_p needs variant='pretrainer'")
    if projector is None:
        raise ConfigError("SHOT pretraining needs a projector")
    if epochs <= 0:
        return state
    eval_cfg = shot_cfg.test_time_inner(mask)

    def validate(theta):
        return evaluate(theta, model, pool, "val", val_episodes, eval_cfg,
                        np.random.default_rng(val_seed), n_way, k_shot, q_query).mean

    state = MetaState(state.theta0, state.opt, state.epoch, state.best_val)
    state.record_val(validate(state.theta0))
    for _ in range(epochs):
        result = None
        for _ in range(iters_per_epoch):
            batch = sample_meta_batch(pool, meta_batch_size, n_way, k_shot, q_query, rng)
            result = pretrain_step(state, batch, model, shot_cfg, projector, rng, noise_std, mask, opt)
            state = result.state
        state.epoch += 1
        acc = validate(state.theta0)
        state.record_val(acc)
        if on_epoch is not None:
            on_epoch(state.epoch, result, acc)
    best_acc, best_theta = state.best_val
    return MetaState(best_theta.detach(), state.opt, state.epoch, state.best_val)


__all__ = [
    "matched_lrs",
    "Adam", "AdamState", "EvalResult", "InnerConfig", "MetaState", "OuterStepResult",
    "ShotConfig", "Trajectory", "adam_update", "build_reference_and_target", "evaluate",
    "episode_accuracy", "inner_adapt", "meta_grad", "meta_grad_fomaml", "meta_grad_maml",
    "outer_step_maml", "outer_step_shot_r", "pretrain_shot_p", "pretrain_step",
    "sample_meta_batch", "shot_loss",
]
