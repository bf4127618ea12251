"""Run an ExperimentConfig end to end: pool -> (pretraining) -> meta-training ->
test evaluation, writing CSVs and checkpoints into a run directory.

Layout of a run directory::

    config.yaml               resolved config (schema version + hash in the header)
    results.csv               per-seed test accuracy and post-training diagnostics, plus a pooled row
    seed_<s>/metrics.csv      one row per epoch (deterministic)
    seed_<s>/timing.csv       wall-clock seconds per epoch (kept apart so metrics stay bitwise stable)
    seed_<s>/best.npz         best-validation checkpoint
    seed_<s>/failure.json     only when the run aborted on a non-finite value
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import SCHEMA_VERSION, ExperimentConfig, dump_config
from .diagnostics import cosine_diagnostic, mean_curvature_ratio, surface_scan
from .engine import (
    Adam,
    AdamState,
    EvalResult,
    InnerConfig,
    MetaState,
    OuterStepResult,
    evaluate,
    inner_adapt,
    outer_step_maml,
    outer_step_shot_r,
    pretrain_shot_p,
    sample_meta_batch,
)
from .errors import ConfigError, InnerLoopError, NonFiniteError, ShotMetaError, TaskError
from .models import InnerMask, MlpModel, ce_loss_fn, init_model, init_projector
from .params import ParamVector
from .tasks import ClassPool, make_pool, sample_episode

log = logging.getLogger(__name__)

WORKERS_ENV = "SHOTMETA_WORKERS"
METRIC_COLUMNS = (
    "phase", "epoch", "train_loss", "val_accuracy", "cosine_similarity",
    "shot_loss_mean", "hessian_ratio_mean",
)
RESULT_COLUMNS = (
    "seed", "test_accuracy", "ci95", "best_val_accuracy", "best_epoch",
    "post_cosine", "post_hessian_ratio", "grad_roughness", "random_roughness",
)

# independent child streams of one seed
_INIT, _TRAIN, _VAL, _TEST, _DIAG, _PROJ = range(6)


class RunFailed(ShotMetaError):
    """A seed aborted on a non-finite value; ``dump`` points at the diagnostic file."""

    def __init__(self, seed: int, dump: Path, cause: BaseException):
        self.seed = seed
        self.dump = dump
        super().__init__(f"seed {seed} failed: {cause} (diagnostics in {dump})")


def stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


# -- pieces ----------------------------------------------------------------------------
def build_model(cfg: ExperimentConfig, seed: int) -> MlpModel:
    return init_model([cfg.pool.dim, *cfg.hidden, cfg.n_way], seed=stream(seed, _INIT))


def build_mask(cfg: ExperimentConfig, model: MlpModel) -> InnerMask | None:
    if cfg.algorithm == "anil":
        return InnerMask.anil(model)
    if cfg.algorithm == "boil":
        return InnerMask.boil(model)
    return None


def test_time_inner(cfg: ExperimentConfig, mask: InnerMask | None) -> InnerConfig:
    if cfg.uses_shot:
        return cfg.shot_config().test_time_inner(mask)
    return cfg.baseline_inner(mask)


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else float("nan")


def trajectory_diagnostics(result: OuterStepResult, tasks: int) -> tuple[float, float]:
    """Mean cosine statistic over the batch and mean curvature ratio over its first ``tasks``."""
    cosines = []
    for traj in result.trajectories:
        try:
            cosines.append(cosine_diagnostic(traj))
        except ValueError:
            cosines.append(float("nan"))
    ratios = [
        mean_curvature_ratio(traj, fn)
        for traj, fn in list(zip(result.trajectories, result.loss_fns))[:tasks]
    ]
    return _nanmean(cosines), _nanmean(ratios)


@dataclass(frozen=True)
class PostDiagnostics:
    cosine: float
    hessian_ratio: float
    grad_roughness: float
    random_roughness: float


def post_training_diagnostics(
    theta0: ParamVector,
    model: MlpModel,
    pool: ClassPool,
    cfg: ExperimentConfig,
    inner: InnerConfig,
    rng: np.random.Generator,
    episodes: int = 10,
    samples: int = 21,
) -> PostDiagnostics:
    """Geometry of the inner loop at ``theta0`` on fresh test episodes.

    Surface scans run through ``theta0`` along the normalized first support gradient
    and along a standard-normal direction, both over ``[-h, h]`` with ``h`` the
    length of the first inner step.
    """
    cos, ratios, rough_g, rough_r = [], [], [], []
    for _ in range(episodes):
        ep = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.q_query, rng, "test")
        fn = ce_loss_fn(model, ep.support_x, ep.support_y)
        traj = inner_adapt(theta0, fn, inner)
        try:
            cos.append(cosine_diagnostic(traj))
        except ValueError:
            cos.append(float("nan"))
        ratios.append(mean_curvature_ratio(traj, fn))
        g = traj.masked_grad(0)
        half = inner.lr * float(np.linalg.norm(g))
        if half == 0:
            rough_g.append(float("nan"))
            rough_r.append(float("nan"))
            continue
        rough_g.append(surface_scan(fn, theta0, g, half, samples).roughness)
        rough_r.append(surface_scan(fn, theta0, rng.standard_normal(g.size), half, samples).roughness)
    return PostDiagnostics(_nanmean(cos), _nanmean(ratios), _nanmean(rough_g), _nanmean(rough_r))


# -- csv --------------------------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def header_line(cfg: ExperimentConfig) -> str:
    parts = [
        f"schema_version={SCHEMA_VERSION}",
        f"config_hash={cfg.config_hash()}",
        f"algorithm={cfg.algorithm}",
        f"shot_variant={cfg.shot_variant}",
    ]
    if cfg.uses_shot:
        sc = cfg.shot_config()
        parts += [f"T={sc.t_steps}", f"R={sc.r_steps}", f"lambda={sc.lam!r}",
                  f"lr_target={sc.lr_target!r}", f"lr_reference={sc.lr_reference!r}",
                  f"metric={sc.metric}"]
    else:
        parts += [f"inner_steps={cfg.inner_steps}", f"inner_lr={cfg.inner_lr!r}"]
    return "# " + " ".join(parts)


def write_csv(path: Path, columns, rows, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- one seed ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SeedResult:
    seed: int
    test_accuracy: float
    ci95: float
    accuracies: np.ndarray
    best_val_accuracy: float
    best_epoch: int
    post: PostDiagnostics

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "ci95": self.ci95,
            "best_val_accuracy": self.best_val_accuracy,
            "best_epoch": self.best_epoch,
            "post_cosine": self.post.cosine,
            "post_hessian_ratio": self.post.hessian_ratio,
            "grad_roughness": self.post.grad_roughness,
            "random_roughness": self.post.random_roughness,
        }


def _fail(seed_dir: Path, state: MetaState, phase: str, epoch: int, exc: BaseException, seed: int):
    save_checkpoint(seed_dir / "failed.npz", state)
    cause = exc.__cause__ if isinstance(exc, TaskError) else exc
    dump = {
        "seed": seed,
        "phase": phase,
        "epoch": epoch,
        "error": type(exc).__name__,
        "message": str(exc),
        "task_index": getattr(exc, "task_index", None),
        "inner_step": getattr(cause, "step", None),
        "theta_finite": bool(np.all(np.isfinite(state.theta0.flatten()))),
        "theta_norm": float(np.linalg.norm(state.theta0.flatten())),
    }
    path = seed_dir / "failure.json"
    path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    raise RunFailed(seed, path, exc) from exc


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str | Path) -> SeedResult:
    """Train and evaluate one seed; everything is a pure function of (cfg, seed)."""
    seed_dir = Path(out_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    pool = make_pool(cfg.pool)
    model = build_model(cfg, seed)
    mask = build_mask(cfg, model)
    opt = Adam(lr=cfg.meta_lr)
    first_order = cfg.algorithm == "fomaml"
    train_rng = stream(seed, _TRAIN)
    val_seed = int(np.random.SeedSequence([seed, _VAL]).generate_state(1)[0])
    eval_inner = test_time_inner(cfg, mask)

    def validate(theta: ParamVector) -> float:
        return evaluate(theta, model, pool, "val", cfg.val_episodes, eval_inner,
                        np.random.default_rng(val_seed), cfg.n_way, cfg.k_shot, cfg.q_query).mean

    rows: list[dict] = []
    timing: list[dict] = []
    state = MetaState.fresh(model.params)
    clock = time.perf_counter()

    def log_row(phase: str, epoch: int, result: OuterStepResult, losses, shots, val: float) -> None:
        nonlocal clock
        cos, ratio = trajectory_diagnostics(result, cfg.diag_tasks)
        rows.append({
            "phase": phase, "epoch": epoch, "train_loss": _nanmean(losses), "val_accuracy": val,
            "cosine_similarity": cos, "shot_loss_mean": _nanmean(shots), "hessian_ratio_mean": ratio,
        })
        now = time.perf_counter()
        timing.append({"phase": phase, "epoch": epoch, "wall_time": now - clock})
        clock = now

    header = header_line(cfg)
    best_epoch = 0
    phase = "pretrain"
    try:
        if cfg.shot_variant == "pretrainer" and cfg.pretrain_epochs > 0:
            projector = init_projector(cfg.n_way, stream(seed, _PROJ), on=cfg.projector_on)

            def on_epoch(epoch, result, acc):
                log_row("pretrain", epoch, result, [], [result.metrics["shot_loss"]], acc)

            state = pretrain_shot_p(
                state, model, pool, cfg.shot_config(), projector, cfg.pretrain_epochs, train_rng,
                n_way=cfg.n_way, k_shot=cfg.k_shot, q_query=cfg.q_query,
                meta_batch_size=cfg.meta_batch, iters_per_epoch=cfg.iters_per_epoch,
                val_episodes=cfg.val_episodes, val_seed=val_seed, noise_std=cfg.noise_std,
                mask=mask, opt=opt, on_epoch=on_epoch,
            )
            # meta-training (if any) starts from the pretrained snapshot with fresh moments
            best = state.best_val
            state = MetaState(state.theta0, AdamState.zeros(state.theta0), 0, None)
            if cfg.epochs == 0:
                state.best_val = best
                best_epoch = next((r["epoch"] for r in rows if r["val_accuracy"] == best[0]), 0)
        phase = "train"
        for epoch in range(1, cfg.epochs + 1):
            losses, shots = [], []
            result = None
            for _ in range(cfg.iters_per_epoch):
                batch = sample_meta_batch(pool, cfg.meta_batch, cfg.n_way, cfg.k_shot,
                                          cfg.q_query, train_rng)
                if cfg.shot_variant == "regularizer":
                    result = outer_step_shot_r(state, batch, model, cfg.shot_config(), mask,
                                               first_order, opt)
                else:
                    result = outer_step_maml(state, batch, model, cfg.baseline_inner(mask),
                                             first_order, opt)
                state = result.state
                losses.append(result.metrics["query_loss"])
                shots.append(result.metrics["shot_loss"])
            state.epoch = epoch
            val = validate(state.theta0)
            if state.record_val(val):
                best_epoch = epoch
            log_row("train", epoch, result, losses, shots, val)
    except (TaskError, InnerLoopError, NonFiniteError) as exc:
        write_csv(seed_dir / "metrics.csv", METRIC_COLUMNS, rows, header)
        _fail(seed_dir, state, phase, state.epoch, exc, seed)

    write_csv(seed_dir / "metrics.csv", METRIC_COLUMNS, rows, header)
    write_csv(seed_dir / "timing.csv", ("phase", "epoch", "wall_time"), timing)
    if state.best_val is None:
        state.best_val = (validate(state.theta0), state.theta0.detach())
    save_checkpoint(seed_dir / "best.npz", state)
    best_val, theta = state.best_val

    test = evaluate(theta, model, pool, "test", cfg.eval_episodes, eval_inner,
                    stream(seed, _TEST), cfg.n_way, cfg.k_shot, cfg.q_query)
    post = post_training_diagnostics(theta, model, pool, cfg, eval_inner, stream(seed, _DIAG))
    return SeedResult(seed, test.mean, test.ci95, test.accuracies, best_val, best_epoch, post)


def random_init_reference(cfg: ExperimentConfig, seed: int) -> tuple[EvalResult, PostDiagnostics]:
    """The untrained init of ``seed`` under the same test episodes and diagnostics
    streams that :func:`run_seed` uses for the trained model."""
    pool = make_pool(cfg.pool)
    model = build_model(cfg, seed)
    inner = test_time_inner(cfg, build_mask(cfg, model))
    test = evaluate(model.params, model, pool, "test", cfg.eval_episodes, inner,
                    stream(seed, _TEST), cfg.n_way, cfg.k_shot, cfg.q_query)
    post = post_training_diagnostics(model.params, model, pool, cfg, inner, stream(seed, _DIAG))
    return test, post


def _run_seed_job(args) -> SeedResult:
    cfg, seed, out_dir = args
    return run_seed(cfg, seed, out_dir)


# -- whole run --------------------------------------------------------------------------
@dataclass(frozen=True)
class RunResult:
    out_dir: Path
    seeds: list[SeedResult]
    pooled_mean: float
    pooled_ci95: float


def pooled(results: list[SeedResult]) -> tuple[float, float]:
    """Mean over all test episodes of all seeds, with a normal-approximation CI."""
    accs = np.concatenate([r.accuracies for r in results])
    ci = 1.96 * accs.std(ddof=1) / math.sqrt(accs.size) if accs.size > 1 else float("nan")
    return float(accs.mean()), float(ci)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(replace(cfg, out_dir=str(out)), out / "config.yaml")
    jobs = [(cfg, s, out) for s in cfg.seeds]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_seed_job, jobs))
    else:
        results = [_run_seed_job(j) for j in jobs]
    for r in results:
        log.info("seed %d: test %.2f +/- %.2f", r.seed, 100 * r.test_accuracy, 100 * r.ci95)
    mean, ci = pooled(results)
    rows = [r.row() for r in results]
    rows.append({c: float("nan") for c in RESULT_COLUMNS} | {
        "seed": "pooled", "test_accuracy": mean, "ci95": ci, "best_epoch": -1,
    })
    write_csv(out / "results.csv", RESULT_COLUMNS, rows, header_line(cfg))
    return RunResult(out, results, mean, ci)
