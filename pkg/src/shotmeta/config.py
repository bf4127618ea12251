"""Experiment configuration: YAML file + ``key=value`` overrides, validated in one pass."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .engine import METRICS, InnerConfig, ShotConfig
from .errors import ConfigError
from .tasks import PoolSpec

SCHEMA_VERSION = 1
ALGORITHMS = ("maml", "fomaml", "anil", "boil")
SHOT_VARIANTS = ("none", "regularizer", "pretrainer")
PRESETS = ("standard", "one_step")

# preset values sit between the dataclass defaults and user-supplied values
PRESET_VALUES: dict[str, dict[str, Any]] = {
    "standard": {},
    "one_step": {"inner_steps": 1, "t_steps": 1, "r_steps": 2, "lam": 1e-6, "anchor": "target"},
}

SHOT_ONLY_KEYS = ("lam", "t_steps", "r_steps", "metric", "anchor", "detach_reference")


@dataclass
class ExperimentConfig:
    """Every knob of a run. ``anchor`` names the SHOT branch that keeps the baseline
    inner schedule (``inner_steps`` at ``inner_lr``) and carries the task loss."""

    algorithm: str = "maml"
    shot_variant: str = "none"
    preset: str = "standard"
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    hidden: list[int] = field(default_factory=lambda: [32])
    inner_steps: int = 3
    inner_lr: float = 0.02
    t_steps: int = 1
    r_steps: int | None = None
    lam: float = 0.1
    metric: str = "kl"
    detach_reference: bool = True
    anchor: str = "reference"
    meta_lr: float = 1e-3
    meta_batch: int = 4
    epochs: int = 300
    iters_per_epoch: int = 5
    val_episodes: int = 20
    eval_episodes: int = 1000
    pretrain_epochs: int = 100
    noise_std: float = 0.25
    projector_on: str = "logits"
    diag_tasks: int = 4
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"
    pool: PoolSpec = field(default_factory=PoolSpec)

    # -- derived -------------------------------------------------------
    @property
    def uses_shot(self) -> bool:
        return self.shot_variant != "none"

    @property
    def resolved_r_steps(self) -> int:
        if self.r_steps is not None:
            return self.r_steps
        return self.inner_steps if self.anchor == "reference" else self.inner_steps + 1

    def shot_config(self) -> ShotConfig:
        t, r = self.t_steps, self.resolved_r_steps
        common = dict(
            lam=self.lam,
            metric=self.metric,
            variant="pretrainer" if self.shot_variant == "pretrainer" else "regularizer",
            detach_reference=self.detach_reference,
            task_loss_at=self.anchor,
        )
        if self.anchor == "reference":
            return ShotConfig.from_reference_lr(self.inner_lr, t, r, **common)
        return ShotConfig(t_steps=t, r_steps=r, lr_target=self.inner_lr, **common)

    def baseline_inner(self, mask=None) -> InnerConfig:
        """Plain inner loop; with SHOT on it uses the anchor branch's resolved lr,
        which can differ from ``inner_lr`` by an ulp or two (see ``matched_lrs``)."""
        lr = self.inner_lr
        if self.uses_shot:
            shot = self.shot_config()
            lr = shot.lr_reference if self.anchor == "reference" else shot.lr_target
        return InnerConfig(self.inner_steps, lr, mask)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["pool"] = self.pool.to_dict()
        d["r_steps"] = self.resolved_r_steps
        return d

    def config_hash(self) -> str:
        """Hash of everything that can change results (the output path cannot)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def protocol(self) -> dict[str, Any]:
        """Fields that must agree for two runs' test accuracies to be comparable."""
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_query": self.q_query,
            "eval_episodes": self.eval_episodes,
            "pool": self.pool.to_dict(),
        }

    # -- validation ----------------------------------------------------
    def problems(self) -> list[str]:
        errs: list[str] = []

        def need(cond: bool, msg: str) -> None:
            if not cond:
                errs.append(msg)

        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        need(self.shot_variant in SHOT_VARIANTS,
             f"shot_variant must be one of {SHOT_VARIANTS}, got {self.shot_variant!r}")
        need(self.preset in PRESETS, f"preset must be one of {PRESETS}, got {self.preset!r}")
        need(self.n_way >= 2, f"n_way must be >= 2, got {self.n_way}")
        need(self.k_shot >= 1, f"k_shot must be >= 1, got {self.k_shot}")
        need(self.q_query >= 1, f"q_query must be >= 1, got {self.q_query}")
        need(bool(self.hidden) and all(h >= 1 for h in self.hidden),
             f"hidden must be a non-empty list of positive widths, got {self.hidden}")
        need(self.inner_steps >= 1, f"inner_steps must be >= 1, got {self.inner_steps}")
        need(self.inner_lr > 0, f"inner_lr must be > 0, got {self.inner_lr}")
        need(self.meta_lr > 0, f"meta_lr must be > 0, got {self.meta_lr}")
        need(self.meta_batch >= 1, f"meta_batch must be >= 1, got {self.meta_batch}")
        need(self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}")
        need(self.iters_per_epoch >= 1, f"iters_per_epoch must be >= 1, got {self.iters_per_epoch}")
        need(self.val_episodes >= 2, f"val_episodes must be >= 2, got {self.val_episodes}")
        need(self.eval_episodes >= 2, f"eval_episodes must be >= 2, got {self.eval_episodes}")
        need(self.pretrain_epochs >= 0, f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        need(self.noise_std >= 0, f"noise_std must be >= 0, got {self.noise_std}")
        need(self.projector_on in ("logits", "probs"),
             f"projector_on must be 'logits' or 'probs', got {self.projector_on!r}")
        need(self.diag_tasks >= 0, f"diag_tasks must be >= 0, got {self.diag_tasks}")
        need(bool(self.seeds), "seeds must list at least one seed")
        need(len(set(self.seeds)) == len(self.seeds), f"seeds must be unique, got {self.seeds}")
        pool_errs = self.pool.validate()
        errs.extend(pool_errs)
        if not pool_errs:
            for split in ("n_train", "n_val", "n_test"):
                need(getattr(self.pool, split) >= self.n_way,
                     f"pool.{split} ({getattr(self.pool, split)}) must be >= n_way ({self.n_way})")
        # bad values are errors even when the SHOT term is off
        need(self.metric in METRICS, f"metric must be one of {METRICS}, got {self.metric!r}")
        need(self.anchor in ("reference", "target"),
             f"anchor must be 'reference' or 'target', got {self.anchor!r}")
        need(self.lam >= 0, f"lam must be >= 0, got {self.lam}")
        if self.uses_shot:
            r = self.resolved_r_steps
            need(1 <= self.t_steps < r, f"need 1 <= t_steps < r_steps, got t={self.t_steps} r={r}")
            if self.anchor == "reference":
                need(r == self.inner_steps,
                     f"anchor=reference needs r_steps == inner_steps ({r} != {self.inner_steps})")
            elif self.anchor == "target":
                need(self.t_steps == self.inner_steps,
                     f"anchor=target needs t_steps == inner_steps ({self.t_steps} != {self.inner_steps})")
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}
_POOL_FIELDS = {f.name: f for f in fields(PoolSpec)}


def _coerce(name: str, value: Any, default: Any, errs: list[str]) -> Any:
    """Check ``value`` against the type of the field's default."""
    if name == "r_steps":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        errs.append(f"r_steps must be an integer or null, got {value!r}")
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
        if isinstance(value, int) and not isinstance(value, bool):
            return [value]
    errs.append(f"{name}: expected {type(default).__name__}, got {value!r}")
    return default


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (so ``3``, ``0.1``, ``[0,1]``, ``true``)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def build_config(
    raw: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None
) -> tuple[ExperimentConfig, list[str]]:
    """Merge defaults <- preset <- ``raw`` <- ``overrides``; validate everything.

    Returns the config and a list of warnings. Raises ConfigError listing every
    invalid field.
    """
    user: dict[str, Any] = {}
    for source in (raw or {}, overrides or {}):
        for key, value in source.items():
            if key.startswith("pool.") and not isinstance(value, dict):
                user.setdefault("pool", {})
                user["pool"] = {**user["pool"], key[5:]: value}
            elif key == "pool" and isinstance(value, dict):
                user["pool"] = {**user.get("pool", {}), **value}
            else:
                user[key] = value
    errs: list[str] = []
    defaults = ExperimentConfig()
    preset = user.get("preset", defaults.preset)
    merged: dict[str, Any] = dict(PRESET_VALUES.get(preset, {}))
    merged.update(user)

    kwargs: dict[str, Any] = {}
    for key, value in merged.items():
        if key == "pool":
            pool_kwargs = {}
            if not isinstance(value, dict):
                errs.append(f"pool must be a mapping, got {value!r}")
                continue
            for pk, pv in value.items():
                if pk not in _POOL_FIELDS:
                    errs.append(f"unknown key pool.{pk}")
                    continue
                pool_kwargs[pk] = _coerce(f"pool.{pk}", pv, getattr(PoolSpec(), pk), errs)
            kwargs["pool"] = PoolSpec(**pool_kwargs)
        elif key not in _FIELD_TYPES:
            errs.append(f"unknown key {key}")
        else:
            kwargs[key] = _coerce(key, value, getattr(defaults, key), errs)
    cfg = ExperimentConfig(**kwargs)
    errs.extend(cfg.problems())
    if errs:
        raise ConfigError(errs)
    warnings = []
    if not cfg.uses_shot:
        ignored = [k for k in SHOT_ONLY_KEYS if k in user]
        if ignored:
            warnings.append(
                f"shot_variant=none: {', '.join(ignored)} ignored (no SHOT term in this run)"
            )
    return cfg, warnings


def load_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> tuple[ExperimentConfig, list[str]]:
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        raw = loaded
    return build_config(raw, overrides)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n# config_hash: {cfg.config_hash()}\n")
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
