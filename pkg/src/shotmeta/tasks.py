"""Synthetic N-way K-shot episodes drawn from Gaussian class pools."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PoolSpec:
    n_train: int = 64
    n_val: int = 16
    n_test: int = 20
    dim: int = 16
    sigma: float = 1.0
    low: float = -5.0
    high: float = 5.0
    min_sep: float = 4.0  # in units of sigma
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        for name in ("n_train", "n_val", "n_test", "dim"):
            if getattr(self, name) < 1:
                errs.append(f"pool.{name} must be >= 1")
        if self.sigma <= 0:
            errs.append("pool.sigma must be > 0")
        if self.high <= self.low:
            errs.append("pool.high must exceed pool.low")
        if self.min_sep < 0:
            errs.append("pool.min_sep must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassPool:
    """Class inventory: one isotropic Gaussian per class, partitioned by split."""

    means: np.ndarray  # (n_classes, dim)
    sigma: float
    splits: dict[str, np.ndarray] = field(default_factory=dict)  # split -> class ids

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def classes(self, split: str) -> np.ndarray:
        try:
            return self.splits[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}") from None


def make_pool(spec: PoolSpec = PoolSpec(), max_tries: int = 100_000) -> ClassPool:
    """Draw class means uniformly in ``[low, high]^dim`` by rejection so that every
    pair is at least ``min_sep * sigma`` apart."""
    errs = spec.validate()
    if errs:
        raise ConfigError(errs)
    rng = np.random.default_rng(spec.seed)
    total = spec.n_train + spec.n_val + spec.n_test
    min_d2 = (spec.min_sep * spec.sigma) ** 2
    means = np.empty((total, spec.dim))
    n, tries = 0, 0
    while n < total:
        tries += 1
        if tries > max_tries:
            raise ConfigError(
                f"could not place {total} class means with separation {spec.min_sep} sigma"
            )
        cand = rng.uniform(spec.low, spec.high, size=spec.dim)
        if n and np.min(np.sum((means[:n] - cand) ** 2, axis=1)) < min_d2:
            continue
        means[n] = cand
        n += 1
    ids = np.arange(total)
    splits = {
        "train": ids[: spec.n_train],
        "val": ids[spec.n_train : spec.n_train + spec.n_val],
        "test": ids[spec.n_train + spec.n_val :],
    }
    return ClassPool(means, float(spec.sigma), splits)


@dataclass(frozen=True)
class Episode:
    """One task. ``label_perm[i]`` is the episode label given to ``classes[i]``.

    Support and query rows are grouped by episode label (label 0 first).
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: object  # np.ndarray; label-free code paths never read it
    classes: np.ndarray
    label_perm: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.classes)


def sample_episode(
    pool: ClassPool,
    n_way: int,
    k_shot: int,
    q_query: int,
    rng: np.random.Generator,
    split: str = "train",
) -> Episode:
    available = pool.classes(split)
    if n_way < 1 or k_shot < 1 or q_query < 0:
        raise ConfigError(f"bad episode shape n_way={n_way} k_shot={k_shot} q_query={q_query}")
    if len(available) < n_way:
        raise ConfigError(f"split {split!r} has {len(available)} classes, need {n_way}")
    classes = rng.choice(available, size=n_way, replace=False)
    perm = rng.permutation(n_way)
    # episode label l is held by classes[inv[l]]
    inv = np.argsort(perm)
    d = pool.dim
    sx = np.empty((n_way * k_shot, d))
    qx = np.empty((n_way * q_query, d))
    for label in range(n_way):
        mu = pool.means[classes[inv[label]]]
        sx[label * k_shot : (label + 1) * k_shot] = mu + pool.sigma * rng.standard_normal((k_shot, d))
        qx[label * q_query : (label + 1) * q_query] = mu + pool.sigma * rng.standard_normal(
            (q_query, d)
        )
    sy = np.repeat(np.arange(n_way), k_shot)
    qy = np.repeat(np.arange(n_way), q_query)
    return Episode(sx, sy, qx, qy, classes, perm)


def augment(points: np.ndarray, rng: np.random.Generator, noise_std: float = 0.25) -> np.ndarray:
    """Additive isotropic Gaussian noise."""
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    points = np.asarray(points, dtype=np.float64)
    if noise_std == 0:
        return points.copy()
    return points + noise_std * rng.standard_normal(points.shape)
