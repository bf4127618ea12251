"""Cross-run comparison tables and SVG line charts built from run directories."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from .experiment import read_csv


class ProtocolMismatch(ConfigError):
    """Runs evaluated under different protocols; ``fields`` names what differs."""

    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__([f"protocol field differs across runs: {f}" for f in fields])


@dataclass(frozen=True)
class RunSummary:
    label: str
    path: Path
    config: ExperimentConfig
    per_seed: list[tuple[str, float, float]]  # (seed, accuracy, ci95)
    mean: float
    ci95: float


@dataclass(frozen=True)
class Delta:
    baseline: str
    other: str
    delta: float
    non_overlapping: bool


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_run(path: str | Path) -> RunSummary:
    path = Path(path)
    if not (path / "results.csv").exists():
        raise ConfigError(f"{path} is not a completed run (no results.csv)")
    cfg, _ = load_config(path / "config.yaml")
    per_seed, mean, ci = [], float("nan"), float("nan")
    for row in read_csv(path / "results.csv"):
        if row["seed"] == "pooled":
            mean, ci = float(row["test_accuracy"]), float(row["ci95"])
        else:
            per_seed.append((row["seed"], float(row["test_accuracy"]), float(row["ci95"])))
    label = f"{cfg.algorithm}+{cfg.shot_variant}" if cfg.uses_shot else cfg.algorithm
    return RunSummary(f"{label} ({path.name})", path, cfg, per_seed, mean, ci)


def protocol_differences(runs: list[RunSummary]) -> list[str]:
    ref = _flatten(runs[0].config.protocol())
    diffs = []
    for run in runs[1:]:
        other = _flatten(run.config.protocol())
        diffs += [k for k in ref if ref[k] != other.get(k) and k not in diffs]
    return diffs


def compare_runs(paths: list[str | Path]) -> tuple[list[RunSummary], list[Delta]]:
    """Pooled accuracy of each run and its delta against the first run."""
    if len(paths) < 2:
        raise ConfigError("compare needs at least two runs")
    runs = [load_run(p) for p in paths]
    diffs = protocol_differences(runs)
    if diffs:
        raise ProtocolMismatch(diffs)
    base = runs[0]
    deltas = [
        Delta(base.label, r.label, r.mean - base.mean,
              abs(r.mean - base.mean) > r.ci95 + base.ci95)
        for r in runs[1:]
    ]
    return runs, deltas


def format_table(runs: list[RunSummary], deltas: list[Delta]) -> str:
    lines = [f"{'run':<40} {'seed':>6} {'acc %':>8} {'ci95':>7}"]
    for r in runs:
        for seed, acc, ci in r.per_seed:
            lines.append(f"{r.label:<40} {seed:>6} {100 * acc:8.2f} {100 * ci:7.2f}")
        lines.append(f"{r.label:<40} {'pooled':>6} {100 * r.mean:8.2f} {100 * r.ci95:7.2f}")
    lines.append("")
    for d in deltas:
        flag = "  non-overlapping CI" if d.non_overlapping else ""
        lines.append(f"{d.other} vs {d.baseline}: {100 * d.delta:+.2f} points{flag}")
    return "\n".join(lines)


# -- plots ---------------------------------------------------------------------------
def epoch_curves(run_dir: str | Path, column: str, phase: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Epochs and the seed-mean of ``column`` for one run."""
    series = []
    epochs = None
    for seed_dir in sorted(Path(run_dir).glob("seed_*")):
        rows = [r for r in read_csv(seed_dir / "metrics.csv") if r["phase"] == phase]
        if not rows:
            continue
        epochs = np.array([int(r["epoch"]) for r in rows])
        series.append([float(r[column]) for r in rows])
    if not series:
        raise ConfigError(f"no {phase} rows found under {run_dir}")
    n = min(len(s) for s in series)
    return epochs[:n], np.mean([s[:n] for s in series], axis=0)


def plot_runs(run_dirs: list[str | Path], out_dir: str | Path, phase: str = "train") -> list[Path]:
    """Validation accuracy and cosine statistic against epoch, one line per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for column, ylabel in (("val_accuracy", "validation accuracy"), ("cosine_similarity", "cosine similarity")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for rd in run_dirs:
            x, y = epoch_curves(rd, column, phase)
            ax.plot(x, y, label=load_run(rd).label if (Path(rd) / "results.csv").exists() else Path(rd).name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{column}.svg"
        # fixed metadata keeps the SVG byte-stable across runs
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
