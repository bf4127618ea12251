"""Versioned ``.npz`` checkpoints of a MetaState (bitwise round-trip)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .engine import AdamState, MetaState
from .params import ParamVector

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, state: MetaState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = state.theta0.names()
    blobs: dict[str, np.ndarray] = {
        "version": np.array(CHECKPOINT_VERSION),
        "names": np.array(names, dtype=str),
        "epoch": np.array(state.epoch),
        "adam_t": np.array(state.opt.t),
    }
    for i, name in enumerate(names):
        blobs[f"theta_{i}"] = state.theta0[name].data
        blobs[f"m_{i}"] = state.opt.m[name]
        blobs[f"v_{i}"] = state.opt.v[name]
    if state.best_val is not None:
        acc, snap = state.best_val
        blobs["best_acc"] = np.array(acc)
        for i, name in enumerate(names):
            blobs[f"best_{i}"] = snap[name].data
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)
    return path


def load_checkpoint(path: str | Path) -> MetaState:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        names = [str(n) for n in z["names"]]
        theta = ParamVector.from_arrays({n: z[f"theta_{i}"] for i, n in enumerate(names)})
        opt = AdamState(
            {n: z[f"m_{i}"].copy() for i, n in enumerate(names)},
            {n: z[f"v_{i}"].copy() for i, n in enumerate(names)},
            int(z["adam_t"]),
        )
        best = None
        if "best_acc" in z.files:
            snap = ParamVector.from_arrays({n: z[f"best_{i}"] for i, n in enumerate(names)})
            best = (float(z["best_acc"]), snap)
        return MetaState(theta, opt, int(z["epoch"]), best)
