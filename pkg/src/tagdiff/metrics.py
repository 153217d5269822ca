"""Sample-quality and alignment metrics."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mixture as mx

N_PROJECTIONS = 64
SUBSAMPLE_CAP = 2048


def time_gap_profile(trajectory, time_source=None):
    """Per-step mean ``|predicted - t|`` over trajectories, for the visited steps ``t >= 1``.

    Uses the predictions recorded in the trajectory unless ``time_source``
    (anything with ``predict_time``) is given.
    """
    times = np.asarray(trajectory.times)
    mask = times >= 1
    if trajectory.n == 0 or not mask.any():
        raise ValueError("time gap needs a nonempty trajectory set with at least one step t >= 1")
    if time_source is None:
        if trajectory.predicted_times is None:
            raise ValueError("trajectory carries no predicted times; pass time_source")
        pred = trajectory.predicted_times[mask]
    else:
        pred = np.stack([time_source.predict_time(trajectory.states[j]) for j in np.flatnonzero(mask)])
    gaps = np.abs(pred - times[mask][:, None])
    return times[mask], gaps.mean(axis=1), gaps


def time_gap(trajectory, time_source=None) -> float:
    """Mean over trajectories of each trajectory's mean ``|argmax p(.|x_t) - t|``."""
    _, _, gaps = time_gap_profile(trajectory, time_source)
    return float(gaps.mean(axis=0).mean())


def time_gap_from_predictions(pred, times) -> float:
    """Time gap from a ``(steps, n)`` array of predicted steps."""
    pred = np.asarray(pred)
    times = np.asarray(times).reshape(-1, 1)
    if pred.size == 0:
        raise ValueError("empty prediction set")
    return float(np.abs(pred - times).mean(axis=0).mean())


def random_directions(dim: int, n_projections: int = N_PROJECTIONS, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_projections, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _subsample(x, cap, rng):
    if x.shape[0] <= cap:
        return x
    return x[np.sort(rng.choice(x.shape[0], size=cap, replace=False))]


def _w1_1d(a, b):
    """Exact W1 between two empirical measures on the line."""
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # quantile functions on the merged breakpoint grid
    qs = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    qs = np.concatenate([[0.0], qs, [1.0]])
    mid = 0.5 * (qs[1:] + qs[:-1])
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(np.diff(qs) * np.abs(qa - qb)))


def sliced_w1(samples_a, samples_b, n_projections: int = N_PROJECTIONS, seed=0, cap: int = SUBSAMPLE_CAP):
    """Average exact 1D W1 over fixed random unit directions.

    Sets larger than ``cap`` are subsampled without replacement (seeded).
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    rng = np.random.default_rng(seed)
    a = _subsample(a, cap, rng)
    b = _subsample(b, cap, rng)
    dirs = random_directions(a.shape[1], n_projections, seed)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([_w1_1d(pa[:, j], pb[:, j]) for j in range(n_projections)]))


def mixture_nll(gm, samples) -> float:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("samples must be nonempty")
    return float(-np.mean(mx.log_density(gm, samples)))


@dataclass
class RunSummary:
    time_gap_mean: float
    sliced_w1: float
    nll: float
    time_gap_profile: list = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    n_projections: int = N_PROJECTIONS
    subsample_cap: int = SUBSAMPLE_CAP
    label: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def summarize(trajectory, gm0, reference, time_source=None, config_hash="", seed=0, label=None) -> RunSummary:
    """Time gap, sliced W1 against ``reference`` samples and mixture NLL of a run."""
    _, profile, gaps = time_gap_profile(trajectory, time_source)
    return RunSummary(
        time_gap_mean=float(gaps.mean(axis=0).mean()),
        sliced_w1=sliced_w1(trajectory.samples, reference, seed=seed),
        nll=mixture_nll(gm0, trajectory.samples),
        time_gap_profile=[float(v) for v in profile],
        config_hash=config_hash,
        seed=seed,
        label=dict(label or {}),
    )


def append_ledger(path, row: dict) -> None:
    """Append one row to a CSV results ledger, writing the header on creation."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)
