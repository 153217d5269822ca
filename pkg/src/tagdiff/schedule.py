"""Discrete variance-preserving noise schedules.

Step indices are 1-based throughout the package: ``t = 1..T`` with
``alpha_bar(0) == 1`` standing for clean data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# trapezoid panels per unit of continuous time
QUAD_PANELS_PER_UNIT = 1024

OMEGA_KINDS = ("sqrt_one_minus_abar", "one_minus_abar", "constant")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates ``betas`` and cumulative signal ``alpha_bars``."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        alpha_bars = np.asarray(self.alpha_bars, dtype=float)
        if self.T < 1 or betas.shape != (self.T,) or alpha_bars.shape != (self.T,):
            raise ValueError("betas and alpha_bars must both have length T >= 1")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(alpha_bars <= 0) or np.any(alpha_bars > 1):
            raise ValueError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise IndexError(f"step {t} outside [{lo}, {self.T}]")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient at step ``t``; step 0 is clean data."""
        t = self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "betas": [float(b) for b in self.betas],
            "alpha_bars": [float(a) for a in self.alpha_bars],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), np.array(d["betas"], dtype=float), np.array(d["alpha_bars"], dtype=float))

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(text))


def linear_beta_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly spaced betas with ``alpha_bars`` as the running product of ``1 - beta``.

    >>> linear_beta_schedule(2, 0.5, 0.5).alpha_bars.tolist()
    [0.5, 0.25]
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(T, betas, np.cumprod(1.0 - betas))


def scaled_linear_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """DDPM's 1000-step linear schedule rescaled so that ``T`` steps carry the same total noise."""
    scale = 1000.0 / T
    return linear_beta_schedule(T, beta_min * scale, min(beta_max * scale, 0.999))


def alpha_bar_continuous(beta_fn, t: float, panels_per_unit: int = QUAD_PANELS_PER_UNIT) -> float:
    """``exp(-0.5 * int_0^t beta(s) ds)`` by composite trapezoid quadrature."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 1.0
    n = max(1, int(np.ceil(t * panels_per_unit)))
    s = np.linspace(0.0, t, n + 1)
    vals = np.asarray(np.vectorize(beta_fn, otypes=[float])(s), dtype=float)
    if np.any(vals < 0):
        raise ValueError("beta_fn must be nonnegative")
    return float(np.exp(-0.5 * np.trapezoid(vals, s)))


def forward_perturb(x0, t: int, schedule: NoiseSchedule, rng=None, noise=None):
    """Draw ``x_t = sqrt(abar) x0 + sqrt(1 - abar) eps``; ``noise`` pins ``eps``."""
    a = schedule.alpha_bar(schedule.check_step(t))
    return perturb_with_alpha_bar(x0, a, rng=rng, noise=noise)


def perturb_with_alpha_bar(x0, alpha_bar: float, rng=None, noise=None):
    if not (0.0 <= alpha_bar <= 1.0):
        raise ValueError("alpha_bar must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=float)
    if noise is None:
        rng = np.random.default_rng(rng)
        noise = rng.standard_normal(x0.shape)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * np.asarray(noise, dtype=float)


def eps_to_score(eps, alpha_bar: float):
    if not (0.0 <= alpha_bar < 1.0):
        raise ValueError("alpha_bar must lie in [0, 1)")
    return -np.asarray(eps, dtype=float) / np.sqrt(1.0 - alpha_bar)


def score_to_eps(score, alpha_bar: float):
    if not (0.0 <= alpha_bar < 1.0):
        raise ValueError("alpha_bar must lie in [0, 1)")
    return -np.sqrt(1.0 - alpha_bar) * np.asarray(score, dtype=float)


def omega_schedule(kind: str, omega0: float, t: int, schedule: NoiseSchedule) -> float:
    """Guidance strength at step ``t`` (0 allowed, giving ``abar = 1``)."""
    if omega0 < 0:
        raise ValueError("omega0 must be nonnegative")
    a = schedule.alpha_bar(t)
    if kind == "sqrt_one_minus_abar":
        return float(omega0 * np.sqrt(1.0 - a))
    if kind == "one_minus_abar":
        return float(omega0 * (1.0 - a))
    if kind == "constant":
        return float(omega0)
    raise ValueError(f"unknown omega schedule kind {kind!r}; expected one of {OMEGA_KINDS}")
