"""Reverse-process samplers with temporal alignment guidance.

A reverse run starts from ``x_T ~ N(0, I)`` and walks the step indices down
to 0.  Guidance toward the correct noise level is applied after each base
step: ``x_{t-1} = x~_{t-1} + omega_t * TLS(x~_{t-1}, t-1)``, where the
final jump to 0 targets step 1, the least-noisy class.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import mixture as mx
from .mixture import GaussianMixture
from .net import Mlp, learned_score, predict_time, predictor_tls
from .schedule import NoiseSchedule, omega_schedule, score_to_eps

FD_STEP = 1e-4


class NumericalDivergenceError(FloatingPointError):
    """A sampler produced non-finite states or drifts."""


class ScoreSource:
    """Uniform ``score(x, t)`` contract over analytic and learned scores."""

    schedule: NoiseSchedule
    dim: int | None = None

    def score(self, x, t: int):
        raise NotImplementedError

    def __call__(self, x, t: int):
        return self.score(x, t)

    def jacobian(self, x, t: int):
        """``d score / d x`` per point, ``(n, d, d)``, by central differences."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        jac = np.empty((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = FD_STEP
            jac[:, :, j] = (self.score(x + e, t) - self.score(x - e, t)) / (2 * FD_STEP)
        return jac


class AnalyticScore(ScoreSource):
    """Exact score of the perturbed Gaussian mixture at each step."""

    def __init__(self, gm0: GaussianMixture, schedule: NoiseSchedule):
        self.gm0 = gm0
        self.schedule = schedule
        self.dim = gm0.dim

    def marginal(self, t: int) -> GaussianMixture:
        return mx.perturbed_mixture(self.gm0, self.schedule.alpha_bar(t))

    def score(self, x, t):
        return mx.score(self.marginal(t), np.atleast_2d(x))

    def jacobian(self, x, t):
        return mx.score_jacobian(self.marginal(t), np.atleast_2d(x))


class LearnedScore(ScoreSource):
    def __init__(self, model, schedule: NoiseSchedule):
        self.mlp = model if isinstance(model, Mlp) else model.mlp_
        self.schedule = schedule
        self.dim = self.mlp.n_out

    def score(self, x, t):
        return learned_score(self.mlp, np.atleast_2d(x), t, self.schedule)


class AnalyticTLS:
    """Time-linked score and time posterior from the mixture oracle."""

    def __init__(self, gm0: GaussianMixture, schedule: NoiseSchedule):
        self.gm0 = gm0
        self.schedule = schedule

    def tls(self, x, t: int):
        return mx.tls_analytic(self.gm0, self.schedule, np.atleast_2d(x), t)

    def predict_time(self, x):
        return mx.time_posterior(self.gm0, self.schedule, np.atleast_2d(x)).argmax()


class PredictorTLS:
    """Time-linked score from a trained time classifier."""

    def __init__(self, model):
        self.mlp = model if isinstance(model, Mlp) else model.mlp_

    def tls(self, x, t: int):
        return predictor_tls(self.mlp, np.atleast_2d(x), t)

    def predict_time(self, x):
        return predict_time(self.mlp, np.atleast_2d(x))


@dataclass(frozen=True)
class OmegaConfig:
    omega0: float = 0.0
    kind: str = "one_minus_abar"

    def at(self, t: int, schedule: NoiseSchedule) -> float:
        return omega_schedule(self.kind, self.omega0, t, schedule)


@dataclass
class Trajectory:
    """Batched record of a reverse run; axis 0 follows the visited steps ``T -> 0``."""

    times: np.ndarray
    states: np.ndarray
    applied_guidance: np.ndarray
    predicted_times: np.ndarray | None
    seed: int | None
    extras: dict = field(default_factory=dict)

    @property
    def samples(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def to_csv(self, run_id_offset: int = 0) -> str:
        """One row per step per trajectory."""
        buf = io.StringIO()
        d = self.states.shape[2]
        w = csv.writer(buf)
        w.writerow(["run_id", "step"] + [f"x{j}" for j in range(d)] + ["predicted_time", "guidance_norm"])
        norms = np.linalg.norm(self.applied_guidance, axis=2)
        for r in range(self.n):
            for j, t in enumerate(self.times):
                g = norms[j - 1, r] if j > 0 else 0.0
                pt = "" if self.predicted_times is None or t == 0 else int(self.predicted_times[j, r])
                w.writerow([r + run_id_offset, int(t)] + [repr(float(v)) for v in self.states[j, r]] + [pt, repr(float(g))])
        return buf.getvalue()


def tweedie_x0hat(score_src, x_t, t: int, schedule: NoiseSchedule, score_value=None):
    """``(x_t + (1 - abar) s) / sqrt(abar)``; ``score_value`` skips re-evaluating the score."""
    a = schedule.alpha_bar(t)
    if a <= 0:
        raise ValueError("alpha_bar must be positive")
    x_t = np.asarray(x_t, dtype=float)
    s = score_src(x_t, t) if score_value is None else score_value
    return (x_t + (1.0 - a) * np.reshape(s, x_t.shape)) / np.sqrt(a)


def ddpm_step(score_src, x_t, t: int, schedule: NoiseSchedule, rng=None, noise=None, score_value=None):
    """Ancestral step ``(x + beta s) / sqrt(1 - beta) + sqrt(beta) z``."""
    t = schedule.check_step(t)
    x_t = np.asarray(x_t, dtype=float)
    b = schedule.beta(t)
    s = score_src(x_t, t) if score_value is None else score_value
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal(x_t.shape)
    return (x_t + b * np.reshape(s, x_t.shape)) / np.sqrt(1.0 - b) + np.sqrt(b) * noise


def ddim_step(score_src, x_t, t: int, t_prev: int, schedule: NoiseSchedule, score_value=None):
    """Deterministic jump ``sqrt(abar') x0_hat + sqrt(1 - abar') eps_hat``."""
    t = schedule.check_step(t)
    t_prev = schedule.check_step(t_prev, allow_zero=True)
    if not t_prev < t:
        raise ValueError("t_prev must precede t")
    x_t = np.asarray(x_t, dtype=float)
    s = np.reshape(score_src(x_t, t) if score_value is None else score_value, x_t.shape)
    a, ap = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    x0 = tweedie_x0hat(score_src, x_t, t, schedule, score_value=s)
    eps = score_to_eps(s, a)
    return np.sqrt(ap) * x0 + np.sqrt(1.0 - ap) * eps


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Descending visit order ``[T, ..., 0]`` with ``n_steps`` jumps."""
    if not 1 <= n_steps <= T:
        raise ValueError("n_steps must lie in [1, T]")
    ts = np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(int))[::-1]
    return ts


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    init, step, corrupt = ss.spawn(3)
    return np.random.default_rng(init), np.random.default_rng(step), np.random.default_rng(corrupt)


def reverse_sample(score_src, schedule: NoiseSchedule, n: int, seed=0, *, sampler="ddpm", tls_src=None,
                   omega: OmegaConfig | float = 0.0, drift_fn=None, sigma: float = 0.0, n_steps=None,
                   x_init=None, record_times=True) -> Trajectory:
    """General reverse loop behind every public sampler.

    Per visited step ``t -> t'``: optional corruption ``x += sigma * eps``,
    base DDPM/DDIM step, optional external drift ``+ v(x_t, t)``, then
    guidance ``omega_t * TLS(., max(t', 1))``.  Each ingredient is
    skipped entirely at zero strength, so reductions are bitwise.
    """
    if isinstance(omega, (int, float)):
        omega = OmegaConfig(float(omega))
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if omega.omega0 > 0 and tls_src is None:
        raise ValueError("guidance needs a TLS source")
    rng_init, rng_step, rng_corrupt = _streams(seed)
    d = getattr(score_src, "dim", None)
    if x_init is None:
        if d is None:
            raise ValueError("x_init is required when the score source has no dimension")
        x = rng_init.standard_normal((n, d))
    else:
        x = np.array(x_init, dtype=float)
    n, d = x.shape

    if sampler == "ddpm":
        if n_steps not in (None, schedule.T):
            raise ValueError("ddpm visits every step")
        times = np.arange(schedule.T, -1, -1)
    elif sampler == "ddim":
        times = ddim_timesteps(schedule.T, schedule.T if n_steps is None else n_steps)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")

    states = np.empty((len(times), n, d))
    guidance = np.zeros((len(times) - 1, n, d))
    predicted = np.zeros((len(times), n), dtype=int) if record_times and tls_src is not None else None
    states[0] = x
    for j in range(len(times) - 1):
        t, tp = int(times[j]), int(times[j + 1])
        if predicted is not None:
            predicted[j] = tls_src.predict_time(x)
        if sigma > 0:
            x = x + sigma * rng_corrupt.standard_normal(x.shape)
        s = score_src(x, t)
        if sampler == "ddpm":
            x_new = ddpm_step(score_src, x, t, schedule, noise=rng_step.standard_normal(x.shape), score_value=s)
        else:
            x_new = ddim_step(score_src, x, t, tp, schedule, score_value=s)
        if drift_fn is not None:
            v = np.asarray(drift_fn(x, t), dtype=float)
            if not np.all(np.isfinite(v)):
                raise NumericalDivergenceError(f"non-finite drift at step {t}")
            x_new = x_new + v
        w = omega.at(t, schedule)
        if w > 0:
            # the clean end of the chain is aligned with the least-noisy class
            g = w * tls_src.tls(x_new, max(tp, 1))
            guidance[j] = g
            x_new = x_new + g
        if not np.all(np.isfinite(x_new)):
            raise NumericalDivergenceError(f"non-finite state after step {t}")
        x = x_new
        states[j + 1] = x
    if predicted is not None:
        predicted[-1] = 0
    return Trajectory(times, states, guidance, predicted, seed)


def sample_with_tag(score_src, tls_src, schedule, omega_cfg, sampler="ddpm", n=1000, seed=0, **kw):
    return reverse_sample(score_src, schedule, n, seed, sampler=sampler, tls_src=tls_src, omega=omega_cfg, **kw)


def sample_with_drift(score_src, schedule, drift_fn, n=1000, seed=0, **kw):
    """Reverse run with an external drift added to the state every step."""
    return reverse_sample(score_src, schedule, n, seed, drift_fn=drift_fn, **kw)


def sample_corrupted(score_src, tls_src, schedule, sigma, omega_cfg, n=1000, seed=0, **kw):
    """Reverse run with ``sigma * eps`` injected before every step and guidance after it."""
    return reverse_sample(score_src, schedule, n, seed, tls_src=tls_src, omega=omega_cfg, sigma=sigma, **kw)


def linear_drift(coef: float):
    """``v(x, t) = coef * x``."""
    def drift(x, t):
        return coef * np.asarray(x, dtype=float)
    return drift


# -- Langevin correctors -----------------------------------------------------

def _langevin_update(x, drift, step_size, rng, noise):
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal(np.shape(x))
    return x + step_size * drift + np.sqrt(2.0 * step_size) * noise


def langevin_drift(score_src, x, k: int):
    return score_src(np.atleast_2d(x), k)


def modified_langevin_drift(gm0: GaussianMixture, schedule: NoiseSchedule, x, k: int):
    """``s_k - sum_{i != k} gamma_i s_i``."""
    i = schedule.check_step(k) - 1
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    logp, scores = mx.marginal_stack(gm0, schedule.alpha_bars, xb)
    g = mx._gammas(logp)
    g[i] = 0.0
    return scores[i] - np.einsum("kn,knd->nd", g, scores)


def langevin_step(score_src, x, k: int, step_size: float, rng=None, noise=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _langevin_update(x, langevin_drift(score_src, x, k), step_size, rng, noise)


def modified_langevin_step(gm0, schedule, x, k: int, step_size: float, rng=None, noise=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _langevin_update(x, modified_langevin_drift(gm0, schedule, x, k), step_size, rng, noise)


@dataclass
class EscapeResult:
    exit_steps: np.ndarray
    n_censored: int
    trials: int
    epsilon: float

    @property
    def all_censored(self) -> bool:
        return self.n_censored == self.trials

    @property
    def mean(self) -> float:
        return float(np.mean(self.exit_steps)) if len(self.exit_steps) else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.exit_steps)) if len(self.exit_steps) else float("nan")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "n_censored": self.n_censored,
                "trials": self.trials, "epsilon": self.epsilon, "all_censored": self.all_censored}


def peak_log_density(gm: GaussianMixture) -> float:
    """Largest log density over the component centres."""
    return float(np.max(mx.log_density(gm, gm.means)))


def estimate_escape_time(kind: str, gm0: GaussianMixture, schedule: NoiseSchedule, k: int, init,
                         step_size: float, max_steps: int, trials: int, seed=0, epsilon=None) -> EscapeResult:
    """First step at which ``p_k(x) > epsilon`` for plain or modified Langevin chains.

    ``init`` is an ``(trials, d)`` array or a callable ``(n, rng) -> array``.
    ``epsilon`` defaults to ``1e-3`` times the peak density of ``p_k``.
    Chains still inside the low-density set after ``max_steps`` are censored.
    """
    if kind not in ("plain", "modified"):
        raise ValueError("kind must be 'plain' or 'modified'")
    rng = np.random.default_rng(seed)
    pk = mx.perturbed_mixture(gm0, schedule.alpha_bar(k))
    log_eps = peak_log_density(pk) + np.log(1e-3) if epsilon is None else np.log(epsilon)
    x = np.array(init(trials, rng) if callable(init) else init, dtype=float)
    src = AnalyticScore(gm0, schedule)
    exit_step = np.full(trials, -1)
    active = mx.log_density(pk, x) <= log_eps
    exit_step[~active] = 0
    for step in range(1, max_steps + 1):
        if not active.any():
            break
        xa = x[active]
        z = rng.standard_normal(xa.shape)
        if kind == "plain":
            xa = langevin_step(src, xa, k, step_size, noise=z)
        else:
            xa = modified_langevin_step(gm0, schedule, xa, k, step_size, noise=z)
        x[active] = xa
        escaped = mx.log_density(pk, xa) > log_eps
        idx = np.flatnonzero(active)[escaped]
        exit_step[idx] = step
        active[idx] = False
    done = exit_step >= 0
    return EscapeResult(exit_step[done], int((~done).sum()), trials, float(np.exp(log_eps)))
