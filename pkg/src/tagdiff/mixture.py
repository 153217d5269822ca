"""Closed-form oracle for isotropic Gaussian mixtures under the VP forward process.

Every function accepts a single point of shape ``(d,)`` or a batch of shape
``(n, d)`` and returns results with the matching leading shape.  Time
posteriors assume a uniform prior over the steps ``1..T`` of a schedule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, alpha_bar_continuous


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.asarray(self.variances, dtype=float).reshape(-1)
        if not (w.shape[0] == mu.shape[0] == var.shape[0]):
            raise ValueError("weights, means and variances disagree on the component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be strictly positive")
        for a in (w, mu, var):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z

    def subset(self, components) -> "GaussianMixture":
        """Mixture restricted to ``components`` with renormalized weights."""
        idx = np.asarray(components, dtype=int)
        w = self.weights[idx]
        return GaussianMixture(w / w.sum(), self.means[idx], self.variances[idx])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(np.array(d["weights"], dtype=float), np.array(d["means"], dtype=float),
                   np.array(d["variances"], dtype=float))

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))


def toy_mixture(separation: float = 10.0) -> GaussianMixture:
    """Two unit-variance blobs at ``(s, s)`` and ``(-s, -s)`` with equal weight."""
    return GaussianMixture([0.5, 0.5], [[separation, separation], [-separation, -separation]], [1.0, 1.0])


@dataclass(frozen=True)
class TimePosterior:
    probs: np.ndarray
    log_marginals: np.ndarray

    def argmax(self) -> np.ndarray:
        """Most probable 1-based step; ties resolve to the smaller step."""
        return np.argmax(self.probs, axis=-1) + 1


def _as_batch(gm: GaussianMixture, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != gm.dim:
        raise ValueError(f"expected points of dimension {gm.dim}, got shape {x.shape}")
    return xb, single


def _unbatch(arr, single):
    return arr[0] if single else arr


_BLOCK_ELEMS = 1 << 21


def _component_terms(means, variances, log_w, xb):
    """Joint log weights ``log w_i N_i(x)`` (n, K) and per-component scores (n, K, d)."""
    d = xb.shape[1]
    diff = xb[:, None, :] - means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    with np.errstate(divide="ignore"):
        logj = log_w[None, :] - 0.5 * d * np.log(2 * np.pi * variances)[None, :] - 0.5 * sq / variances[None, :]
    comp_scores = -diff / variances[None, :, None]
    return logj, comp_scores


def _log_weights(gm):
    with np.errstate(divide="ignore"):
        return np.log(gm.weights)


def _log_density_and_score(gm: GaussianMixture, xb):
    logj, cs = _component_terms(gm.means, gm.variances, _log_weights(gm), xb)
    lp = logsumexp(logj, axis=1)
    resp = np.exp(logj - lp[:, None])
    return lp, np.einsum("nk,nkd->nd", resp, cs), resp, cs


def log_density(gm: GaussianMixture, x):
    xb, single = _as_batch(gm, x)
    return _unbatch(_log_density_and_score(gm, xb)[0], single)


def score(gm: GaussianMixture, x):
    """Gradient of the log density: responsibility-weighted ``(mu_i - x) / var_i``."""
    xb, single = _as_batch(gm, x)
    return _unbatch(_log_density_and_score(gm, xb)[1], single)


def responsibilities(gm: GaussianMixture, x):
    xb, single = _as_batch(gm, x)
    return _unbatch(_log_density_and_score(gm, xb)[2], single)


def score_jacobian(gm: GaussianMixture, x):
    """Hessian of the log density, shape ``(d, d)`` or ``(n, d, d)``."""
    xb, single = _as_batch(gm, x)
    _, s, resp, cs = _log_density_and_score(gm, xb)
    d = gm.dim
    h = -np.einsum("nk,k->n", resp, 1.0 / gm.variances)[:, None, None] * np.eye(d)
    h = h + np.einsum("nk,nki,nkj->nij", resp, cs, cs) - np.einsum("ni,nj->nij", s, s)
    return _unbatch(h, single)


def perturbed_mixture(gm0: GaussianMixture, alpha_bar: float) -> GaussianMixture:
    """Exact marginal of ``sqrt(abar) x0 + sqrt(1 - abar) eps`` for ``x0 ~ gm0``."""
    if not (0.0 <= alpha_bar <= 1.0):
        raise ValueError("alpha_bar must lie in [0, 1]")
    return GaussianMixture(
        gm0.weights,
        np.sqrt(alpha_bar) * gm0.means,
        alpha_bar * gm0.variances + (1.0 - alpha_bar),
    )


def marginal_stack(gm0: GaussianMixture, alpha_bars, x):
    """Log marginals ``(L, n)`` and scores ``(L, n, d)`` for every entry of ``alpha_bars``."""
    xb = x
    n, d = xb.shape
    log_w = _log_weights(gm0)
    abars = np.asarray(alpha_bars, dtype=float)
    L = abars.size
    logp = np.empty((L, n))
    scores = np.empty((L, n, d))
    # levels are processed in blocks to bound the (block, n, K, d) temporaries
    block = max(1, _BLOCK_ELEMS // max(1, n * gm0.n_components * d))
    for lo in range(0, L, block):
        a = abars[lo:lo + block, None, None]
        means = np.sqrt(a) * gm0.means[None]
        var = a[:, :, 0] * gm0.variances[None] + (1.0 - a[:, :, 0])
        diff = xb[None, :, None, :] - means[:, None, :, :]
        sq = np.einsum("lnkd,lnkd->lnk", diff, diff)
        with np.errstate(divide="ignore"):
            logj = (log_w - 0.5 * d * np.log(2 * np.pi * var))[:, None, :] - 0.5 * sq / var[:, None, :]
        lp = logsumexp(logj, axis=2)
        resp = np.exp(logj - lp[..., None]) / var[:, None, :]
        logp[lo:lo + block] = lp
        scores[lo:lo + block] = -np.einsum("lnk,lnkd->lnd", resp, diff)
    return logp, scores


def _gammas(logp):
    """Normalized time weights ``p_k / sum_j p_j`` computed in log space."""
    return np.exp(logp - logsumexp(logp, axis=0, keepdims=True))


def time_posterior(gm0: GaussianMixture, schedule: NoiseSchedule, x) -> TimePosterior:
    """``p(t | x)`` for ``t = 1..T``; arrays have the step axis last."""
    xb, single = _as_batch(gm0, x)
    logp, _ = marginal_stack(gm0, schedule.alpha_bars, xb)
    probs = _gammas(logp).T
    return TimePosterior(_unbatch(probs, single), _unbatch(logp.T, single))


def _check_t(schedule, t):
    return schedule.check_step(t) - 1


def tls_analytic(gm0: GaussianMixture, schedule: NoiseSchedule, x, t: int):
    """``grad_x log p(t | x)`` as ``s_t - sum_k gamma_k s_k``."""
    i = _check_t(schedule, t)
    xb, single = _as_batch(gm0, x)
    logp, scores = marginal_stack(gm0, schedule.alpha_bars, xb)
    g = _gammas(logp)
    return _unbatch(scores[i] - np.einsum("kn,knd->nd", g, scores), single)


def tls_all(gm0: GaussianMixture, schedule: NoiseSchedule, x):
    """TLS for every step at once, shape ``(T, n, d)``; batch input only."""
    xb, _ = _as_batch(gm0, x)
    logp, scores = marginal_stack(gm0, schedule.alpha_bars, xb)
    mean_score = np.einsum("kn,knd->nd", _gammas(logp), scores)
    return scores - mean_score[None]


def tls_decomposed(gm0: GaussianMixture, schedule: NoiseSchedule, x, t: int):
    """Pairwise form ``sum_{k != t} gamma_k (s_t - s_k)``, summed term by term."""
    i = _check_t(schedule, t)
    xb, single = _as_batch(gm0, x)
    logp, scores = marginal_stack(gm0, schedule.alpha_bars, xb)
    g = _gammas(logp)
    out = np.zeros_like(xb)
    for k in range(schedule.T):
        if k == i:
            continue
        out += g[k][:, None] * (scores[i] - scores[k])
    return _unbatch(out, single)


def time_weights(gm0: GaussianMixture, schedule: NoiseSchedule, x):
    """``gamma_i = p_i / p_tot`` over all steps, step axis last."""
    xb, single = _as_batch(gm0, x)
    logp, _ = marginal_stack(gm0, schedule.alpha_bars, xb)
    return _unbatch(_gammas(logp).T, single)


def modified_score(gm0: GaussianMixture, schedule: NoiseSchedule, x, k: int):
    """TAG-modified score ``s_k - sum_i gamma_i s_i`` at step ``k``."""
    i = _check_t(schedule, k)
    xb, single = _as_batch(gm0, x)
    logp, scores = marginal_stack(gm0, schedule.alpha_bars, xb)
    g = _gammas(logp)
    total = np.zeros_like(xb)
    for j in range(schedule.T):
        total += g[j][:, None] * scores[j]
    return _unbatch(scores[i] - total, single)


def tls_continuous(gm0: GaussianMixture, beta_fn, x, t: float, t_max: float = 1.0, grid: int = 2048):
    """Continuous-time TLS under a uniform time prior on ``[0, t_max]``.

    ``grad log p_t(x) - int gamma_s grad log p_s(x) ds`` with the integral taken
    by the trapezoid rule on ``grid`` panels.  Signal levels follow
    :func:`~tagdiff.schedule.alpha_bar_continuous`.
    """
    if grid < 2:
        raise ValueError("grid must have at least 2 panels")
    if not (0.0 <= t <= t_max):
        raise ValueError("t must lie inside [0, t_max]")
    xb, single = _as_batch(gm0, x)
    s = np.linspace(0.0, t_max, grid + 1)
    abars = _continuous_alpha_bars(beta_fn, s)
    logp, scores = marginal_stack(gm0, abars, xb)
    # trapezoid weights folded into log space so tiny densities never underflow
    wq = np.full(grid + 1, t_max / grid)
    wq[[0, -1]] *= 0.5
    logw = logp + np.log(wq)[:, None]
    g = np.exp(logw - logsumexp(logw, axis=0, keepdims=True))
    mean_score = np.einsum("kn,knd->nd", g, scores)
    _, st = marginal_stack(gm0, [alpha_bar_continuous(beta_fn, t)], xb)
    return _unbatch(st[0] - mean_score, single)


def _continuous_alpha_bars(beta_fn, s):
    # cumulative trapezoid along a fine grid instead of one quadrature per node
    fine = 8
    sf = np.linspace(s[0], s[-1], (len(s) - 1) * fine + 1)
    b = np.asarray(np.vectorize(beta_fn, otypes=[float])(sf), dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (b[1:] + b[:-1]) * np.diff(sf))])
    return np.exp(-0.5 * cum[::fine])


def grid_times(n: int, t_max: float = 1.0, placement: str = "midpoint") -> np.ndarray:
    """Continuous times represented by steps ``1..n`` of a uniform grid on ``[0, t_max]``.

    ``"endpoint"`` puts step ``j`` at ``t_max * j / n``, which turns the uniform
    step prior into a right Riemann sum (first-order accurate).  ``"midpoint"``
    uses ``t_max * (j - 1/2) / n`` and is second-order accurate.
    """
    j = np.arange(1, n + 1)
    if placement == "endpoint":
        return t_max * j / n
    if placement == "midpoint":
        return t_max * (j - 0.5) / n
    raise ValueError(f"unknown placement {placement!r}")


def continuous_grid_schedule(beta_fn, n: int, t_max: float = 1.0, placement: str = "midpoint") -> NoiseSchedule:
    """Discrete schedule whose step ``j`` carries the signal level at ``grid_times(n)[j - 1]``."""
    fine = 64
    level = _continuous_alpha_bars(beta_fn, np.linspace(0.0, t_max, 2 * n * fine + 1))
    idx = np.rint(grid_times(n, t_max, placement) / t_max * 2 * n * fine).astype(int)
    abars = level[idx]
    prev = np.concatenate([[1.0], abars[:-1]])
    return NoiseSchedule(n, 1.0 - abars / prev, abars)


def posterior_mean_x0(gm0: GaussianMixture, x_t, alpha_bar: float):
    """Exact ``E[x0 | x_t]`` from per-component Gaussian posteriors."""
    if not (0.0 < alpha_bar <= 1.0):
        raise ValueError("alpha_bar must lie in (0, 1]")
    xb, single = _as_batch(gm0, x_t)
    pm = perturbed_mixture(gm0, alpha_bar)
    resp = _log_density_and_score(pm, xb)[2]
    gain = np.sqrt(alpha_bar) * gm0.variances / pm.variances
    comp_means = gm0.means[None] + gain[None, :, None] * (xb[:, None, :] - pm.means[None])
    return _unbatch(np.einsum("nk,nkd->nd", resp, comp_means), single)


def drift_energy_bound(gm0: GaussianMixture, schedule: NoiseSchedule, drift_fn, n_mc: int = 1000, seed=0) -> float:
    """Monte-Carlo value of ``0.5 * int int g(t)^-2 p_t(x) |v(x, t)|^2 dx dt``.

    Time runs over the step grid ``1..T`` in unit steps with ``g(t)^2 = beta_t``;
    ``x ~ p_t`` is drawn exactly from the perturbed mixture.  Draws do not
    depend on ``drift_fn``, so matched seeds give matched samples.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    integrand = np.empty(schedule.T)
    for j in range(schedule.T):
        t = j + 1
        xs = perturbed_mixture(gm0, schedule.alpha_bar(t)).sample(n_mc, rng)
        v = np.asarray(drift_fn(xs, t), dtype=float)
        integrand[j] = np.mean(np.sum(v * v, axis=-1)) / schedule.beta(t)
    if schedule.T == 1:
        return float(0.5 * integrand[0])
    return float(0.5 * np.trapezoid(integrand, dx=1.0))
