"""Training-free conditional guidance and its time-aligned variants.

Conditions act on the Tweedie estimate of the clean point.  All updates move
down the loss gradients; the time term ``-grad l_t`` is the time-linked score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampler import Trajectory, _streams, ddim_timesteps, ddpm_step, tweedie_x0hat
from .schedule import NoiseSchedule, omega_schedule, score_to_eps

LOSSES = ("squared", "absolute")


@dataclass(frozen=True)
class ConditionSpec:
    """Property ``A(x) = w . x`` compared with ``target`` under ``loss``.

    ``kind="coordinate"`` selects one axis (``params = index``);
    ``kind="linear"`` uses ``params`` as the weight vector.
    """

    kind: str
    params: object
    target: float
    loss: str = "squared"

    def __post_init__(self):
        if self.kind not in ("coordinate", "linear"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def weights(self, dim: int) -> np.ndarray:
        if self.kind == "coordinate":
            w = np.zeros(dim)
            w[int(self.params)] = 1.0
            return w
        w = np.asarray(self.params, dtype=float)
        if w.shape != (dim,):
            raise ValueError(f"linear condition needs {dim} weights")
        return w

    def property(self, x0):
        x0 = np.atleast_2d(x0)
        return x0 @ self.weights(x0.shape[1])

    def loss_value(self, x0):
        r = self.property(x0) - self.target
        return 0.5 * r * r if self.loss == "squared" else np.abs(r)

    def loss_grad_x0(self, x0):
        """Gradient of the loss with respect to the clean point, ``(n, d)``."""
        x0 = np.atleast_2d(x0)
        r = self.property(x0) - self.target
        dl = r if self.loss == "squared" else np.sign(r)
        return dl[:, None] * self.weights(x0.shape[1])[None, :]

    def to_dict(self) -> dict:
        params = self.params.tolist() if isinstance(self.params, np.ndarray) else self.params
        return {"kind": self.kind, "params": params, "target": self.target, "loss": self.loss}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSpec":
        return cls(d["kind"], d["params"], float(d["target"]), d.get("loss", "squared"))


def tweedie_jacobian(score_src, x_t, t: int, schedule: NoiseSchedule):
    """``d x0_hat / d x_t = (I + (1 - abar) ds/dx) / sqrt(abar)``, ``(n, d, d)``."""
    a = schedule.alpha_bar(t)
    x_t = np.atleast_2d(x_t)
    d = x_t.shape[1]
    return (np.eye(d)[None] + (1.0 - a) * score_src.jacobian(x_t, t)) / np.sqrt(a)


def tfg_gradient(score_src, cond: ConditionSpec, x_t, t: int, schedule: NoiseSchedule):
    """``grad_{x_t} l(A(x0_hat(x_t)), c)`` through the Tweedie estimate."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    x0 = tweedie_x0hat(score_src, x_t, t, schedule)
    jac = tweedie_jacobian(score_src, x_t, t, schedule)
    return np.einsum("nij,ni->nj", jac, cond.loss_grad_x0(x0))


def conditional_tag_score(score_src, conds, tls_src, x_t, t: int, schedule: NoiseSchedule,
                          rho_t: float, omega_t: float):
    """``s - rho * sum grad l_c + omega * TLS``; zero strengths skip their terms."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    out = score_src(x_t, t)
    if rho_t != 0:
        for c in _as_list(conds):
            out = out - rho_t * tfg_gradient(score_src, c, x_t, t, schedule)
    if omega_t != 0:
        out = out + omega_t * tls_src.tls(x_t, t)
    return out


def _as_list(conds):
    return [conds] if isinstance(conds, ConditionSpec) else list(conds)


def reparam_single(x_t, cond1: ConditionSpec, eta_sq: float, score_src, t: int, schedule: NoiseSchedule):
    """``x_t - eta^2 grad l_1(A_1(x0_hat), c_1)``."""
    if eta_sq < 0:
        raise ValueError("eta_sq must be nonnegative")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    if eta_sq == 0:
        return x_t.copy()
    return x_t - eta_sq * tfg_gradient(score_src, cond1, x_t, t, schedule)


def reparam_unconditional(x_t, cond1, cond2, eta_sq, eta_tilde_sq, score_src, t: int, schedule: NoiseSchedule):
    """Sequential shifts for an unconditional time predictor.

    The first stage moves ``x_t`` by ``eta_tilde^2 grad l_1`` to an intermediate
    point, Tweedie is recomputed there, and the final point is
    ``x_t - eta^2 grad l_1(x0_hat) - eta^2 grad l_2(x0_hat')``.
    """
    if eta_sq < 0 or eta_tilde_sq < 0:
        raise ValueError("reparameterization steps must be nonnegative")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    g1 = tfg_gradient(score_src, cond1, x_t, t, schedule)
    mid = x_t - eta_tilde_sq * g1
    g2 = tfg_gradient(score_src, cond2, mid, t, schedule)
    return x_t - eta_sq * g1 - eta_sq * g2


def algorithm_shift(variant, x_t, cond1, cond2, eta_sq, eta_tilde_sq, score_src, t, schedule):
    """Point at which the time predictor is queried in the multi-condition loops.

    ``single_predictor``: ``x' = x - eta^2 grad l_1`` (queried with ``c_2``).
    ``uncond_predictor``: ``x'' = x' - eta~^2 grad l_2(x0_hat')``.
    """
    x1 = reparam_single(x_t, cond1, eta_sq, score_src, t, schedule)
    if variant == "single_predictor":
        return x1
    if variant == "uncond_predictor":
        if eta_tilde_sq == 0:
            return x1
        return x1 - eta_tilde_sq * tfg_gradient(score_src, cond2, x1, t, schedule)
    raise ValueError(f"unknown variant {variant!r}")


def temporal_alignment_term(variant, tls_src, x_t, t, cond1, cond2, eta_sq, eta_tilde_sq, score_src, schedule):
    """``T = -grad l_t`` evaluated at the reparameterized point, i.e. its TLS.

    For ``single_predictor`` the TLS source stands for ``p(t | x, c_2)``.
    """
    shifted = algorithm_shift(variant, x_t, cond1, cond2, eta_sq, eta_tilde_sq, score_src, t, schedule)
    return tls_src.tls(shifted, t), shifted


def sample_multicond(variant, score_src, tls_src, cond1, cond2, schedule: NoiseSchedule, rho=0.0, omega=0.0,
                     eta_sq=None, eta_tilde_sq=None, n=1000, seed=0, n_steps=None, rho_kind="constant",
                     omega_kind="one_minus_abar") -> Trajectory:
    """DDIM loop with reparameterized time alignment and independent condition guidance.

    Per step: ``x_{t'} = sqrt(abar') x0_hat + sqrt(1 - abar') eps_hat
    + rho_t G + omega_t T`` with ``G = -(grad l_1 + grad l_2)``.
    ``eta_sq`` defaults to ``rho_t`` and ``eta_tilde_sq`` to ``eta_sq``.
    """
    rng_init, _, _ = _streams(seed)
    x = rng_init.standard_normal((n, score_src.dim))
    times = ddim_timesteps(schedule.T, schedule.T if n_steps is None else n_steps)
    states = np.empty((len(times), n, score_src.dim))
    guidance = np.zeros((len(times) - 1, n, score_src.dim))
    states[0] = x
    for j in range(len(times) - 1):
        t, tp = int(times[j]), int(times[j + 1])
        a, ap = schedule.alpha_bar(t), schedule.alpha_bar(tp)
        s = score_src(x, t)
        x0 = tweedie_x0hat(score_src, x, t, schedule, score_value=s)
        x_new = np.sqrt(ap) * x0 + np.sqrt(1.0 - ap) * score_to_eps(s, a)
        r = omega_schedule(rho_kind, rho, t, schedule)
        w = omega_schedule(omega_kind, omega, t, schedule)
        if r > 0:
            g = -(tfg_gradient(score_src, cond1, x, t, schedule) + tfg_gradient(score_src, cond2, x, t, schedule))
            x_new = x_new + r * g
        if w > 0:
            e1 = r if eta_sq is None else eta_sq
            e2 = e1 if eta_tilde_sq is None else eta_tilde_sq
            term, _ = temporal_alignment_term(variant, tls_src, x, t, cond1, cond2, e1, e2, score_src, schedule)
            guidance[j] = w * term
            x_new = x_new + guidance[j]
        x = x_new
        states[j + 1] = x
    return Trajectory(times, states, guidance, None, seed)


def sample_guided_ddpm(score_src, conds, schedule: NoiseSchedule, rho=0.0, tls_src=None, omega=0.0,
                       n=1000, seed=0, rho_kind="constant", omega_kind="one_minus_abar") -> Trajectory:
    """Ancestral sampling with the conditional score ``s - rho grad l + omega TLS`` at each step."""
    rng_init, rng_step, _ = _streams(seed)
    x = rng_init.standard_normal((n, score_src.dim))
    times = np.arange(schedule.T, -1, -1)
    states = np.empty((len(times), n, score_src.dim))
    states[0] = x
    for j, t in enumerate(times[:-1]):
        t = int(t)
        r = omega_schedule(rho_kind, rho, t, schedule)
        w = omega_schedule(omega_kind, omega, t, schedule)
        s = conditional_tag_score(score_src, conds, tls_src, x, t, schedule, r, w)
        x = ddpm_step(score_src, x, t, schedule, noise=rng_step.standard_normal(x.shape), score_value=s)
        states[j + 1] = x
    return Trajectory(times, states, np.zeros((len(times) - 1, n, score_src.dim)), None, seed)


def joint_satisfaction(samples, conds, tol: float = 1.0) -> float:
    """Fraction of samples whose every property lies within ``tol`` of its target."""
    samples = np.atleast_2d(samples)
    ok = np.ones(samples.shape[0], dtype=bool)
    for c in _as_list(conds):
        ok &= np.abs(c.property(samples) - c.target) <= tol
    return float(ok.mean())
