import csv
import io

import numpy as np
import pytest

from tagdiff import mixture as mx
from tagdiff.metrics import sliced_w1
from tagdiff.mixture import GaussianMixture
from tagdiff.sampler import (
    AnalyticScore,
    AnalyticTLS,
    NumericalDivergenceError,
    OmegaConfig,
    ScoreSource,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    estimate_escape_time,
    langevin_drift,
    langevin_step,
    linear_drift,
    modified_langevin_drift,
    modified_langevin_step,
    reverse_sample,
    sample_corrupted,
    sample_with_drift,
    sample_with_tag,
    tweedie_x0hat,
)
from tagdiff.schedule import NoiseSchedule, linear_beta_schedule, scaled_linear_schedule

STD2 = GaussianMixture([1.0], [[0.0, 0.0]], [1.0])


def schedule_from_abars(abars):
    abars = np.asarray(abars, dtype=float)
    prev = np.concatenate([[1.0], abars[:-1]])
    return NoiseSchedule(len(abars), 1.0 - abars / prev, abars)


class ZeroScore(ScoreSource):
    dim = 2

    def __init__(self, schedule):
        self.schedule = schedule

    def score(self, x, t):
        return np.zeros_like(np.atleast_2d(x))


class PointMassScore(ScoreSource):
    """Exact score of the noised point mass at ``c``: ``-(x - sqrt(abar) c) / (1 - abar)``."""

    def __init__(self, c, schedule):
        self.c = np.asarray(c, dtype=float)
        self.schedule = schedule
        self.dim = self.c.size

    def score(self, x, t):
        a = self.schedule.alpha_bar(t)
        return -(np.atleast_2d(x) - np.sqrt(a) * self.c) / (1.0 - a)


def test_tweedie_examples():
    sch = schedule_from_abars([0.25])
    np.testing.assert_allclose(tweedie_x0hat(AnalyticScore(STD2, sch), [[2.0, 2.0]], 1, sch), [[1.0, 1.0]])
    # step 0 carries abar = 1: the estimate is the input whatever the score
    x = np.array([[3.0, -1.0]])
    np.testing.assert_array_equal(tweedie_x0hat(None, x, 0, sch, score_value=np.array([[5.0, 7.0]])), x)


def test_tweedie_matches_posterior_mean(rng):
    from conftest import random_instance

    for _ in range(200):
        gm, sch, x, t = random_instance(rng)
        got = tweedie_x0hat(AnalyticScore(gm, sch), x[None], t, sch)[0]
        np.testing.assert_allclose(got, mx.posterior_mean_x0(gm, x, sch.alpha_bar(t)), atol=1e-8, rtol=0)


def test_analytic_source_matches_perturbed_mixture(rng):
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(20)
    src = AnalyticScore(gm, sch)
    x = rng.normal(0, 5, size=(10, 2))
    for t in (1, 7, 20):
        np.testing.assert_array_equal(src(x, t), mx.score(mx.perturbed_mixture(gm, sch.alpha_bar(t)), x))


def test_ddpm_frozen_step():
    sch = linear_beta_schedule(1, 1e-15, 1e-15)
    x = np.array([[1.5, -2.0]])
    out = ddpm_step(ZeroScore(sch), x, 1, sch, noise=np.zeros_like(x))
    np.testing.assert_allclose(out, x, rtol=1e-14)


def test_ddpm_chain_keeps_standard_normal():
    sch = scaled_linear_schedule(100)
    tr = reverse_sample(AnalyticScore(STD2, sch), sch, 10000, seed=4)
    s = tr.samples
    assert np.all(np.abs(s.mean(axis=0)) < 0.05)
    assert np.all(np.abs(np.cov(s.T) - np.eye(2)) < 0.1)


def test_ddpm_is_deterministic_under_seed():
    sch = scaled_linear_schedule(30)
    src = AnalyticScore(mx.toy_mixture(), sch)
    a = reverse_sample(src, sch, 50, seed=9)
    b = reverse_sample(src, sch, 50, seed=9)
    np.testing.assert_array_equal(a.states, b.states)
    c = ddpm_step(src, a.states[0], 30, sch, rng=1)
    np.testing.assert_array_equal(c, ddpm_step(src, a.states[0], 30, sch, rng=1))


def test_exact_score_ddpm_recovers_data():
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(100)
    tr = reverse_sample(AnalyticScore(gm, sch), sch, 10000, seed=0, record_times=False)
    assert sliced_w1(tr.samples, gm.sample(10000, 123), cap=100000) < 0.5


def test_ddim_closed_form():
    sch = schedule_from_abars([0.5, 0.25])
    out = ddim_step(AnalyticScore(STD2, sch), np.array([[1.0, 0.0]]), 2, 1, sch)
    expected = np.sqrt(0.125) + np.sqrt(0.375)
    assert expected == pytest.approx(0.965926, abs=1e-6)
    np.testing.assert_allclose(out, [[expected, 0.0]], rtol=1e-14)


def test_ddim_terminal_step_returns_tweedie():
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(10)
    src = AnalyticScore(gm, sch)
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_allclose(ddim_step(src, x, 4, 0, sch), tweedie_x0hat(src, x, 4, sch), rtol=1e-14)
    with pytest.raises(ValueError):
        ddim_step(src, x, 4, 4, sch)
    with pytest.raises(IndexError):
        ddim_step(src, x, 11, 3, sch)


def test_ddim_point_mass_flow_commutes():
    sch = scaled_linear_schedule(40)
    src = PointMassScore([2.0, -1.0], sch)
    x = np.random.default_rng(1).normal(size=(8, 2))
    two = ddim_step(src, ddim_step(src, x, 30, 20, sch), 20, 10, sch)
    one = ddim_step(src, x, 30, 10, sch)
    np.testing.assert_allclose(two, one, rtol=1e-12, atol=1e-12)


def test_ddim_standard_normal_does_not_commute():
    # recorded behaviour: for unit-variance data each jump scales by cos of the angle gap, which does not compose
    sch = schedule_from_abars([0.8, 0.5, 0.2])
    src = AnalyticScore(STD2, sch)
    x = np.array([[1.0, 0.0]])
    two = ddim_step(src, ddim_step(src, x, 3, 2, sch), 2, 1, sch)
    one = ddim_step(src, x, 3, 1, sch)
    assert abs(two[0, 0] - one[0, 0]) > 1e-3


def test_ddim_timesteps():
    np.testing.assert_array_equal(ddim_timesteps(100, 1), [100, 0])
    np.testing.assert_array_equal(ddim_timesteps(100, 4), [100, 75, 50, 25, 0])
    assert len(ddim_timesteps(100, 3)) == 4
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


@pytest.mark.parametrize("sampler", ["ddpm", "ddim"])
def test_zero_strength_reductions_are_bitwise(sampler):
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(25)
    src, tls = AnalyticScore(gm, sch), AnalyticTLS(gm, sch)
    base = reverse_sample(src, sch, 64, seed=3, sampler=sampler)
    kw = {"n_steps": 5} if sampler == "ddim" else {}
    base_kw = reverse_sample(src, sch, 64, seed=3, sampler=sampler, **kw)
    tag = sample_with_tag(src, tls, sch, OmegaConfig(0.0), sampler=sampler, n=64, seed=3, **kw)
    np.testing.assert_array_equal(tag.states, base_kw.states)
    corr = sample_corrupted(src, tls, sch, 0.0, OmegaConfig(0.0), n=64, seed=3, sampler=sampler)
    np.testing.assert_array_equal(corr.states, base.states)
    drift = sample_with_drift(src, sch, lambda x, t: np.zeros_like(x), n=64, seed=3, sampler=sampler)
    np.testing.assert_array_equal(drift.states, base.states)


def test_single_step_guidance_vanishes():
    gm = mx.toy_mixture()
    sch = linear_beta_schedule(1, 0.5, 0.5)
    tr = sample_with_tag(AnalyticScore(gm, sch), AnalyticTLS(gm, sch), sch, OmegaConfig(5.0, "constant"), n=20, seed=0)
    np.testing.assert_array_equal(tr.applied_guidance, 0.0)


def test_recorded_guidance_matches_recomputed_tls():
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(20)
    tls = AnalyticTLS(gm, sch)
    om = OmegaConfig(2.0)
    tr = sample_with_tag(AnalyticScore(gm, sch), tls, sch, om, n=32, seed=1)
    for j, t in enumerate(tr.times[:-1]):
        pre = tr.states[j + 1] - tr.applied_guidance[j]
        again = om.at(int(t), sch) * tls.tls(pre, max(int(t) - 1, 1))
        np.testing.assert_allclose(tr.applied_guidance[j], again, atol=1e-12, rtol=0)


def test_guidance_requires_tls_source():
    sch = scaled_linear_schedule(5)
    with pytest.raises(ValueError):
        reverse_sample(AnalyticScore(STD2, sch), sch, 4, omega=1.0)
    with pytest.raises(ValueError):
        reverse_sample(AnalyticScore(STD2, sch), sch, 4, sigma=-1.0)


def test_non_finite_drift_aborts():
    sch = scaled_linear_schedule(5)
    with pytest.raises(NumericalDivergenceError):
        sample_with_drift(AnalyticScore(STD2, sch), sch, lambda x, t: np.full_like(x, np.nan), n=4)


def test_drift_moves_samples_inward():
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(100)
    src = AnalyticScore(gm, sch)
    plain = reverse_sample(src, sch, 2000, seed=0, record_times=False)
    drifted = sample_with_drift(src, sch, linear_drift(-0.01), n=2000, seed=0, record_times=False)
    assert np.mean(np.abs(drifted.samples)) < np.mean(np.abs(plain.samples)) - 1.0


def test_trajectory_csv_layout():
    gm = mx.toy_mixture()
    sch = scaled_linear_schedule(4)
    tr = sample_with_tag(AnalyticScore(gm, sch), AnalyticTLS(gm, sch), sch, OmegaConfig(1.0), n=3, seed=0)
    rows = list(csv.reader(io.StringIO(tr.to_csv())))
    assert rows[0] == ["run_id", "step", "x0", "x1", "predicted_time", "guidance_norm"]
    assert len(rows) == 1 + 3 * 5
    assert [int(r[1]) for r in rows[1:6]] == [4, 3, 2, 1, 0]
    assert tr.states.shape == (5, 3, 2)


# -- Langevin -------------------------------------------------------------------

def test_langevin_zero_step_and_stationary_point():
    gm = GaussianMixture([1.0], [[3.0, -1.0]], [0.5])
    sch = scaled_linear_schedule(10)
    src = AnalyticScore(gm, sch)
    x = np.array([[0.3, 0.2]])
    np.testing.assert_allclose(langevin_step(src, x, 2, 1e-14, noise=np.zeros_like(x)), x, rtol=1e-12)
    mode = np.sqrt(sch.alpha_bar(4)) * gm.means
    np.testing.assert_allclose(langevin_step(src, mode, 4, 0.1, noise=np.zeros_like(mode)), mode, atol=1e-14)
    with pytest.raises(ValueError):
        langevin_step(src, x, 2, 0.0)


def test_modified_drift_conventions(rng):
    from conftest import random_instance

    for _ in range(50):
        gm, sch, x, k = random_instance(rng)
        drift = modified_langevin_drift(gm, sch, x, k)[0]
        gk = mx.time_weights(gm, sch, x)[k - 1]
        sk = mx.score(mx.perturbed_mixture(gm, sch.alpha_bar(k)), x)
        np.testing.assert_allclose(drift, mx.modified_score(gm, sch, x, k) + gk * sk, atol=1e-10)
    gm = mx.toy_mixture()
    one = linear_beta_schedule(1, 0.2, 0.2)
    x = np.array([[1.0, -4.0]])
    np.testing.assert_allclose(modified_langevin_drift(gm, one, x, 1), langevin_drift(AnalyticScore(gm, one), x, 1),
                               rtol=1e-15)
    z = np.ones_like(x)
    np.testing.assert_allclose(modified_langevin_step(gm, one, x, 1, 0.1, noise=z),
                               langevin_step(AnalyticScore(gm, one), x, 1, 0.1, noise=z), rtol=1e-15)


def escape_setup():
    gm = GaussianMixture([0.5, 0.5], [[-6.0], [6.0]], [1.0, 1.0])
    return gm, scaled_linear_schedule(100)


def test_escape_from_outside_is_immediate():
    gm, sch = escape_setup()
    init = np.full((20, 1), 6.0)
    res = estimate_escape_time("plain", gm, sch, 1, init, 0.01, 100, 20, seed=0)
    np.testing.assert_array_equal(res.exit_steps, 0)
    assert res.n_censored == 0


def test_escape_censoring_is_flagged():
    gm, sch = escape_setup()
    res = estimate_escape_time("plain", gm, sch, 1, np.zeros((10, 1)), 1e-6, 5, 10, seed=0)
    assert res.all_censored and np.isnan(res.mean)
    assert res.to_dict()["n_censored"] == 10
    with pytest.raises(ValueError):
        estimate_escape_time("other", gm, sch, 1, np.zeros((2, 1)), 0.01, 5, 2)


def test_escape_default_threshold():
    gm, sch = escape_setup()
    res = estimate_escape_time("plain", gm, sch, 1, np.full((2, 1), 6.0), 0.01, 5, 2)
    pk = mx.perturbed_mixture(gm, sch.alpha_bar(1))
    assert res.epsilon == pytest.approx(1e-3 * np.exp(mx.log_density(pk, pk.means).max()), rel=1e-12)


def test_escape_mean_stable_when_max_steps_doubles():
    gm, sch = escape_setup()

    def init(n, r):
        return r.uniform(-0.5, 0.5, size=(n, 1))

    a = estimate_escape_time("modified", gm, sch, 1, init, 0.01, 1000, 200, seed=2)
    b = estimate_escape_time("modified", gm, sch, 1, init, 0.01, 2000, 200, seed=2)
    assert a.n_censored == 0
    assert abs(a.mean - b.mean) <= 3 * np.std(a.exit_steps) / np.sqrt(200)
