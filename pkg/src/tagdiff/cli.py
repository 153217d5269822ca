"""Experiment runner: ``tagdiff {verify,toy,corrupted,multicond,escape,fewstep}``.

Each run resolves a config (defaults < config file < flags), executes a grid
of cells in a bounded worker pool, merges results by cell index and writes
``results.csv``, ``report.json`` and ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from scipy.stats import mannwhitneyu, spearmanr

from . import mixture as mx
from .guidance import ConditionSpec, joint_satisfaction, sample_multicond, temporal_alignment_term, tfg_gradient
from .metrics import append_ledger, mixture_nll, sliced_w1, time_gap
from .mixture import GaussianMixture
from .net import (
    Mlp,
    TrainingDivergedError,
    init_mlp,
    mlp_backward,
    mlp_forward,
    train_score_model,
    train_time_predictor,
)
from .sampler import (
    AnalyticScore,
    AnalyticTLS,
    LearnedScore,
    NumericalDivergenceError,
    OmegaConfig,
    PredictorTLS,
    estimate_escape_time,
    linear_drift,
    reverse_sample,
    tweedie_x0hat,
)
from .schedule import NoiseSchedule, linear_beta_schedule, scaled_linear_schedule

logger = logging.getLogger("tagdiff")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
EXPERIMENTS = ("verify", "toy", "corrupted", "multicond", "escape", "fewstep")


class ConfigError(ValueError):
    pass


COMMON = {
    "seed": 0,
    "workers": 1,
    "out": None,
    "plots": False,
    "T": 100,
    "separation": 10.0,
    "n_samples": 10000,
    "n_reference": 10000,
    "w1_cap": 100000,
}

DEFAULTS = {
    "verify": {
        "n_instances": 1000,
        "n_continuous": 100,
        "refinements": [25, 50, 100, 200],
        "continuous_beta": [0.1, 20.0],
        "debug_corrupt_gamma": False,
    },
    "toy": {
        "n_train": 40000,
        "drift_coef": -0.01,
        "omega": [0.0, 0.5, 1.0, 2.0, 3.0, 5.0],
        "tls": ["predictor", "analytic"],
        "score_model": {"hidden": [128, 128], "activation": "silu", "epochs": 4000, "batch_size": 2048,
                        "lr": 1e-3, "lr_decay": "cosine", "dtype": "float32"},
        "time_predictor": {"hidden": [64, 64, 64, 64], "activation": "silu", "epochs": 3000,
                           "batch_size": 2048, "lr": 1e-3, "lr_decay": "cosine", "dtype": "float32"},
        "checkpoints": {},
        "no_tag_min_w1": 4.0,
        "tag_max_w1": 2.8,
    },
    "corrupted": {
        "n_samples": 2000,
        "sigma": [0.2],
        "omega": [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
        "sampler": "ddpm",
    },
    "multicond": {
        "n_samples": 1000,
        "n_steps": 50,
        "rho": 0.05,
        "omega": [0.5, 1.0, 2.0],
        "variants": ["single_predictor", "uncond_predictor"],
        "conditions": [
            {"kind": "coordinate", "params": 0, "target": 10.0, "loss": "squared"},
            {"kind": "coordinate", "params": 1, "target": 10.0, "loss": "squared"},
        ],
        "tolerance": 1.0,
    },
    "escape": {
        "modes": [-6.0, 6.0],
        "mode_variance": 1.0,
        "k": 1,
        "init_interval": [-0.5, 0.5],
        "step_size": 0.01,
        "max_steps": 3000,
        "trials": 500,
        "alpha": 0.05,
    },
    "fewstep": {
        "n_samples": 4000,
        "steps": [1, 3, 5, 10, 50],
        "omega": [0.0, 0.25, 0.5, 1.0, 2.0],
        "check_steps_max": 5,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path, "rb") as fh:
        if path.endswith(".toml"):
            return tomllib.load(fh)
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc


def resolve_config(experiment: str, file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file's top level and its per-experiment table, then flag overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    base = {**COMMON, **DEFAULTS[experiment], "experiment": experiment}
    file_cfg = dict(file_cfg or {})
    section = file_cfg.pop(experiment, {})
    for other in EXPERIMENTS:
        file_cfg.pop(other, None)
    cfg = _merge(base, {k: v for k, v in file_cfg.items() if k != "experiment"})
    cfg = _merge(cfg, section)
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    if cfg["out"] is None:
        cfg["out"] = os.path.join("runs", experiment)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be at least 1")
    if int(cfg["T"]) < 1:
        raise ConfigError("T must be positive")
    for key in ("omega", "sigma", "steps", "refinements", "variants", "tls"):
        if key in cfg and not cfg[key]:
            raise ConfigError(f"grid {key!r} is empty")
    if any(w < 0 for w in cfg.get("omega", [])):
        raise ConfigError("omega values must be nonnegative")
    if any(s < 0 for s in cfg.get("sigma", [])):
        raise ConfigError("sigma values must be nonnegative")
    for name in cfg.get("checkpoints", {}).values():
        if not os.path.exists(name):
            raise ConfigError(f"checkpoint {name} does not exist")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("out", "workers", "plots")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunResult:
    rows: list
    report: dict
    checks: dict
    diverged: bool = False
    plots: dict = field(default_factory=dict)


def _map(fn, cells, workers: int):
    """Evaluate ``fn`` on every cell; output order follows the cell order."""
    if workers <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def _check(passed: bool, **detail) -> dict:
    return {"passed": bool(passed), **detail}


def _toy(cfg) -> GaussianMixture:
    return mx.toy_mixture(float(cfg["separation"]))


def _schedule(cfg) -> NoiseSchedule:
    return scaled_linear_schedule(int(cfg["T"]))


def _seeds(seed: int, n: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# -- verify -------------------------------------------------------------------

def _random_instance(rng):
    dim = int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    gm = GaussianMixture(rng.dirichlet(np.ones(k)), rng.normal(0.0, 3.0, (k, dim)), rng.uniform(0.3, 2.0, k))
    T = int(rng.integers(1, 31))
    lo = rng.uniform(1e-3, 0.05)
    sch = linear_beta_schedule(T, lo, min(0.5, lo + rng.uniform(0.0, 0.4)))
    return gm, sch, rng.normal(0.0, 4.0, dim), int(rng.integers(1, T + 1))


def _corrupted_decomposition(gm, sch, x, t):
    # negative control: the pairwise sum with time weights skewed toward step 1
    logp, scores = mx.marginal_stack(gm, sch.alpha_bars, np.atleast_2d(x))
    g = mx._gammas(logp)[:, 0]
    g[0] *= 1.01
    s = scores[:, 0]
    return sum((g[k] * (s[t - 1] - s[k]) for k in range(sch.T) if k != t - 1), np.zeros_like(x))


def _verify_identity(cfg):
    rng = np.random.default_rng(cfg["seed"])
    decompose = _corrupted_decomposition if cfg["debug_corrupt_gamma"] else mx.tls_decomposed
    max_abs = max_rel = max_mod = max_sum = 0.0
    for _ in range(cfg["n_instances"]):
        gm, sch, x, t = _random_instance(rng)
        a = mx.tls_analytic(gm, sch, x, t)
        b = decompose(gm, sch, x, t)
        diff = float(np.max(np.abs(a - b)))
        max_abs = max(max_abs, diff)
        g = mx.time_weights(gm, sch, x)
        logp, scores = mx.marginal_stack(gm, sch.alpha_bars, x[None])
        # relative to the size of the summands; the result itself can cancel to ~0
        scale = np.max(np.abs(scores[t - 1, 0])) + float(g @ np.max(np.abs(scores[:, 0]), axis=1))
        max_rel = max(max_rel, diff / scale if scale > 0 else 0.0)
        direct = scores[t - 1, 0] - np.einsum("k,kd->d", g, scores[:, 0])
        max_mod = max(max_mod, float(np.max(np.abs(mx.modified_score(gm, sch, x, t) - direct))))
        max_sum = max(max_sum, abs(float(g.sum()) - 1.0))
    return {
        "tls_decomposition": _check(max_abs < 1e-10 and max_rel < 1e-8, max_abs_error=max_abs,
                                    max_rel_error=max_rel, tol_abs=1e-10, tol_rel=1e-8),
        "modified_score": _check(max_mod < 1e-12 and max_sum < 1e-12, max_abs_error=max_mod,
                                 max_weight_sum_error=max_sum, tol=1e-12),
    }


def _verify_tls_gradient(cfg):
    rng = np.random.default_rng(cfg["seed"] + 1)
    worst = 0.0
    h = 1e-5
    for _ in range(50):
        gm, sch, x, t = _random_instance(rng)
        x = x / 2.0
        fd = np.array([
            (np.log(mx.time_posterior(gm, sch, x + h * e).probs[t - 1])
             - np.log(mx.time_posterior(gm, sch, x - h * e).probs[t - 1])) / (2 * h)
            for e in np.eye(gm.dim)
        ])
        a = mx.tls_analytic(gm, sch, x, t)
        worst = max(worst, float(np.max(np.abs(a - fd) / np.maximum(np.abs(fd), 1.0))))
    return {"tls_finite_difference": _check(worst < 1e-6, max_rel_error=worst, tol=1e-6)}


def _verify_continuous(cfg):
    rng = np.random.default_rng(cfg["seed"] + 2)
    b0, b1 = cfg["continuous_beta"]

    def beta(s):
        return b0 + (b1 - b0) * s

    ns = list(cfg["refinements"])
    monotone = True
    finals = []
    for _ in range(cfg["n_continuous"]):
        gm, _, x, _ = _random_instance(rng)
        t = float(rng.uniform(0.01, 1.0))
        errs = []
        for n in ns:
            j = int(np.ceil(t * n))
            ref = mx.tls_continuous(gm, beta, x, mx.grid_times(n)[j - 1], grid=4096)
            errs.append(float(np.linalg.norm(mx.tls_decomposed(gm, mx.continuous_grid_schedule(beta, n), x, j) - ref)))
        monotone &= all(a > b for a, b in zip(errs, errs[1:]))
        finals.append(errs[-1])
    worst = float(max(finals))
    return {"continuous_limit": _check(monotone and worst < 1e-3, monotone=bool(monotone),
                                       max_final_error=worst, tol=1e-3)}


def _verify_tweedie(cfg):
    rng = np.random.default_rng(cfg["seed"] + 3)
    worst = 0.0
    for _ in range(cfg["n_instances"]):
        gm, sch, x, t = _random_instance(rng)
        got = tweedie_x0hat(AnalyticScore(gm, sch), x[None], t, sch)[0]
        want = mx.posterior_mean_x0(gm, x, sch.alpha_bar(t))
        worst = max(worst, float(np.max(np.abs(got - want))))
    return {"tweedie": _check(worst < 1e-8, max_abs_error=worst, tol=1e-8)}


def _rel(a, b):
    # relative to the array's scale, so near-zero entries do not amplify difference noise
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-8))


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def _verify_gradients(cfg):
    rng = np.random.default_rng(cfg["seed"] + 4)
    worst_net = 0.0
    for activation in ("tanh", "silu"):
        for _ in range(3):
            dims = [int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 4))]
            mlp = init_mlp(dims, activation, rng)
            x = rng.normal(size=(3, dims[0]))
            gout = rng.normal(size=(3, dims[-1]))

            def loss():
                return float(np.sum(mlp_forward(mlp, x)[0] * gout))

            _, cache = mlp_forward(mlp, x)
            grads, dx = mlp_backward(mlp, cache, gout)
            for (gw, gb), w, b in zip(grads, mlp.weights, mlp.biases):
                worst_net = max(worst_net, _rel(gw, _fd(loss, w)), _rel(gb, _fd(loss, b)))
            worst_net = max(worst_net, _rel(dx, _fd(loss, x)))
    worst_guid = 0.0
    for _ in range(20):
        gm, sch, x, t = _random_instance(rng)
        src = AnalyticScore(gm, sch)
        cond = ConditionSpec("linear", rng.normal(size=gm.dim).tolist(), float(rng.normal()))
        xb = x[None] / 2.0

        def closs():
            return float(cond.loss_value(tweedie_x0hat(src, xb, t, sch))[0])

        worst_guid = max(worst_guid, _rel(tfg_gradient(src, cond, xb, t, sch), _fd(closs, xb)))
    return {
        "mlp_gradients": _check(worst_net < 1e-4, max_rel_error=worst_net, tol=1e-4),
        "guidance_gradients": _check(worst_guid < 1e-4, max_rel_error=worst_guid, tol=1e-4),
    }


def _verify_drift_bound(cfg):
    gm = _toy(cfg)
    sch = _schedule(cfg)
    v = linear_drift(-0.01)

    def v2(x, t):
        return 2.0 * v(x, t)

    zero = mx.drift_energy_bound(gm, sch, lambda x, t: np.zeros_like(x), n_mc=200, seed=cfg["seed"])
    b1 = mx.drift_energy_bound(gm, sch, v, n_mc=200, seed=cfg["seed"])
    b2 = mx.drift_energy_bound(gm, sch, v2, n_mc=200, seed=cfg["seed"])
    return {"drift_bound": _check(zero == 0.0 and b2 == 4.0 * b1, bound_zero=zero, bound_v=b1, bound_2v=b2)}


def run_verify(cfg) -> RunResult:
    suites = [_verify_identity, _verify_tls_gradient, _verify_continuous, _verify_tweedie,
              _verify_gradients, _verify_drift_bound]
    checks = {}
    for part in _map(lambda f: f(cfg), suites, int(cfg["workers"])):
        checks.update(part)
    rows = [{"check": k, "passed": v["passed"]} for k, v in checks.items()]
    return RunResult(rows, {"checks": checks}, {k: v["passed"] for k, v in checks.items()})


# -- toy ----------------------------------------------------------------------

def _dtype(name):
    return {"float32": np.float32, "float64": np.float64}[name]


def train_toy_models(cfg, out_dir=None):
    """Score model and time predictor for the two-mode toy, loaded from checkpoints when configured."""
    gm, sch = _toy(cfg), _schedule(cfg)
    data_seed, score_seed, tp_seed = _seeds(cfg["seed"], 3)
    data = gm.sample(int(cfg["n_train"]), data_seed)
    ck = cfg.get("checkpoints", {})
    sm_cfg, tp_cfg = cfg["score_model"], cfg["time_predictor"]
    if "score_model" in ck:
        with open(ck["score_model"]) as fh:
            score_mlp = Mlp.from_json(fh.read())
    else:
        score_mlp, _ = train_score_model(
            data, sch, tuple(sm_cfg["hidden"]), sm_cfg["activation"], sm_cfg["epochs"], sm_cfg["lr"],
            sm_cfg["batch_size"], score_seed, _dtype(sm_cfg["dtype"]), sm_cfg["lr_decay"])
    if "time_predictor" in ck:
        with open(ck["time_predictor"]) as fh:
            tp_mlp = Mlp.from_json(fh.read())
    else:
        tp_mlp, _, _ = train_time_predictor(
            data, sch, tuple(tp_cfg["hidden"]), tp_cfg["activation"], tp_cfg["epochs"], tp_cfg["lr"],
            tp_cfg["batch_size"], tp_seed, _dtype(tp_cfg["dtype"]), tp_cfg["lr_decay"])
    if out_dir is not None:
        for name, mlp in (("score_model", score_mlp), ("time_predictor", tp_mlp)):
            with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
                fh.write(mlp.to_json())
    return gm, sch, score_mlp, tp_mlp


def _w1(cfg, samples, ref):
    return sliced_w1(samples, ref, seed=cfg["seed"], cap=int(cfg["w1_cap"]))


def _noise_band(cfg, gm, n):
    a, b = _seeds(cfg["seed"] + 7, 2)
    return _w1(cfg, gm.sample(n, a), gm.sample(n, b))


def run_toy(cfg, out_dir=None, models=None) -> RunResult:
    """``models`` takes a ``train_toy_models`` result to skip training."""
    gm, sch, score_mlp, tp_mlp = models if models is not None else train_toy_models(cfg, out_dir)
    src = LearnedScore(score_mlp, sch)
    predictor = PredictorTLS(tp_mlp)
    sources = {"predictor": predictor, "analytic": AnalyticTLS(gm, sch)}
    ref = gm.sample(int(cfg["n_reference"]), _seeds(cfg["seed"], 4)[3])
    drift = linear_drift(float(cfg["drift_coef"]))
    n = int(cfg["n_samples"])
    cells = [("none", 0.0, None)] + [("drift", 0.0, None)]
    cells += [("drift", w, kind) for kind in cfg["tls"] for w in cfg["omega"] if w > 0]

    def run(cell):
        mode, w, kind = cell
        row = {"drift": mode == "drift", "tls": kind or "none", "omega": w}
        try:
            tr = reverse_sample(src, sch, n, cfg["seed"], tls_src=sources[kind] if kind else predictor,
                                omega=w if kind else 0.0, drift_fn=drift if mode == "drift" else None)
        except NumericalDivergenceError as exc:
            return {**row, "status": f"diverged: {exc}", "sliced_w1": float("nan"),
                    "time_gap": float("nan"), "nll": float("nan")}
        return {**row, "status": "ok", "sliced_w1": _w1(cfg, tr.samples, ref),
                "time_gap": time_gap(tr), "nll": mixture_nll(gm, tr.samples)}

    rows = _map(run, cells, int(cfg["workers"]))
    band = _noise_band(cfg, gm, min(n, int(cfg["n_reference"])))
    no_tag = next(r["sliced_w1"] for r in rows if r["drift"] and r["tls"] == "none")
    best = {k: min((r["sliced_w1"] for r in rows if r["tls"] == k and r["status"] == "ok"), default=float("nan"))
            for k in cfg["tls"]}
    tag_best = best.get("predictor", min(best.values()))
    checks = {
        "no_tag_w1_degraded": no_tag >= cfg["no_tag_min_w1"],
        "tag_w1_recovered": tag_best <= cfg["tag_max_w1"],
    }
    if "analytic" in best and "predictor" in best:
        checks["analytic_tls_not_worse"] = best["analytic"] <= best["predictor"] + band
    report = {"no_tag_w1": no_tag, "best_w1": best, "noise_band": band, "checks": checks}
    plots = {"sliced_w1": _series(rows, "tls", "omega", "sliced_w1", skip=("none",)),
             "time_gap": _series(rows, "tls", "omega", "time_gap", skip=("none",))}
    return RunResult(rows, report, checks, any(r["status"] != "ok" for r in rows), plots)


def _series(rows, group, xkey, ykey, skip=()):
    out = {}
    for r in rows:
        if r[group] in skip or r.get("status", "ok") != "ok":
            continue
        out.setdefault(str(r[group]), []).append((float(r[xkey]), float(r[ykey])))
    return {k: sorted(v) for k, v in out.items()}


# -- corrupted ----------------------------------------------------------------

def _presaturation(omegas, gaps):
    """Grid prefix up to and including the time-gap minimum."""
    stop = int(np.argmin(gaps)) + 1
    return omegas[:stop], gaps[:stop]


def run_corrupted(cfg, out_dir=None) -> RunResult:
    gm, sch = _toy(cfg), _schedule(cfg)
    src, tls = AnalyticScore(gm, sch), AnalyticTLS(gm, sch)
    ref = gm.sample(int(cfg["n_reference"]), _seeds(cfg["seed"], 4)[3])
    omegas = sorted(float(w) for w in cfg["omega"])
    cells = [(float(s), w) for s in cfg["sigma"] for w in omegas]

    def run(cell):
        sigma, w = cell
        row = {"sigma": sigma, "omega": w}
        try:
            tr = reverse_sample(src, sch, int(cfg["n_samples"]), cfg["seed"], sampler=cfg["sampler"],
                                tls_src=tls, omega=w, sigma=sigma)
        except NumericalDivergenceError as exc:
            return {**row, "status": f"diverged: {exc}", "time_gap": float("nan"),
                    "sliced_w1": float("nan"), "nll": float("nan")}
        return {**row, "status": "ok", "time_gap": time_gap(tr), "sliced_w1": _w1(cfg, tr.samples, ref),
                "nll": mixture_nll(gm, tr.samples)}

    rows = _map(run, cells, int(cfg["workers"]))
    checks, per_sigma = {}, {}
    for sigma in sorted({c[0] for c in cells}):
        sub = [r for r in rows if r["sigma"] == sigma and r["status"] == "ok"]
        om = [r["omega"] for r in sub]
        tg = [r["time_gap"] for r in sub]
        if not sub:
            per_sigma[str(sigma)] = {"diverged": True}
            checks[f"sigma={sigma}:best_gap_below_no_tag"] = False
            continue
        base = next((r["time_gap"] for r in sub if r["omega"] == 0.0), float("nan"))
        po, pg = _presaturation(om, tg)
        rho = float(spearmanr(po, pg)[0]) if len(po) >= 3 else float("nan")
        per_sigma[str(sigma)] = {"time_gap_no_tag": base, "time_gap_best": min(tg), "best_omega": om[int(np.argmin(tg))],
                                 "presaturation_omega": po, "spearman": rho}
        checks[f"sigma={sigma}:best_gap_below_no_tag"] = min(tg) < base
        checks[f"sigma={sigma}:spearman_negative"] = bool(rho < 0)
    report = {"per_sigma": per_sigma, "checks": checks}
    plots = {"time_gap": _series(rows, "sigma", "omega", "time_gap"),
             "sliced_w1": _series(rows, "sigma", "omega", "sliced_w1")}
    return RunResult(rows, report, checks, any(r["status"] != "ok" for r in rows), plots)


# -- multicond ----------------------------------------------------------------

def _alignment_agreement(gm, sch, conds, seed):
    """Both variants' time terms coincide when the second reparameterization stage is switched off."""
    src, tls = AnalyticScore(gm, sch), AnalyticTLS(gm, sch)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in np.unique(np.linspace(1, sch.T, 4).round().astype(int)):
        x = rng.normal(0.0, 3.0, (16, gm.dim))
        a, _ = temporal_alignment_term("single_predictor", tls, x, t, conds[0], conds[1], 0.1, 0.0, src, sch)
        b, _ = temporal_alignment_term("uncond_predictor", tls, x, t, conds[0], conds[1], 0.1, 0.0, src, sch)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def run_multicond(cfg, out_dir=None) -> RunResult:
    gm, sch = _toy(cfg), _schedule(cfg)
    src, tls = AnalyticScore(gm, sch), AnalyticTLS(gm, sch)
    conds = [ConditionSpec.from_dict(c) for c in cfg["conditions"]]
    if len(conds) != 2:
        raise ConfigError("multicond needs exactly two conditions")
    cells = [("naive", 0.0)] + [(v, float(w)) for v in cfg["variants"] for w in cfg["omega"] if w > 0]

    def run(cell):
        variant, w = cell
        row = {"variant": variant, "rho": float(cfg["rho"]), "omega": w}
        try:
            tr = sample_multicond("single_predictor" if variant == "naive" else variant, src, tls, conds[0], conds[1],
                                  sch, rho=float(cfg["rho"]), omega=w, n=int(cfg["n_samples"]), seed=cfg["seed"],
                                  n_steps=int(cfg["n_steps"]))
        except NumericalDivergenceError as exc:
            return {**row, "status": f"diverged: {exc}", "joint_satisfaction": float("nan")}
        s = tr.samples
        out = {**row, "status": "ok", "joint_satisfaction": joint_satisfaction(s, conds, float(cfg["tolerance"]))}
        for j, c in enumerate(conds):
            out[f"loss_c{j + 1}"] = float(np.mean(c.loss_value(s)))
        return out

    rows = _map(run, cells, int(cfg["workers"]))
    naive = rows[0]["joint_satisfaction"]
    best = max((r["joint_satisfaction"] for r in rows[1:] if r["status"] == "ok"), default=float("nan"))
    agree = _alignment_agreement(gm, sch, conds, cfg["seed"])
    checks = {"tag_beats_naive": best > naive, "variants_agree": agree < 1e-8}
    report = {"naive": naive, "best_tag": best, "alignment_max_diff": agree, "checks": checks}
    plots = {"joint_satisfaction": _series(rows[1:], "variant", "omega", "joint_satisfaction")}
    return RunResult(rows, report, checks, any(r["status"] != "ok" for r in rows), plots)


# -- escape -------------------------------------------------------------------

def escape_instance(cfg):
    modes = [[float(m)] for m in cfg["modes"]]
    gm = GaussianMixture(np.full(len(modes), 1.0 / len(modes)), modes, np.full(len(modes), float(cfg["mode_variance"])))
    return gm, _schedule(cfg)


def run_escape(cfg, out_dir=None) -> RunResult:
    gm, sch = escape_instance(cfg)
    lo, hi = cfg["init_interval"]

    def init(n, rng):
        return rng.uniform(lo, hi, size=(n, 1))

    def run(cell):
        kind, max_steps = cell
        return estimate_escape_time(kind, gm, sch, int(cfg["k"]), init, float(cfg["step_size"]), max_steps,
                                    int(cfg["trials"]), seed=cfg["seed"])

    m = int(cfg["max_steps"])
    cells = [("plain", m), ("modified", m), ("plain", 2 * m), ("modified", 2 * m)]
    results = _map(run, cells, int(cfg["workers"]))
    rows = [{"dynamics": k, "max_steps": ms, **r.to_dict()} for (k, ms), r in zip(cells, results)]
    plain, modified = results[0], results[1]
    if plain.all_censored or modified.all_censored:
        p = float("nan")
    else:
        p = float(mannwhitneyu(modified.exit_steps, plain.exit_steps, alternative="less").pvalue)
    stable = all(
        abs(results[i + 2].mean - results[i].mean)
        <= 3 * np.std(results[i].exit_steps) / np.sqrt(max(len(results[i].exit_steps), 1)) + 1e-12
        for i in (0, 1)
    )
    checks = {
        "modified_escapes_faster": modified.mean < plain.mean,
        "mann_whitney_significant": bool(p < float(cfg["alpha"])),
        "max_steps_stable": bool(stable),
    }
    report = {"plain": plain.to_dict(), "modified": modified.to_dict(), "p_value": p, "checks": checks,
              "instance": {"mixture": gm.to_dict(), "T": sch.T, "k": cfg["k"]}}
    hist = {k: [(float(s), float(c)) for s, c in zip(*np.unique(r.exit_steps, return_counts=True))]
            for k, r in (("plain", plain), ("modified", modified))}
    return RunResult(rows, report, checks, False, {"exit_step_counts": hist})


# -- fewstep ------------------------------------------------------------------

def run_fewstep(cfg, out_dir=None) -> RunResult:
    gm, sch = _toy(cfg), _schedule(cfg)
    src, tls = AnalyticScore(gm, sch), AnalyticTLS(gm, sch)
    ref = gm.sample(int(cfg["n_reference"]), _seeds(cfg["seed"], 4)[3])
    cells = [(int(s), float(w)) for s in cfg["steps"] for w in sorted(cfg["omega"])]

    def run(cell):
        steps, w = cell
        row = {"steps": steps, "omega": w}
        try:
            tr = reverse_sample(src, sch, int(cfg["n_samples"]), cfg["seed"], sampler="ddim", tls_src=tls,
                                omega=w, n_steps=steps, record_times=False)
        except NumericalDivergenceError as exc:
            return {**row, "status": f"diverged: {exc}", "sliced_w1": float("nan"), "nll": float("nan")}
        return {**row, "status": "ok", "sliced_w1": _w1(cfg, tr.samples, ref), "nll": mixture_nll(gm, tr.samples)}

    rows = _map(run, cells, int(cfg["workers"]))
    checks, summary = {}, {}
    for steps in sorted({c[0] for c in cells}):
        sub = [r for r in rows if r["steps"] == steps and r["status"] == "ok"]
        base = next((r["sliced_w1"] for r in sub if r["omega"] == 0.0), float("nan"))
        tagged = [r for r in sub if r["omega"] > 0]
        best = min(tagged, key=lambda r: r["sliced_w1"]) if tagged else None
        summary[str(steps)] = {"no_tag": base, "best_tag": best["sliced_w1"] if best else float("nan"),
                               "best_omega": best["omega"] if best else None}
        if steps <= int(cfg["check_steps_max"]):
            checks[f"steps={steps}:tag_improves_w1"] = bool(best is not None and best["sliced_w1"] < base)
    report = {"per_steps": summary, "checks": checks}
    plots = {"sliced_w1": _series(rows, "steps", "omega", "sliced_w1")}
    return RunResult(rows, report, checks, any(r["status"] != "ok" for r in rows), plots)


RUNNERS = {
    "verify": run_verify,
    "toy": run_toy,
    "corrupted": run_corrupted,
    "multicond": run_multicond,
    "escape": run_escape,
    "fewstep": run_fewstep,
}


# -- output -------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plots(out_dir, plots):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for metric, series in plots.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, pts in series.items():
            xs, ys = zip(*pts) if pts else ((), ())
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"{metric}.svg"), format="svg", metadata={"Date": None})
        plt.close(fig)


def execute(cfg: dict, argv=None) -> tuple[int, RunResult]:
    """Run one experiment and persist its artifacts; returns ``(exit_code, result)``."""
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    experiment = cfg["experiment"]
    h = config_hash(cfg)
    try:
        if experiment == "verify":
            result = run_verify(cfg)
        else:
            result = RUNNERS[experiment](cfg, out)
    except (TrainingDivergedError, NumericalDivergenceError) as exc:
        logger.error("numerical divergence: %s", exc)
        _dump(os.path.join(out, "report.json"), {"experiment": experiment, "config_hash": h, "error": str(exc)})
        return EXIT_DIVERGED, None

    report = {"experiment": experiment, "config_hash": h, "seed": cfg["seed"], **result.report}
    if experiment == "verify":
        # verify leaves nothing behind but its report, which carries the resolved config
        report["config"] = cfg
    else:
        path = os.path.join(out, "results.csv")
        if os.path.exists(path):
            os.remove(path)
        for i, row in enumerate(result.rows):
            append_ledger(path, {"cell": i, "config_hash": h, "seed": cfg["seed"], **_jsonable(row)})
        _dump(os.path.join(out, "manifest.json"), {
            "experiment": experiment,
            "config": cfg,
            "config_hash": h,
            "seed": cfg["seed"],
            "code_version": code_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "argv": list(argv or []),
        })
        if cfg["plots"] and result.plots:
            write_plots(out, result.plots)
    _dump(os.path.join(out, "report.json"), report)
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {experiment}:{name}")
    if result.diverged:
        return EXIT_DIVERGED, result
    return (EXIT_OK if all(result.checks.values()) else EXIT_CHECK), result


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        p.add_argument("--omega", type=_float_list, help="comma-separated guidance strengths")
        p.add_argument("--sigma", type=_float_list, help="comma-separated corruption levels")
        p.add_argument("--plots", action="store_true", default=None, help="write SVG line plots")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            p.add_argument("--debug-corrupt-gamma", action="store_true", default=None,
                           help="skew the time weights (negative control)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "out": args.out, "workers": args.workers, "plots": args.plots}
    if args.omega is not None:
        overrides["omega"] = args.omega
    if args.sigma is not None:
        overrides["sigma"] = args.sigma
    if getattr(args, "debug_corrupt_gamma", None):
        overrides["debug_corrupt_gamma"] = True
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.experiment, file_cfg, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, _ = execute(cfg, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return code


if __name__ == "__main__":
    sys.exit(main())
