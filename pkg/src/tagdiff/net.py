"""Dense networks with hand-written backprop and Adam.

Two models are trained here: an epsilon-prediction score network and a
timestep classifier whose input gradient estimates the time-linked score.
Both are exposed as scikit-learn estimators on top of the functional core.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .schedule import NoiseSchedule, eps_to_score

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "silu", "identity")
N_FREQS = 4
TIME_EMBED_WIDTH = 1 + 2 * N_FREQS


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z * expit(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "silu":
        sig = expit(z)
        return sig * (1.0 + z * (1.0 - sig))
    return np.ones_like(z)


@dataclass
class Mlp:
    """Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``."""

    layer_dims: list
    weights: list
    biases: list
    activation: str = "tanh"
    version: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}")

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def params(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        dims = [int(k) for k in d["layer_dims"]]
        weights = [np.array(w, dtype=float).reshape(dims[i + 1], dims[i]) for i, w in enumerate(d["weights"])]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(dims, weights, biases, d.get("activation", "tanh"))

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        return cls.from_dict(json.loads(text))


def cast_mlp(mlp: Mlp, dtype) -> Mlp:
    return Mlp(list(mlp.layer_dims), [w.astype(dtype) for w in mlp.weights],
               [b.astype(dtype) for b in mlp.biases], mlp.activation)


def init_mlp(layer_dims, activation: str = "tanh", rng=None) -> Mlp:
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(list(layer_dims), weights, biases, activation)


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    post: list
    version: int


def mlp_forward(mlp: Mlp, x):
    """Forward pass on a batch ``(n, n_in)``; returns ``(output, cache)``."""
    x = np.asarray(x, dtype=mlp.weights[0].dtype)
    if x.ndim != 2 or x.shape[1] != mlp.n_in:
        raise ValueError(f"expected input of shape (n, {mlp.n_in}), got {x.shape}")
    inputs, pre, post = [], [], []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w.T + b
        a = z if i == last else _act(mlp.activation, z)
        pre.append(z)
        post.append(a)
        h = a
    return h, ForwardCache(inputs, pre, post, mlp.version)


def mlp_backward(mlp: Mlp, cache: ForwardCache, output_grad):
    """Reverse-mode pass. Returns ``([(dW, db), ...], d_input)``."""
    if cache.version != mlp.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.asarray(output_grad, dtype=mlp.weights[0].dtype)
    grads = [None] * len(mlp.weights)
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * _act_grad(mlp.activation, cache.pre[i], cache.post[i])
        grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ mlp.weights[i]
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(mlp: Mlp, grads, state: AdamState) -> None:
    flat = [g for pair in grads for g in pair]
    params = list(mlp.params())
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    mlp.version += 1


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy against integer ``labels`` and its gradient at the logits."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def time_embedding(t, T: int):
    """``[t/T, sin(2^k pi t/T), cos(2^k pi t/T)]`` for ``k < 4``, one row per entry of ``t``."""
    u = np.asarray(t, dtype=float).reshape(-1, 1) / T
    freqs = np.pi * 2.0 ** np.arange(N_FREQS)
    return np.concatenate([u, np.sin(u * freqs), np.cos(u * freqs)], axis=1)


def _score_inputs(x, t, T):
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    return np.concatenate([x, time_embedding(t, T)], axis=1)


def _noisy_batch(data, schedule, rng, n):
    idx = rng.integers(0, data.shape[0], size=n) if n < data.shape[0] else np.arange(data.shape[0])
    x0 = data[idx]
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    abar = schedule.alpha_bars[t - 1][:, None]
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps, t, eps


def _lr_at(lr, decay, epoch, epochs):
    if decay is None:
        return lr
    if decay == "cosine":
        return lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs)))
    raise ValueError(f"unknown lr decay {decay!r}")


def _check_finite(loss, epoch, what):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{what} loss became non-finite at epoch {epoch}")


def train_score_model(data, schedule: NoiseSchedule, hidden=(128, 128), activation="tanh",
                      epochs=5000, lr=1e-3, batch_size=None, seed=0, dtype=np.float64,
                      lr_decay=None):
    """Fit an epsilon-prediction network by denoising score matching.

    Returns ``(mlp, loss_history)``.  ``batch_size=None`` trains full-batch.
    Arithmetic runs in ``dtype``; the returned parameters are float64.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("data must be a nonempty (n, d) array")
    rng = np.random.default_rng(seed)
    d = data.shape[1]
    mlp = cast_mlp(init_mlp([d + TIME_EMBED_WIDTH, *hidden, d], activation, rng), dtype)
    opt = AdamState(lr=lr)
    n = data.shape[0] if batch_size is None else min(batch_size, data.shape[0])
    history = []
    for epoch in range(epochs):
        opt.lr = _lr_at(lr, lr_decay, epoch, epochs)
        xt, t, eps = _noisy_batch(data, schedule, rng, n)
        out, cache = mlp_forward(mlp, _score_inputs(xt, t, schedule.T))
        resid = out - eps
        loss = float(np.mean(resid * resid))
        _check_finite(loss, epoch, "score-matching")
        grads, _ = mlp_backward(mlp, cache, 2.0 * resid / resid.size)
        adam_update(mlp, grads, opt)
        history.append(loss)
    return cast_mlp(mlp, np.float64), np.array(history)


def predict_eps(mlp: Mlp, x, t, T: int):
    out, _ = mlp_forward(mlp, _score_inputs(np.atleast_2d(x), t, T))
    return out


def learned_score(mlp: Mlp, x, t: int, schedule: NoiseSchedule):
    return eps_to_score(predict_eps(mlp, x, t, schedule.T), schedule.alpha_bar(t))


def train_time_predictor(data, schedule: NoiseSchedule, hidden=(128, 128, 128, 128), activation="tanh",
                         epochs=5000, lr=1e-3, batch_size=None, seed=0, dtype=np.float64,
                         lr_decay=None):
    """Fit a ``T``-way timestep classifier on forward-noised data.

    Returns ``(mlp, loss_history, per_step_accuracy)`` where the accuracy is
    measured on a fresh forward sample after training.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("data must be a nonempty (n, d) array")
    rng = np.random.default_rng(seed)
    mlp = cast_mlp(init_mlp([data.shape[1], *hidden, schedule.T], activation, rng), dtype)
    opt = AdamState(lr=lr)
    n = data.shape[0] if batch_size is None else min(batch_size, data.shape[0])
    history = []
    for epoch in range(epochs):
        opt.lr = _lr_at(lr, lr_decay, epoch, epochs)
        xt, t, _ = _noisy_batch(data, schedule, rng, n)
        logits, cache = mlp_forward(mlp, xt)
        loss, dlogits = softmax_cross_entropy(logits, t - 1)
        _check_finite(loss, epoch, "time-classification")
        grads, _ = mlp_backward(mlp, cache, dlogits)
        adam_update(mlp, grads, opt)
        history.append(loss)
    mlp = cast_mlp(mlp, np.float64)
    return mlp, np.array(history), per_step_accuracy(mlp, data, schedule, rng)


def per_step_accuracy(mlp: Mlp, data, schedule: NoiseSchedule, rng=None, n_per_step=256):
    rng = np.random.default_rng(rng)
    acc = np.empty(schedule.T)
    for t in range(1, schedule.T + 1):
        x0 = data[rng.integers(0, data.shape[0], size=n_per_step)]
        a = schedule.alpha_bar(t)
        xt = np.sqrt(a) * x0 + np.sqrt(1 - a) * rng.standard_normal(x0.shape)
        acc[t - 1] = np.mean(predict_time(mlp, xt) == t)
    return acc


def predict_time(mlp: Mlp, x):
    """Argmax class as a 1-based step; ties go to the smaller step."""
    logits, _ = mlp_forward(mlp, np.atleast_2d(x))
    return np.argmax(logits, axis=1) + 1


def predictor_tls(mlp: Mlp, x, t: int):
    """``grad_x log softmax(logits)[t]`` by backprop to the input."""
    if not (1 <= t <= mlp.n_out):
        raise IndexError(f"step {t} outside [1, {mlp.n_out}]")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    logits, cache = mlp_forward(mlp, np.atleast_2d(x))
    g = -np.exp(log_softmax(logits))
    g[:, t - 1] += 1.0
    _, dx = mlp_backward(mlp, cache, g)
    return dx[0] if single else dx


class DenoisingScoreModel(BaseEstimator):
    """Learned score ``s(x, t)`` for a fixed noise schedule.

    ``fit(X)`` takes clean samples; noise levels and targets are drawn
    internally.
    """

    def __init__(self, schedule=None, hidden_layer_sizes=(128, 128), activation="tanh",
                 n_epochs=5000, learning_rate=1e-3, batch_size=None, lr_decay=None,
                 dtype="float64", random_state=0):
        self.schedule = schedule
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        if self.schedule is None:
            raise ValueError("a NoiseSchedule is required")
        self.mlp_, self.loss_curve_ = train_score_model(
            X, self.schedule, tuple(self.hidden_layer_sizes), self.activation,
            self.n_epochs, self.learning_rate, self.batch_size, self.random_state,
            np.dtype(self.dtype), self.lr_decay)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_eps(self, X, t):
        check_is_fitted(self, "mlp_")
        return predict_eps(self.mlp_, check_array(X), t, self.schedule.T)

    def score_at(self, X, t: int):
        check_is_fitted(self, "mlp_")
        return learned_score(self.mlp_, check_array(X), t, self.schedule)


class TimePredictor(ClassifierMixin, BaseEstimator):
    """Classifier of the diffusion step that produced a noisy point.

    ``fit(X)`` takes clean samples; ``classes_`` are the steps ``1..T``.
    """

    def __init__(self, schedule=None, hidden_layer_sizes=(128, 128, 128, 128), activation="tanh",
                 n_epochs=5000, learning_rate=1e-3, batch_size=None, lr_decay=None,
                 dtype="float64", random_state=0):
        self.schedule = schedule
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        if self.schedule is None:
            raise ValueError("a NoiseSchedule is required")
        self.mlp_, self.loss_curve_, self.per_step_accuracy_ = train_time_predictor(
            X, self.schedule, tuple(self.hidden_layer_sizes), self.activation,
            self.n_epochs, self.learning_rate, self.batch_size, self.random_state,
            np.dtype(self.dtype), self.lr_decay)
        self.classes_ = np.arange(1, self.schedule.T + 1)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_log_proba(self, X):
        check_is_fitted(self, "mlp_")
        logits, _ = mlp_forward(self.mlp_, check_array(X))
        return log_softmax(logits)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        check_is_fitted(self, "mlp_")
        return predict_time(self.mlp_, check_array(X))

    def tls(self, X, t: int):
        check_is_fitted(self, "mlp_")
        return predictor_tls(self.mlp_, check_array(X), t)
