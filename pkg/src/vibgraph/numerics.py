"""Shared numerical kernels.

Initialization, activations, losses, regularization, dropout, the Adam
optimizer, early stopping, and finite-difference gradient checking.  All
model parameters in this package are flat ``dict[str, np.ndarray]``
collections so the optimizer and the gradient checker stay generic.

Randomness policy: every public entry point takes a ``seed`` that may be an
integer or a ``numpy.random.Generator``.  Code that needs several
independent streams derives them with :func:`seed_streams`, which spawns
children of one ``SeedSequence`` in a fixed, documented order (0 = parameter
init, 1 = batch shuffling, 2 = dropout).  Parallel callers therefore draw
from disjoint substreams and results depend only on (seed, call sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DivergenceError

Params = dict[str, np.ndarray]

#: Minimum decrease of the best loss that counts as an improvement for
#: early stopping.
IMPROVEMENT_TOL = 1e-12


def as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    """Return ``seed`` itself if it is already a Generator, else seed one."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seed_streams(seed: int, n: int = 3) -> list[np.random.Generator]:
    """Spawn ``n`` independent generators from one seed.

    Stream 0 is reserved for parameter initialization, stream 1 for batch
    shuffling, stream 2 for dropout; further streams are caller-defined.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(c) for c in children]


def glorot_init(rows: int, cols: int, seed: int | np.random.Generator) -> np.ndarray:
    """Uniform init on [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return as_rng(seed).uniform(-bound, bound, size=(rows, cols))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise log(1 / (1 + exp(-x))) without overflow.

    Uses the identity log_sigmoid(x) = min(0, x) - log1p(exp(-|x|)), which
    is exact for all finite inputs.
    """
    x = np.asarray(x, dtype=float)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax."""
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(scores: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross entropy of one score vector against a class index.

    Returns ``(loss, grad)`` where ``grad = softmax(scores) - onehot(target)``.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1:
        raise ValueError(f"scores must be a vector, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not 0 <= target < scores.shape[0]:
        raise ValueError(f"target {target} out of range for {scores.shape[0]} classes")
    shifted = scores - scores.max()
    log_z = math.log(np.exp(shifted).sum()) + scores.max()
    loss = log_z - scores[target]
    grad = softmax(scores)
    grad[target] -= 1.0
    return float(loss), grad


def cross_entropy_batch(scores: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy over rows of ``scores``; grad already divided by B."""
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=int)
    b = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + scores.max(axis=1)
    loss = float(np.mean(log_z - scores[np.arange(b), targets]))
    grad = softmax(scores, axis=1)
    grad[np.arange(b), targets] -= 1.0
    return loss, grad / b


@dataclass
class AdamState:
    """First/second moment accumulators for a flat parameter dict."""

    m: Params
    v: Params
    t: int
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("timestep must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def init(cls, params: Params, lr: float = 0.001, beta1: float = 0.9,
             beta2: float = 0.999, eps_adam: float = 1e-8) -> "AdamState":
        zeros = {k: np.zeros_like(w) for k, w in params.items()}
        return cls(m=zeros, v={k: np.zeros_like(w) for k, w in params.items()},
                   t=0, lr=lr, beta1=beta1, beta2=beta2, eps_adam=eps_adam)


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for key, w in params.items():
        if key not in grads:
            raise ValueError(f"missing gradient for parameter {key!r}")
        if grads[key].shape != w.shape:
            raise ValueError(
                f"gradient shape {grads[key].shape} does not match parameter "
                f"{key!r} of shape {w.shape}")
    t = state.t + 1
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for key, w in params.items():
        g = grads[key]
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[key] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
        new_m[key] = m
        new_v[key] = v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


def dropout_mask(shape: tuple[int, ...], p: float, seed: int | np.random.Generator,
                 training: bool = True) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, else 1/(1-p).

    At inference (``training=False``) the mask is all ones, so no rescaling
    is needed downstream.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return np.ones(shape)
    keep = as_rng(seed).random(shape) >= p
    return keep.astype(float) / (1.0 - p)


def l2_penalty(params: Params | np.ndarray, lam: float) -> tuple[float, Params | np.ndarray]:
    """Quadratic penalty (lam/2) * sum(w**2) with gradient lam * w."""
    if lam < 0:
        raise ValueError("l2 coefficient must be nonnegative")
    if isinstance(params, np.ndarray):
        return float(0.5 * lam * np.sum(params ** 2)), lam * params
    loss = 0.0
    grads: Params = {}
    for key, w in params.items():
        loss += 0.5 * lam * float(np.sum(w ** 2))
        grads[key] = lam * w
    return loss, grads


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True when the best loss has not improved in the last ``patience`` epochs.

    Improvement means a decrease of more than ``IMPROVEMENT_TOL`` below the
    best loss seen before the window.  Never fires before ``patience + 1``
    epochs of history exist.
    """
    if patience < 1:
        raise ValueError("patience must be at least 1")
    if len(history) < patience + 1:
        return False
    best_before = min(history[:-patience])
    best_recent = min(history[-patience:])
    return best_recent >= best_before - IMPROVEMENT_TOL


def grad_check(f: Callable[[Params], float], params: Params,
               analytic: Params, h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Compare ``analytic`` to central finite differences of ``f``.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).  Returns
    the overall maximum and the per-tensor maxima.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    per_tensor: dict[str, float] = {}
    for key in sorted(params):
        w = params[key]
        a = analytic[key]
        if a.shape != w.shape:
            raise ValueError(f"analytic gradient shape mismatch for {key!r}")
        worst = 0.0
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(params)
            flat[i] = orig - h
            f_minus = f(params)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise DivergenceError(
                    f"non-finite loss while checking {key!r} coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_tensor[key] = worst
    return max(per_tensor.values(), default=0.0), per_tensor


@dataclass
class TrainingConfig:
    """Hyperparameters shared by all trainable models."""

    hidden_size: int = 16
    lr: float = 0.001
    dropout_p: float = 0.2
    l2_lambda: float = 0.05
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be at least 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be nonnegative")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def as_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "lr": self.lr,
            "dropout_p": self.dropout_p,
            "l2_lambda": self.l2_lambda,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
        }


@dataclass
class EpochLog:
    """One row of a training log (losses exclude the L2 penalty)."""

    epoch: int
    train_loss: float
    dev_loss: float


BatchFn = Callable[[Params, np.ndarray, np.random.Generator], tuple[float, Params]]


def run_adam_training(params: Params, n_examples: int, batch_fn: BatchFn, *,
                      config: TrainingConfig, batch_size: int = 32,
                      dev_loss_fn: Callable[[Params], float] | None = None,
                      ) -> tuple[Params, list[EpochLog]]:
    """Minibatch Adam loop with early stopping on the dev loss.

    ``batch_fn(params, indices, dropout_rng)`` returns the mean data loss of
    the batch and the total gradient (including any regularization term the
    caller folds in).  When no dev function is given, the epoch's train loss
    stands in for the dev loss.  Returns the parameters at the best dev loss
    together with the per-epoch log.
    """
    if n_examples < 1:
        raise ValueError("training set must be non-empty")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    _, shuffle_rng, dropout_rng = seed_streams(config.seed)
    state = AdamState.init(params, lr=config.lr)
    log: list[EpochLog] = []
    best_params = {k: w.copy() for k, w in params.items()}
    best_dev = math.inf
    dev_history: list[float] = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n_examples)
        total = 0.0
        for start in range(0, n_examples, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = batch_fn(params, idx, dropout_rng)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}", iteration=epoch)
            total += loss * len(idx)
            params, state = adam_step(state, params, grads)
        train_loss = total / n_examples
        dev = dev_loss_fn(params) if dev_loss_fn is not None else train_loss
        if not math.isfinite(dev):
            raise DivergenceError(f"non-finite dev loss at epoch {epoch}",
                                  iteration=epoch)
        log.append(EpochLog(epoch=epoch, train_loss=train_loss, dev_loss=dev))
        dev_history.append(dev)
        if dev < best_dev - IMPROVEMENT_TOL:
            best_dev = dev
            best_params = {k: w.copy() for k, w in params.items()}
        if early_stop(dev_history, config.patience):
            break
    if not log:
        return params, log
    return best_params, log
