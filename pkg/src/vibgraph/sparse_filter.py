"""Sparse feature learning for raw vibration segments.

Features are a soft-absolute linear map of the input, normalized twice with
the L2 norm (per feature across examples, then per example across features)
and trained by minimizing the summed L1 norm of the normalized columns.
Because every normalized column lies on the unit ball, minimizing its L1
norm concentrates activation in few features per example while the row
normalization keeps all features equally active overall.

The matrix conventions follow the math: inputs ``X`` are N x D with one
example per column, weights ``W`` are N x p, features are p x D.  The
:class:`SparseFiltering` estimator at the bottom adapts this to the
scikit-learn orientation (one sample per row).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DivergenceError, FormatError
from .numerics import AdamState, adam_step, glorot_init
from .signals import SegmentSet

DEFAULT_EPSILON = 1e-8
DEFAULT_FEATURES = 100
#: Relative objective improvement below which training stops.
CONVERGENCE_TOL = 1e-8


class Stage(Enum):
    RAW = "raw"
    ROW_NORMALIZED = "row-normalized"
    FULLY_NORMALIZED = "fully-normalized"


@dataclass(frozen=True)
class SparseFilterModel:
    """Learned weight matrix of shape (input dim N, feature count p)."""

    W: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2:
            raise ValueError("W must be a matrix")
        if not np.all(np.isfinite(W)):
            raise ValueError("W must be finite")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "W", W)

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class FeatureMatrix:
    """Feature values of shape (p, D) tagged with their normalization stage."""

    values: np.ndarray
    stage: Stage

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("feature matrix must be two-dimensional")
        object.__setattr__(self, "values", values)


def _check_input(model: SparseFilterModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a matrix with one example per column")
    if X.shape[0] != model.input_dim:
        raise ValueError(
            f"X has {X.shape[0]} rows but the model expects {model.input_dim}")
    return X


def forward(model: SparseFilterModel, X: np.ndarray) -> FeatureMatrix:
    """Soft-absolute activations sqrt((W^T x)^2 + epsilon), shape (p, D)."""
    X = _check_input(model, X)
    linear = model.W.T @ X
    return FeatureMatrix(np.sqrt(linear ** 2 + model.epsilon), Stage.RAW)


def normalize_rows(features: FeatureMatrix) -> FeatureMatrix:
    """Divide each feature row by its L2 norm across examples."""
    if features.stage is not Stage.RAW:
        raise ValueError(f"expected raw features, got stage {features.stage.value}")
    norms = np.linalg.norm(features.values, axis=1, keepdims=True)
    return FeatureMatrix(features.values / norms, Stage.ROW_NORMALIZED)


def normalize_cols(features: FeatureMatrix) -> FeatureMatrix:
    """Divide each example column by its L2 norm across features."""
    if features.stage is not Stage.ROW_NORMALIZED:
        raise ValueError(
            f"expected row-normalized features, got stage {features.stage.value}")
    norms = np.linalg.norm(features.values, axis=0, keepdims=True)
    return FeatureMatrix(features.values / norms, Stage.FULLY_NORMALIZED)


def normalized_features(model: SparseFilterModel, X: np.ndarray) -> FeatureMatrix:
    """Full pipeline: forward, row normalization, column normalization."""
    return normalize_cols(normalize_rows(forward(model, X)))


def objective(model: SparseFilterModel, X: np.ndarray) -> float:
    """Sum of all fully-normalized entries (their L1 norm; all positive)."""
    return float(normalized_features(model, X).values.sum())


def _norm_backprop(normalized: np.ndarray, norms: np.ndarray, grad: np.ndarray,
                   axis: int) -> np.ndarray:
    """Gradient through y = x / ||x|| applied along ``axis``."""
    inner = np.sum(grad * normalized, axis=axis, keepdims=True)
    return (grad - normalized * inner) / norms


def objective_and_grad(model: SparseFilterModel, X: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and its analytic gradient with respect to W."""
    X = _check_input(model, X)
    linear = model.W.T @ X
    soft = np.sqrt(linear ** 2 + model.epsilon)
    row_norms = np.linalg.norm(soft, axis=1, keepdims=True)
    rows = soft / row_norms
    col_norms = np.linalg.norm(rows, axis=0, keepdims=True)
    full = rows / col_norms
    value = float(full.sum())

    grad = np.ones_like(full)
    grad = _norm_backprop(full, col_norms, grad, axis=0)
    grad = _norm_backprop(rows, row_norms, grad, axis=1)
    grad_linear = grad * (linear / soft)
    return value, X @ grad_linear.T


def objective_grad(model: SparseFilterModel, X: np.ndarray) -> np.ndarray:
    return objective_and_grad(model, X)[1]


def train_sparse_filter(X: np.ndarray, p: int, max_iters: int = 200, seed: int = 0,
                        lr: float = 0.001, epsilon: float = DEFAULT_EPSILON,
                        ) -> SparseFilterModel:
    """Learn W by Adam from a Glorot start.

    Runs ``max_iters`` steps or stops once the relative objective
    improvement falls below ``CONVERGENCE_TOL``; returns the weights at the
    best recorded objective, so the result never scores worse than the
    initialization.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a matrix with one example per column")
    if X.shape[1] < 2:
        raise ValueError("training needs at least two examples")
    if p < 1:
        raise ValueError("feature count p must be at least 1")
    if max_iters < 0:
        raise ValueError("max_iters must be nonnegative")
    W = glorot_init(X.shape[0], p, seed)
    model = SparseFilterModel(W=W, epsilon=epsilon)
    if max_iters == 0:
        return model
    params = {"W": W}
    state = AdamState.init(params, lr=lr)
    best_value, _ = objective_and_grad(model, X)
    best_W = W.copy()
    prev = best_value
    for iteration in range(1, max_iters + 1):
        value, grad = objective_and_grad(SparseFilterModel(params["W"], epsilon), X)
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite objective at iteration {iteration}", iteration=iteration)
        if value < best_value:
            best_value = value
            best_W = params["W"].copy()
        if iteration > 1 and abs(prev - value) / max(abs(prev), 1.0) < CONVERGENCE_TOL:
            break
        prev = value
        params, state = adam_step(state, params, {"W": grad})
    final_value, _ = objective_and_grad(SparseFilterModel(params["W"], epsilon), X)
    if final_value < best_value:
        best_W = params["W"]
    return SparseFilterModel(W=best_W, epsilon=epsilon)


def extract_features(model: SparseFilterModel, segment_set: SegmentSet,
                     ) -> dict[str, np.ndarray]:
    """Per-sensor feature rows for every segment of the set.

    Feature vectors are the fully-normalized columns computed jointly over
    the whole set, so normalization statistics are shared.  Returns a map
    from sensor id to an (n_segments_of_sensor, p) array ordered as the
    segments appear in the set.
    """
    if len(segment_set) == 0:
        raise ValueError("cannot extract features from an empty segment set")
    if segment_set.segment_length != model.input_dim:
        raise ValueError(
            f"segments have length {segment_set.segment_length} but the model "
            f"expects {model.input_dim}")
    X = np.stack([s.samples for s in segment_set.segments], axis=1)
    full = normalized_features(model, X).values
    out: dict[str, list[np.ndarray]] = {}
    for column, segment in enumerate(segment_set.segments):
        out.setdefault(segment.sensor_id, []).append(full[:, column])
    return {sensor: np.stack(rows) for sensor, rows in out.items()}


def save_sparse_filter(model: SparseFilterModel, path: str | Path,
                       seed: int | None = None) -> None:
    """Text header (N, p, epsilon, seed) then the row-major float64 matrix."""
    path = Path(path)
    header = (f"sparse-filter v1 N={model.input_dim} p={model.p} "
              f"epsilon={model.epsilon!r} seed={seed if seed is not None else -1}\n")
    path.write_bytes(header.encode("ascii") + model.W.astype("<f8").tobytes())


def load_sparse_filter(path: str | Path) -> SparseFilterModel:
    path = Path(path)
    blob = path.read_bytes()
    newline = blob.index(b"\n")
    header = blob[:newline].decode("ascii")
    match = re.fullmatch(
        r"sparse-filter v1 N=(\d+) p=(\d+) epsilon=(\S+) seed=(-?\d+)", header)
    if not match:
        raise FormatError(f"{path}: unrecognized sparse filter header {header!r}")
    n, p = int(match.group(1)), int(match.group(2))
    epsilon = float(match.group(3))
    W = np.frombuffer(blob[newline + 1:], dtype="<f8")
    if W.shape[0] != n * p:
        raise FormatError(f"{path}: expected {n * p} weights, found {W.shape[0]}")
    return SparseFilterModel(W=W.reshape(n, p).copy(), epsilon=epsilon)


def save_features_csv(features: np.ndarray, path: str | Path) -> None:
    """One row per segment, p comma-separated columns."""
    features = np.asarray(features, dtype=float)
    lines = [",".join(repr(float(v)) for v in row) for row in features]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_features_csv(path: str | Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(),
                                  start=1):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: bad feature row",
                              line=lineno) from None
    return np.asarray(rows, dtype=float)


class SparseFiltering(TransformerMixin, BaseEstimator):
    """Scikit-learn style transformer around the sparse filter.

    Parameters
    ----------
    n_features : int
        Number of features to learn; the method's only real hyperparameter.
    max_iters : int
        Adam iteration budget.
    lr : float
        Adam learning rate.
    epsilon : float
        Soft-absolute smoothing constant.
    random_state : int
        Seed for the Glorot initialization.

    Attributes
    ----------
    model_ : SparseFilterModel
        The learned weights, in (input dim, n_features) orientation.
    """

    def __init__(self, n_features: int = DEFAULT_FEATURES, max_iters: int = 200,
                 lr: float = 0.001, epsilon: float = DEFAULT_EPSILON,
                 random_state: int = 0):
        self.n_features = n_features
        self.max_iters = max_iters
        self.lr = lr
        self.epsilon = epsilon
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        self.model_ = train_sparse_filter(
            X.T, p=self.n_features, max_iters=self.max_iters,
            seed=self.random_state, lr=self.lr, epsilon=self.epsilon)
        return self

    def transform(self, X):
        """Fully-normalized features, shape (n_samples, n_features).

        Normalization statistics are computed over the batch passed in, so
        transforming jointly differs from transforming one sample at a time.
        """
        if not hasattr(self, "model_"):
            raise NotFittedError("SparseFiltering must be fitted before transform")
        X = np.asarray(X, dtype=float)
        return normalized_features(self.model_, X.T).values.T
