"""
L1-regularized logistic regression, the supervised oracle, and the AUC and
accuracy metrics shared by every experiment.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .errors import RejectedInputError

logger = logging.getLogger(__name__)

LAMBDA_GRID_SIZE = 20
LAMBDA_GRID_RATIO = 1e-3


def _labels(labels, count: Optional[int] = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
        raise RejectedInputError("labels must be a vector of 0/1 values")
    if count is not None and len(y) != count:
        raise RejectedInputError(f"{len(y)} labels for {count} examples")
    return y.astype(np.float64)


def _features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise RejectedInputError(f"expected a nonempty (examples, dimension) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("features must be finite")
    return x


def soft_threshold(values: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(values) * np.maximum(np.abs(values) - threshold, 0.0)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """
    A fitted logistic model p(y=1 | x) = sigmoid(w . x + bias).

    Immutable.

    Representation Invariant:
        - weights finite; objective_history non-increasing
    """

    weights: np.ndarray
    bias: float
    reg: float
    iterations: int
    objective_history: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.weights.setflags(write=False)
        self._check_rep()

    @property
    def dimension(self) -> int:
        return len(self.weights)

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("nan")

    def decision_function(self, features) -> np.ndarray:
        x = _features(features)
        if x.shape[1] != self.dimension:
            raise RejectedInputError(f"feature dimension {x.shape[1]} != model dimension {self.dimension}")
        return x @ self.weights + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return special.expit(self.decision_function(features))

    def _check_rep(self) -> None:
        assert np.all(np.isfinite(self.weights))
        history = np.asarray(self.objective_history)
        assert np.all(np.diff(history) <= 1e-12 * np.maximum(1.0, np.abs(history[:-1]))), "objective increased"


def _logistic_loss(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> float:
    z = x @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit_l1_logistic(
    features,
    labels,
    reg: float,
    tol: float = 1e-9,
    max_iter: int = 5000,
    init: Optional[Tuple[np.ndarray, float]] = None,
) -> LinearModel:
    """
    Minimize mean logistic loss + reg * |w|_1 by proximal gradient descent with
    backtracking. The bias is not penalized.

    @param features: (n, d) matrix
    @param labels: n values in {0, 1}, at least two of each
    @param reg: L1 strength, >= 0
    @param tol: stop once an iteration lowers the objective by less than this
    @param max_iter: iteration cap
    @param init: optional (weights, bias) warm start
    @raises RejectedInputError: on a single-class (or nearly) label vector or bad shapes
    """
    x = _features(features)
    y = _labels(labels, x.shape[0])
    positives = int(y.sum())
    if positives < 2 or len(y) - positives < 2:
        raise RejectedInputError("fitting needs at least two examples of each class")
    if reg < 0:
        raise RejectedInputError(f"regularization must be non-negative, got {reg}")

    n = len(y)
    w = np.zeros(x.shape[1]) if init is None else np.array(init[0], dtype=np.float64)
    b = float(np.log(positives / (n - positives))) if init is None else float(init[1])
    step = 1.0
    smooth = _logistic_loss(x, y, w, b)
    history = [smooth + reg * np.abs(w).sum()]
    iteration = 0
    for iteration in range(1, max_iter + 1):
        residual = special.expit(x @ w + b) - y
        grad_w, grad_b = x.T @ residual / n, float(residual.mean())
        while True:
            w_new = soft_threshold(w - step * grad_w, step * reg)
            b_new = b - step * grad_b
            dw, db = w_new - w, b_new - b
            smooth_new = _logistic_loss(x, y, w_new, b_new)
            bound = smooth + grad_w @ dw + grad_b * db + (dw @ dw + db * db) / (2 * step)
            if smooth_new <= bound + 1e-15:
                break
            step /= 2
        objective = smooth_new + reg * np.abs(w_new).sum()
        decrease = history[-1] - objective
        if decrease < 0:
            # rounding only; keep the previous iterate
            break
        w, b, smooth = w_new, b_new, smooth_new
        history.append(objective)
        if decrease < tol:
            break
    logger.debug("l1-logistic reg=%.3g: %d iterations, objective %.6g", reg, iteration, history[-1])
    return LinearModel(w, b, reg, iteration, tuple(history))


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-dimension centering and scaling with moments from a training split."""

    mean: np.ndarray
    scale: np.ndarray

    @staticmethod
    def fit(features) -> "Standardizer":
        x = _features(features)
        scale = x.std(axis=0)
        return Standardizer(x.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def transform(self, features) -> np.ndarray:
        x = _features(features)
        if x.shape[1] != len(self.mean):
            raise RejectedInputError(f"feature dimension {x.shape[1]} != standardizer dimension {len(self.mean)}")
        return (x - self.mean) / self.scale


@dataclass(frozen=True, eq=False)
class L1LogisticPipeline:
    """A standardizer and the model selected on a validation split."""

    standardizer: Standardizer
    model: LinearModel
    path: Tuple[float, ...]
    validation_loss: Tuple[float, ...]

    @property
    def dimension(self) -> int:
        return self.model.dimension

    def predict_proba(self, features) -> np.ndarray:
        return self.model.predict_proba(self.standardizer.transform(features))


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split example indices so that each class contributes round(fraction * count)
    (at least one) examples to the second part.

    @returns (first indices, second indices), each sorted
    """
    y = _labels(labels)
    first, second = [], []
    for value in (0.0, 1.0):
        members = rng.permutation(np.flatnonzero(y == value))
        take = min(len(members) - 1, max(1, int(round(fraction * len(members)))))
        second.append(members[:take])
        first.append(members[take:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def lambda_grid(features, labels, size: int = LAMBDA_GRID_SIZE, ratio: float = LAMBDA_GRID_RATIO) -> np.ndarray:
    """
    Log-spaced regularization strengths, largest first. The largest is the smallest
    value at which every weight is zero.
    """
    x, y = _features(features), _labels(labels)
    top = float(np.max(np.abs(x.T @ (y - y.mean())))) / len(y)
    top = max(top, 1e-6)
    return np.geomspace(top, top * ratio, size)


def select_l1_logistic(
    features,
    labels,
    seed: int,
    lambdas: Optional[Sequence[float]] = None,
    validation_fraction: float = 0.25,
) -> L1LogisticPipeline:
    """
    Standardize on a training split, fit the regularization path on it, and keep the
    strength with the lowest validation log loss (the larger strength on ties).

    @raises RejectedInputError: if either class has fewer than three examples
    """
    x = _features(features)
    y = _labels(labels, x.shape[0])
    if min(int(y.sum()), len(y) - int(y.sum())) < 3:
        raise RejectedInputError("model selection needs at least three examples of each class")
    train_idx, valid_idx = stratified_split(y, validation_fraction, np.random.default_rng(seed))
    standardizer = Standardizer.fit(x[train_idx])
    x_train, x_valid = standardizer.transform(x[train_idx]), standardizer.transform(x[valid_idx])
    y_train, y_valid = y[train_idx], y[valid_idx]
    path = lambda_grid(x_train, y_train) if lambdas is None else np.asarray(lambdas, dtype=np.float64)

    best, best_loss, losses, warm = None, np.inf, [], None
    for reg in path:
        model = fit_l1_logistic(x_train, y_train, float(reg), init=warm)
        warm = (np.array(model.weights), model.bias)
        loss = _logistic_loss(x_valid, y_valid, model.weights, model.bias)
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = model, loss
    logger.info("selected reg=%.4g (validation log loss %.4f)", best.reg, best_loss)
    return L1LogisticPipeline(standardizer, best, tuple(float(v) for v in path), tuple(losses))


@dataclass(frozen=True)
class MetricReport:
    """
    Classification quality on a labeled set. accuracy is None for unsupervised
    scores, which have no decision threshold.
    """

    auc: float
    positives: int
    negatives: int
    accuracy: Optional[float] = None

    def __post_init__(self):
        assert 0 <= self.auc <= 1
        assert self.accuracy is None or 0 <= self.accuracy <= 1


def auc(scores, labels) -> float:
    """
    Probability that a random positive outscores a random negative, ties counted half.

    @raises RejectedInputError: if a class is missing or the lengths differ
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels, len(s))
    positives = int(y.sum())
    negatives = len(y) - positives
    if positives == 0 or negatives == 0:
        raise RejectedInputError("AUC needs both classes")
    ranks = stats.rankdata(s)
    return float((ranks[y == 1].sum() - positives * (positives + 1) / 2) / (positives * negatives))


def score_report(scores, labels) -> MetricReport:
    """MetricReport of an unsupervised score (AUC only)."""
    y = _labels(labels)
    return MetricReport(auc(scores, y), int(y.sum()), int(len(y) - y.sum()))


def evaluate(model, features, labels) -> MetricReport:
    """
    Accuracy at probability 0.5 and AUC of a fitted model.

    @param model: LinearModel or L1LogisticPipeline
    @raises RejectedInputError: on dimension mismatch
    """
    x = _features(features)
    y = _labels(labels, x.shape[0])
    probabilities = model.predict_proba(x)
    accuracy = float(np.mean((probabilities >= 0.5) == (y == 1)))
    return MetricReport(auc(probabilities, y), int(y.sum()), int(len(y) - y.sum()), accuracy)


def export_model(model: LinearModel, standardizer: Optional[Standardizer] = None) -> str:
    """Text form: header with dimension, strength and bias, then the nonzero weights."""
    lines = [
        f"# nopeek-l1-logistic dim={model.dimension} reg={model.reg:.9g} bias={model.bias:.9g} "
        f"iterations={model.iterations} objective={model.objective:.9g}"
    ]
    if standardizer is not None:
        lines.append("mean\t" + ",".join(f"{v:.9g}" for v in standardizer.mean))
        lines.append("scale\t" + ",".join(f"{v:.9g}" for v in standardizer.scale))
    lines.append("index\tweight")
    lines += [f"{i}\t{model.weights[i]:.9g}" for i in np.flatnonzero(model.weights)]
    return "\n".join(lines) + "\n"
