"""
Anomaly scores from feature vectors.

Every score here is oriented so that larger means more anomalous.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, linalg, stats

from .errors import RejectedInputError
from .features import FeatureVector

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
DENSITY_FLOOR = 1e-12
DEFAULT_SHRINKAGE = 0.1
LFDR_MIN_SCORES = 200
IQR_TO_SIGMA = 1.349

FeatureInput = Union[FeatureVector, np.ndarray, Sequence[float]]


def _vector(features: FeatureInput) -> np.ndarray:
    values = features.values if isinstance(features, FeatureVector) else np.asarray(features, dtype=np.float64)
    if values.ndim != 1:
        raise RejectedInputError(f"expected a feature vector, got shape {values.shape}")
    return values


def _matrix(features) -> np.ndarray:
    """A (N, d) matrix from a matrix or from a list of FeatureVectors."""
    if isinstance(features, np.ndarray):
        matrix = features.astype(np.float64, copy=False)
    else:
        matrix = np.array([_vector(f) for f in features], dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise RejectedInputError(f"expected a nonempty (items, dimension) matrix, got shape {matrix.shape}")
    return matrix


def linf_score(features: FeatureInput) -> float:
    """
    Largest absolute feature value; for residual features this is the most violated box.

    @raises RejectedInputError: if the vector is empty
    """
    values = _vector(features)
    if len(values) == 0:
        raise RejectedInputError("cannot take the L-infinity norm of an empty vector")
    return float(np.max(np.abs(values)))


def linf_scores(features) -> np.ndarray:
    """linf_score of every row."""
    matrix = _matrix(features)
    if matrix.shape[1] == 0:
        raise RejectedInputError("cannot take the L-infinity norm of an empty vector")
    return np.abs(matrix).max(axis=1)


@dataclass(frozen=True, eq=False)
class RobustMoments:
    """
    Trimmed location and spread of a set of feature vectors.

    Immutable.

    Abstraction Function:
        AF(mean, covariance, trim) = the Gaussian N(mean, C) where C is diag(covariance)
            if covariance is a vector and covariance itself if it is a matrix; trim is the
            number of values dropped from each tail of each dimension when estimating it
    Representation Invariant:
        - mean is a finite vector of length d
        - covariance is a length-d vector of entries >= VARIANCE_FLOOR,
          or a symmetric positive-definite d x d matrix
        - trim >= 0
    """

    mean: np.ndarray
    covariance: np.ndarray
    trim: int = 0

    def __post_init__(self):
        for name in ("mean", "covariance"):
            value = np.array(getattr(self, name), dtype=np.float64)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        self._check_rep()

    @property
    def dimension(self) -> int:
        return len(self.mean)

    @property
    def full(self) -> bool:
        return self.covariance.ndim == 2

    @property
    def variance(self) -> np.ndarray:
        """Per-dimension variances (the diagonal)."""
        return np.diag(self.covariance) if self.full else self.covariance

    def inverse_sqrt(self) -> np.ndarray:
        """Sigma^(-1/2): a vector for diagonal moments, a symmetric matrix otherwise."""
        if not self.full:
            return 1.0 / np.sqrt(self.covariance)
        eigenvalues, eigenvectors = linalg.eigh(self.covariance)
        return (eigenvectors / np.sqrt(eigenvalues)) @ eigenvectors.T

    def _check_rep(self) -> None:
        assert self.mean.ndim == 1 and np.all(np.isfinite(self.mean))
        assert self.trim >= 0
        if self.full:
            assert self.covariance.shape == (self.dimension, self.dimension)
            assert np.allclose(self.covariance, self.covariance.T)
        else:
            assert self.covariance.shape == (self.dimension,)
            assert np.all(self.covariance >= VARIANCE_FLOOR)


def robust_moments(features, trim: int = 1, full: bool = False, shrinkage: float = DEFAULT_SHRINKAGE) -> RobustMoments:
    """
    Mean and covariance after dropping the trim largest and trim smallest values of
    every dimension independently.

    With full=True the covariance matrix is taken about the trimmed mean over the items
    that survive trimming in every dimension, and shrunk toward its diagonal,
    (1 - shrinkage) * C + shrinkage * diag(C). When fewer than two items survive, the
    trimmed variances form a diagonal matrix.

    @param features: (N, d) matrix or list of FeatureVector
    @param trim: values dropped per tail per dimension
    @raises RejectedInputError: if N <= 2 * trim + 1 or the arguments are out of range
    """
    matrix = _matrix(features)
    count = matrix.shape[0]
    if trim < 0:
        raise RejectedInputError(f"trim must be non-negative, got {trim}")
    if count <= 2 * trim + 1:
        raise RejectedInputError(f"{count} items are too few to trim {trim} from each tail")
    if not 0 <= shrinkage <= 1:
        raise RejectedInputError(f"shrinkage must lie in [0, 1], got {shrinkage}")

    kept = np.sort(matrix, axis=0)[trim : count - trim]
    mean = kept.mean(axis=0)
    variance = np.maximum(kept.var(axis=0, ddof=1), VARIANCE_FLOOR)
    if not full:
        return RobustMoments(mean, variance, trim)

    inside = np.all((matrix >= kept[0]) & (matrix <= kept[-1]), axis=1)
    if inside.sum() < 2:
        return RobustMoments(mean, np.diag(variance), trim)
    centered = matrix[inside] - mean
    covariance = centered.T @ centered / (len(centered) - 1)
    diagonal = np.maximum(np.diag(covariance), VARIANCE_FLOOR)
    shrunk = (1 - shrinkage) * covariance
    shrunk[np.diag_indices_from(shrunk)] = diagonal
    return RobustMoments(mean, (shrunk + shrunk.T) / 2, trim)


def mahalanobis_scores(features, moments: RobustMoments) -> np.ndarray:
    """mahalanobis_score of every row."""
    matrix = _matrix(features)
    if matrix.shape[1] != moments.dimension:
        raise RejectedInputError(f"feature dimension {matrix.shape[1]} != moments dimension {moments.dimension}")
    centered = matrix - moments.mean
    if not moments.full:
        return np.sqrt(np.sum(centered**2 / moments.covariance, axis=1))
    factor = linalg.cho_factor(moments.covariance)
    solved = linalg.cho_solve(factor, centered.T).T
    return np.sqrt(np.maximum(np.sum(centered * solved, axis=1), 0.0))


def mahalanobis_score(features: FeatureInput, moments: RobustMoments) -> float:
    """
    sqrt((x - mean)^T Sigma^-1 (x - mean)).

    @raises RejectedInputError: on dimension mismatch
    """
    return float(mahalanobis_scores(_vector(features)[None], moments)[0])


def _apply(operator, rows: np.ndarray) -> np.ndarray:
    operator = np.asarray(operator, dtype=np.float64)
    if operator.ndim == 2:
        return rows @ operator.T
    return rows * operator


def equivariant_map(features, lam, gamma) -> np.ndarray:
    """
    The permutation-equivariant set map x_i -> lam x_i + gamma sum_j x_j.

    lam and gamma may each be a scalar, a per-dimension vector or a d x d matrix.

    @returns (N, d) transformed set, row i belonging to item i
    """
    matrix = _matrix(features)
    total = matrix.sum(axis=0, keepdims=True)
    return _apply(lam, matrix) + _apply(gamma, total)


def equivariant_transform(features, moments: RobustMoments) -> np.ndarray:
    """
    equivariant_map with lam = Sigma^(-1/2) and gamma = -Sigma^(-1/2) / N, which whitens
    every item about the set mean; the L2 norm of a transformed row is the item's
    Mahalanobis distance from the set mean.
    """
    matrix = _matrix(features)
    if matrix.shape[1] != moments.dimension:
        raise RejectedInputError(f"feature dimension {matrix.shape[1]} != moments dimension {moments.dimension}")
    inverse_sqrt = moments.inverse_sqrt()
    return equivariant_map(matrix, inverse_sqrt, -inverse_sqrt / matrix.shape[0])


@dataclass(frozen=True, eq=False)
class LfdrModel:
    """
    Fitted two-group model of standardized scores.

    Immutable. The null density f0 is the standard normal; density is a kernel
    estimate of the marginal f; lfdr on the grid is min(1, pi0 f0 / f), made
    non-increasing moving away from the mode.

    Representation Invariant:
        - 0 < pi0 <= 1, scale > 0
        - grid strictly increasing; density, null_density and lfdr have its length
        - density >= DENSITY_FLOOR; 0 <= lfdr <= 1
    """

    location: float
    scale: float
    use_log: bool
    pi0: float
    mode: float
    grid: np.ndarray
    density: np.ndarray
    null_density: np.ndarray
    lfdr: np.ndarray

    def __post_init__(self):
        for name in ("grid", "density", "null_density", "lfdr"):
            getattr(self, name).setflags(write=False)
        self._check_rep()

    def standardize(self, scores) -> np.ndarray:
        """Map raw scores to the z scale the model was fitted on."""
        scores = np.asarray(scores, dtype=np.float64)
        if self.use_log:
            scores = np.log(np.maximum(scores, np.finfo(np.float64).tiny))
        return (scores - self.location) / self.scale

    def lfdr_at(self, z) -> np.ndarray:
        """lfdr at standardized values z, clamped to the end values outside the grid."""
        return np.interp(z, self.grid, self.lfdr)

    def density_mass(self) -> float:
        """Integral of the density estimate over the grid."""
        return float(integrate.trapezoid(self.density, self.grid))

    def _check_rep(self) -> None:
        assert 0 < self.pi0 <= 1
        assert self.scale > 0
        assert np.all(np.diff(self.grid) > 0)
        assert len(self.density) == len(self.null_density) == len(self.lfdr) == len(self.grid)
        assert np.all(self.density >= DENSITY_FLOOR)
        assert np.all((self.lfdr >= 0) & (self.lfdr <= 1))


def _evaluation_grid(z: np.ndarray) -> np.ndarray:
    dense = np.linspace(-10.0, 10.0, 2001)
    return np.union1d(dense, z[np.abs(z) > 8.0])


def _monotone_from_mode(values: np.ndarray, mode_index: int) -> np.ndarray:
    out = values.copy()
    out[mode_index:] = np.minimum.accumulate(values[mode_index:])
    out[: mode_index + 1] = np.minimum.accumulate(values[: mode_index + 1][::-1])[::-1]
    return out


def fit_lfdr(scores, use_log: bool = False, pi0: Optional[float] = None) -> LfdrModel:
    """
    Fit the local false discovery rate of a pool of scores.

    Scores (or their logs) are standardized by central matching: location = median,
    scale = interquartile range / 1.349. The marginal f is a Gaussian kernel density
    estimate with Silverman's bandwidth and the null f0 is the standard normal. The null
    prior is pi0 = min(1, f/f0) at the mode of f unless given.

    @param scores: at least 200 finite scores; all positive if use_log
    @param use_log: standardize log scores instead of scores
    @param pi0: fixed null prior in (0, 1], overriding the estimate
    @raises RejectedInputError: on too few, non-finite, nonpositive (with use_log) or
            constant scores, or pi0 outside (0, 1]
    """
    values = np.asarray(scores, dtype=np.float64).ravel()
    if len(values) < LFDR_MIN_SCORES:
        raise RejectedInputError(f"lfdr needs at least {LFDR_MIN_SCORES} scores, got {len(values)}")
    if not np.all(np.isfinite(values)):
        raise RejectedInputError("lfdr scores must be finite")
    if use_log:
        if np.any(values <= 0):
            raise RejectedInputError("log-lfdr needs positive scores")
        values = np.log(values)
    if pi0 is not None and not 0 < pi0 <= 1:
        raise RejectedInputError(f"pi0 must lie in (0, 1], got {pi0}")

    location = float(np.median(values))
    q25, q75 = np.percentile(values, [25, 75])
    scale = float((q75 - q25) / IQR_TO_SIGMA)
    if scale <= 0:
        scale = float(np.std(values))
    if scale <= 0:
        raise RejectedInputError("lfdr scores are constant")
    z = (values - location) / scale

    kde = stats.gaussian_kde(z, bw_method="silverman")
    grid = _evaluation_grid(z)
    density = np.maximum(kde(grid), DENSITY_FLOOR)
    null_density = stats.norm.pdf(grid)
    mode_index = int(np.argmax(density))
    if pi0 is None:
        pi0 = float(min(1.0, density[mode_index] / null_density[mode_index]))

    if pi0 >= 1.0:
        lfdr = np.ones_like(grid)
    else:
        # f1 = max(f - pi0 f0, 0) / (1 - pi0), so the denominator is max(f, pi0 f0)
        lfdr = pi0 * null_density / np.maximum(density, pi0 * null_density)
    lfdr = np.clip(_monotone_from_mode(lfdr, mode_index), 0.0, 1.0)

    logger.debug("lfdr fit: n=%d location=%.4g scale=%.4g pi0=%.4f", len(values), location, scale, pi0)
    return LfdrModel(location, scale, use_log, pi0, float(grid[mode_index]), grid, density, null_density, lfdr)


def lfdr_scores(model: LfdrModel, scores) -> np.ndarray:
    """1 - lfdr of every score."""
    return 1.0 - model.lfdr_at(model.standardize(scores))


def lfdr_score(model: LfdrModel, score: float) -> float:
    """
    1 - lfdr(z) for one raw score, so that larger means more anomalous.
    Outside the fitted grid the end values are used.
    """
    return float(lfdr_scores(model, np.array([score]))[0])


def lfdr_curve(model: LfdrModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """@returns (z, f, f0, lfdr) on the model's grid"""
    return model.grid, model.density, model.null_density, model.lfdr


def export_lfdr(model: LfdrModel) -> str:
    """
    Text form of a fitted model: a header with the standardization and pi0, then one
    tab-separated row of z, f, f0 and lfdr per grid point. Scores are 1 - lfdr.
    """
    lines = [
        f"# nopeek-lfdr use_log={str(model.use_log).lower()} location={model.location:.9g} "
        f"scale={model.scale:.9g} pi0={model.pi0:.9g} mode={model.mode:.9g} score=1-lfdr",
        "z\tf\tf0\tlfdr",
    ]
    for row in zip(*lfdr_curve(model)):
        lines.append("\t".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"
