import math

import numpy as np
import pytest

from nopeek.errors import RejectedInputError
from nopeek.features import FeatureKind, FeatureVector
from nopeek.masking import grid_boxes
from nopeek.scoring import (
    VARIANCE_FLOOR,
    RobustMoments,
    equivariant_map,
    equivariant_transform,
    export_lfdr,
    fit_lfdr,
    lfdr_score,
    lfdr_scores,
    linf_score,
    linf_scores,
    mahalanobis_score,
    mahalanobis_scores,
    robust_moments,
)


class TestLinf:
    """
    Testing strategy:
    - residual vectors, zero vector, signed code vectors
    - FeatureVector and plain array inputs
    - empty vector rejected
    """

    def test_examples(self):
        assert linf_score([0.1, 0.9, 0.3]) == 0.9
        assert linf_score(np.zeros(4)) == 0.0
        assert linf_score([-2.0, 1.0]) == 2.0

    def test_feature_vector_input(self):
        grid = grid_boxes((8, 8), (4, 4), 4, 0)
        features = FeatureVector(FeatureKind.INPAINT_RESIDUAL, [0.2, 0.1, 0.7, 0.0], grid)
        assert linf_score(features) == 0.7

    def test_rows(self):
        assert np.array_equal(linf_scores(np.array([[1.0, -3.0], [0.5, 0.25]])), [3.0, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(RejectedInputError):
            linf_score([])
        with pytest.raises(RejectedInputError):
            linf_scores(np.zeros((2, 0)))


class TestRobustMoments:
    """
    Testing strategy:
    - trim 1 drops the extreme values of each dimension independently
    - trim 0 gives the ordinary sample moments
    - constant dimension floors the variance
    - full covariance: symmetric, positive definite, shrunk toward the diagonal,
      taken over items inside every dimension's trimmed range; an outlier leaves it
      near the diagonal moments; no surviving item falls back to the diagonal
    - rejection: too few items, negative trim, shrinkage outside [0, 1]
    """

    def test_trimmed_mean(self):
        moments = robust_moments(np.array([[1.0], [2.0], [3.0], [4.0], [100.0]]), trim=1)
        assert moments.mean[0] == pytest.approx(3.0)
        assert moments.variance[0] == pytest.approx(1.0)

    def test_dimensions_trimmed_independently(self):
        matrix = np.array([[1.0, 50.0], [2.0, 1.0], [3.0, 2.0], [4.0, 3.0], [100.0, 4.0]])
        assert np.allclose(robust_moments(matrix, trim=1).mean, [3.0, 3.0])

    def test_zero_trim_is_sample_moments(self):
        matrix = np.random.default_rng(0).normal(size=(40, 3))
        moments = robust_moments(matrix, trim=0)
        assert np.allclose(moments.mean, matrix.mean(axis=0))
        assert np.allclose(moments.variance, matrix.var(axis=0, ddof=1))

    def test_constant_dimension_floored(self):
        matrix = np.column_stack([np.full(10, 0.3), np.arange(10.0)])
        moments = robust_moments(matrix, trim=1)
        assert moments.variance[0] == VARIANCE_FLOOR
        assert np.all(np.isfinite(mahalanobis_scores(matrix, moments)))

    def test_full_covariance(self):
        rng = np.random.default_rng(1)
        matrix = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4))
        moments = robust_moments(matrix, trim=1, full=True, shrinkage=0.2)
        assert moments.full
        assert np.allclose(moments.covariance, moments.covariance.T)
        assert np.all(np.linalg.eigvalsh(moments.covariance) > 0)
        ordered = np.sort(matrix, axis=0)
        inside = np.all((matrix >= ordered[1]) & (matrix <= ordered[-2]), axis=1)
        centered = matrix[inside] - moments.mean
        raw = centered.T @ centered / (inside.sum() - 1)
        off = ~np.eye(4, dtype=bool)
        assert np.allclose(moments.covariance[off], 0.8 * raw[off])
        assert np.allclose(np.diag(moments.covariance), np.diag(raw))

    def test_full_covariance_ignores_outlier(self):
        rng = np.random.default_rng(2)
        matrix = rng.normal(size=(100, 3))
        spoiled = matrix.copy()
        spoiled[0] = [1e3, -1e3, 1e3]
        moments = robust_moments(spoiled, trim=1, full=True, shrinkage=0.0)
        assert np.all(np.diag(moments.covariance) < 3.0)
        assert np.all(np.abs(moments.covariance[~np.eye(3, dtype=bool)]) < 1.0)
        diagonal = robust_moments(spoiled, trim=1)
        assert np.allclose(np.diag(moments.covariance), diagonal.variance, rtol=0.5)

    def test_full_covariance_without_survivors(self):
        matrix = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 3.0], [3.0, 2.0]])
        moments = robust_moments(matrix, trim=1, full=True)
        assert np.array_equal(moments.covariance, np.diag(robust_moments(matrix, trim=1).variance))

    @pytest.mark.parametrize(
        "count, kwargs", [(3, {"trim": 1}), (1, {"trim": 0}), (10, {"trim": -1}), (10, {"shrinkage": 1.5})]
    )
    def test_invalid_arguments_rejected(self, count, kwargs):
        with pytest.raises(RejectedInputError):
            robust_moments(np.ones((count, 2)), **kwargs)


class TestMahalanobis:
    """
    Testing strategy:
    - Euclidean case, point at the mean, diagonal standardization
    - full covariance against the direct formula
    - dimension mismatch rejected
    """

    def test_identity_covariance(self):
        assert mahalanobis_score([3.0, 4.0], RobustMoments(np.zeros(2), np.ones(2))) == pytest.approx(5.0)

    def test_point_at_mean(self):
        assert mahalanobis_score([1.0, 2.0], RobustMoments(np.array([1.0, 2.0]), np.ones(2))) == 0.0

    def test_diagonal_covariance(self):
        moments = RobustMoments(np.array([1.0, 1.0]), np.array([4.0, 9.0]))
        assert mahalanobis_score([3.0, 4.0], moments) == pytest.approx(math.sqrt(2.0))

    def test_full_covariance(self):
        covariance = np.array([[2.0, 0.5], [0.5, 1.0]])
        moments = RobustMoments(np.array([0.5, -1.0]), covariance)
        x = np.array([2.0, 1.0])
        delta = x - moments.mean
        expected = math.sqrt(delta @ np.linalg.solve(covariance, delta))
        assert mahalanobis_score(x, moments) == pytest.approx(expected)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(RejectedInputError):
            mahalanobis_score([1.0, 2.0, 3.0], RobustMoments(np.zeros(2), np.ones(2)))


class TestEquivariant:
    """
    Testing strategy:
    - identity parameters leave the set unchanged
    - permuting the set permutes the output
    - the L2 norm of each transformed row is the Mahalanobis distance from the
      set mean, for diagonal and full moments
    - constant set maps to zero
    """

    def test_identity_parameters(self):
        matrix = np.random.default_rng(2).normal(size=(5, 3))
        assert np.array_equal(equivariant_map(matrix, 1.0, 0.0), matrix)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(7, 3))
        moments = robust_moments(matrix, trim=1)
        order = rng.permutation(7)
        assert np.allclose(equivariant_transform(matrix[order], moments), equivariant_transform(matrix, moments)[order])

    @pytest.mark.parametrize("full", [False, True])
    def test_norm_is_distance_from_set_mean(self, full):
        rng = np.random.default_rng(4)
        matrix = rng.normal(size=(30, 4)) * [1.0, 2.0, 0.5, 3.0]
        moments = robust_moments(matrix, trim=1, full=full)
        transformed = equivariant_transform(matrix, moments)
        centered = RobustMoments(matrix.mean(axis=0), moments.covariance)
        assert np.allclose(np.linalg.norm(transformed, axis=1), mahalanobis_scores(matrix, centered), atol=1e-10)

    def test_constant_set_maps_to_zero(self):
        matrix = np.full((6, 3), 0.25)
        transformed = equivariant_transform(matrix, robust_moments(matrix, trim=1))
        assert np.allclose(transformed, 0.0)


class TestLfdr:
    """
    Testing strategy:
    - null-only scores: lfdr near 1 for typical items
    - planted far outliers: low lfdr, high score
    - forced pi0 = 1: lfdr identically 1
    - log standardization
    - outputs in [0, 1], non-increasing away from the mode
    - rejection: too few, non-finite, nonpositive with use_log, constant, bad pi0
    """

    def test_null_scores(self):
        scores = np.random.default_rng(5).normal(size=30_000)
        model = fit_lfdr(scores)
        lfdr = 1.0 - lfdr_scores(model, scores)
        assert np.median(lfdr) >= 0.9
        assert np.all((lfdr >= 0) & (lfdr <= 1))

    def test_planted_outliers(self):
        rng = np.random.default_rng(6)
        null = rng.normal(size=29_700)
        planted = rng.normal(5.0, 0.1, size=300)
        model = fit_lfdr(np.concatenate([null, planted]))
        lfdr = 1.0 - lfdr_scores(model, planted)
        assert np.all(lfdr <= 0.2)
        assert lfdr_score(model, 5.0) >= 0.8

    def test_forced_null_prior(self):
        model = fit_lfdr(np.random.default_rng(7).normal(size=500), pi0=1.0)
        assert np.all(model.lfdr == 1.0)
        assert lfdr_score(model, 100.0) == 0.0

    def test_score_at_mode_is_zero(self):
        model = fit_lfdr(np.random.default_rng(8).normal(size=2000))
        assert lfdr_score(model, model.mode * model.scale + model.location) == pytest.approx(0.0, abs=1e-9)

    def test_log_scores(self):
        scores = np.exp(np.random.default_rng(9).normal(size=1000))
        model = fit_lfdr(scores, use_log=True)
        assert model.use_log
        assert model.location == pytest.approx(np.median(np.log(scores)))
        assert np.all((model.lfdr >= 0) & (model.lfdr <= 1))

    def test_lfdr_non_increasing_away_from_mode(self):
        rng = np.random.default_rng(10)
        model = fit_lfdr(np.concatenate([rng.normal(size=1000), rng.normal(4.0, 0.3, size=50)]))
        mode_index = int(np.argmax(model.density))
        assert np.all(np.diff(model.lfdr[mode_index:]) <= 0)
        assert np.all(np.diff(model.lfdr[: mode_index + 1]) >= 0)

    def test_density_integrates_to_one(self):
        model = fit_lfdr(np.random.default_rng(11).normal(size=1000))
        assert model.density_mass() == pytest.approx(1.0, abs=1e-3)

    def test_export(self):
        model = fit_lfdr(np.random.default_rng(12).normal(size=300))
        lines = export_lfdr(model).splitlines()
        assert lines[0].startswith("# nopeek-lfdr use_log=false")
        assert lines[1] == "z\tf\tf0\tlfdr"
        assert len(lines) == 2 + len(model.grid)

    @pytest.mark.parametrize(
        "scores, kwargs",
        [
            (np.ones(199), {}),
            (np.append(np.arange(300.0), np.nan), {}),
            (np.arange(300.0), {"use_log": True}),
            (np.full(300, 2.0), {}),
            (np.arange(300.0), {"pi0": 0.0}),
        ],
        ids=["too-few", "non-finite", "nonpositive-log", "constant", "bad-pi0"],
    )
    def test_invalid_input_rejected(self, scores, kwargs):
        with pytest.raises(RejectedInputError):
            fit_lfdr(scores, **kwargs)
