import numpy as np
import pytest

from nopeek.errors import RejectedInputError
from nopeek.features import FeatureKind
from nopeek.scorers import Method, ScoreTable, SetScorer, fit_scorer, fit_scorers, parse_methods
from nopeek.scoring import fit_lfdr, lfdr_scores, linf_scores, robust_moments


def _features(seed: int, count: int = 40, dimension: int = 6) -> np.ndarray:
    return np.abs(np.random.default_rng(seed).normal(0.1, 0.05, size=(count, dimension)))


class TestMethods:
    """
    Testing strategy:
    - names parse in order, duplicates dropped
    - unknown name rejected with the known names listed
    - feature kind of each method; only the equivariant method is set-dependent
    """

    def test_parse(self):
        assert parse_methods(["lfdr", "linf", "lfdr"]) == (Method.LFDR, Method.LINF)

    def test_unknown_rejected(self):
        with pytest.raises(RejectedInputError, match="unknown scoring method 'psychic'.*linf"):
            parse_methods(["linf", "psychic"])

    def test_feature_kinds(self):
        assert Method.CODE_MAHALANOBIS.feature_kind is FeatureKind.CODE
        assert Method.RAW_LINF.feature_kind is FeatureKind.RAW_RESIDUAL
        assert Method.LOG_LFDR.feature_kind is FeatureKind.INPAINT_RESIDUAL
        assert [m for m in Method if not m.item_wise] == [Method.EQUIVARIANT]


class TestSetScorer:
    """
    Testing strategy:
    - item-wise methods: set score equals item scores, independent of set membership
    - equivariant: permuting the set permutes the scores; items cannot be scored alone;
      a set too small for the trim still scores
    - fitted models present for exactly the methods that need them
    - lfdr scorer fitted on the pooled scores, not the reference
    - missing feature kind rejected
    """

    @pytest.mark.parametrize("method", [m for m in Method if m.item_wise and m is not Method.CODE_MAHALANOBIS])
    def test_item_wise_set_scores(self, method):
        pooled = np.concatenate([_features(0, count=300), _features(1, count=10) + 0.5])
        scorer = fit_scorer(method, _features(2), pooled)
        items = _features(3, count=8)
        scores = scorer.score_set(items)
        assert np.array_equal(scores, scorer.score_items(items))
        assert np.array_equal(scorer.score_set(items[:3]), scores[:3])

    def test_equivariant_permutation(self):
        scorer = fit_scorer(Method.EQUIVARIANT, _features(4))
        items = _features(5, count=12)
        order = np.random.default_rng(6).permutation(12)
        assert np.allclose(scorer.score_set(items[order]), scorer.score_set(items)[order])

    def test_equivariant_small_set(self):
        scorer = SetScorer(Method.EQUIVARIANT, trim=5)
        assert np.all(np.isfinite(scorer.score_set(_features(7, count=3))))

    def test_equivariant_items_rejected(self):
        with pytest.raises(RejectedInputError, match="whole sets"):
            SetScorer(Method.EQUIVARIANT).score_items(_features(8))

    def test_models_match_methods(self):
        with pytest.raises(AssertionError):
            SetScorer(Method.MAHALANOBIS)
        with pytest.raises(AssertionError):
            SetScorer(Method.LINF, moments=robust_moments(_features(9)))

    def test_code_mahalanobis_uses_full_covariance(self):
        scorer = fit_scorer(Method.CODE_MAHALANOBIS, np.random.default_rng(10).normal(size=(100, 4)))
        assert scorer.moments.full

    def test_lfdr_on_pooled_scores(self):
        typical = _features(11, count=400)
        planted = _features(12, count=10) + 1.0
        scorer = fit_scorer(Method.LFDR, typical, np.concatenate([typical, planted]))
        pooled_model = fit_lfdr(linf_scores(np.concatenate([typical, planted])))
        assert np.array_equal(scorer.score_items(planted), lfdr_scores(pooled_model, linf_scores(planted)))
        assert scorer.lfdr.pi0 == pooled_model.pi0
        scores = scorer.score_items(typical)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_fit_scorers_by_kind(self):
        residual = _features(13, count=250)
        scorers = fit_scorers(
            [Method.LINF, Method.LFDR], {FeatureKind.INPAINT_RESIDUAL: residual}, {FeatureKind.INPAINT_RESIDUAL: residual}
        )
        assert [s.name for s in scorers] == ["linf", "lfdr"]
        assert np.array_equal(scorers[0].score_items(residual), linf_scores(residual))

    def test_missing_kind_rejected(self):
        residual = _features(14)
        with pytest.raises(RejectedInputError, match="code"):
            fit_scorers([Method.CODE_MAHALANOBIS], {FeatureKind.INPAINT_RESIDUAL: residual}, {})


class TestScoreTable:
    """
    Testing strategy:
    - text form parses back to the same ids and scores
    - comment lines ignored
    - rejection: missing header, wrong field count, mixed methods, non-finite score,
      id and score counts differ
    """

    def test_text_form(self):
        table = ScoreTable("linf", ("a", "b"), np.array([0.25, 1.5]))
        text = table.to_text()
        assert text.splitlines()[1] == "id\tmethod\tscore"
        parsed = ScoreTable.parse(text)
        assert parsed.method == "linf"
        assert parsed.as_dict() == {"a": 0.25, "b": 1.5}

    @pytest.mark.parametrize(
        "text",
        [
            "a\tlinf\t0.5\n",
            "id\tmethod\tscore\na\tlinf\n",
            "id\tmethod\tscore\na\tlinf\t0.5\nb\tlfdr\t0.1\n",
            "id\tmethod\tscore\na\tlinf\tnan\n",
        ],
        ids=["no-header", "short-record", "mixed-methods", "non-finite"],
    )
    def test_malformed_rejected(self, text):
        with pytest.raises(RejectedInputError):
            ScoreTable.parse(text)

    def test_count_mismatch_rejected(self):
        with pytest.raises(RejectedInputError):
            ScoreTable("linf", ("a",), np.array([0.1, 0.2]))

    @pytest.mark.asyncio
    async def test_parse_from_file(self, tmp_path):
        ScoreTable("mahalanobis", ("x",), np.array([3.0])).save(tmp_path / "scores.tsv")
        parsed = await ScoreTable.parse_from_file(tmp_path / "scores.tsv")
        assert parsed.as_dict() == {"x": 3.0}
