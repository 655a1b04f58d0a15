"""
Named set scorers.

A scorer turns the feature matrix of an evaluation set into one score per item.
Item-wise scorers give every item a score that does not depend on the rest of the
set, so experiments compute them once per pool; set-dependent scorers (the
equivariant transform) are evaluated on each trial's set.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import aiofiles
import numpy as np

from .artifacts import PathLike, atomic_write_text
from .errors import RejectedInputError
from .features import FeatureKind
from .scoring import (
    DEFAULT_SHRINKAGE,
    LfdrModel,
    RobustMoments,
    equivariant_transform,
    fit_lfdr,
    lfdr_scores,
    linf_scores,
    mahalanobis_scores,
    robust_moments,
)

logger = logging.getLogger(__name__)


class Method(str, Enum):
    LINF = "linf"
    EQUIVARIANT = "equivariant"
    MAHALANOBIS = "mahalanobis"
    LFDR = "lfdr"
    LOG_LFDR = "log-lfdr"
    CODE_MAHALANOBIS = "code-mahalanobis"
    RAW_LINF = "raw-linf"

    @property
    def feature_kind(self) -> FeatureKind:
        if self is Method.CODE_MAHALANOBIS:
            return FeatureKind.CODE
        if self is Method.RAW_LINF:
            return FeatureKind.RAW_RESIDUAL
        return FeatureKind.INPAINT_RESIDUAL

    @property
    def item_wise(self) -> bool:
        return self is not Method.EQUIVARIANT


def parse_methods(names: Sequence[str]) -> Tuple[Method, ...]:
    """
    @raises RejectedInputError: naming the first unknown method
    """
    methods = []
    for name in names:
        try:
            methods.append(Method(name))
        except ValueError:
            known = ", ".join(m.value for m in Method)
            raise RejectedInputError(f"unknown scoring method '{name}' (known: {known})") from None
    return tuple(dict.fromkeys(methods))


@dataclass(frozen=True, eq=False)
class SetScorer:
    """
    A fitted scoring method.

    Immutable and shareable across threads.

    Representation Invariant:
        - moments is present iff method is a Mahalanobis method
        - lfdr is present iff method is an lfdr method
    """

    method: Method
    trim: int = 1
    moments: Optional[RobustMoments] = None
    lfdr: Optional[LfdrModel] = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        self._check_rep()

    @property
    def name(self) -> str:
        return self.method.value

    @property
    def feature_kind(self) -> FeatureKind:
        return self.method.feature_kind

    @property
    def item_wise(self) -> bool:
        return self.method.item_wise

    def score_items(self, features: np.ndarray) -> np.ndarray:
        """
        Scores of items scored independently of each other.

        @raises RejectedInputError: for the set-dependent method
        """
        method = self.method
        if method in (Method.LINF, Method.RAW_LINF):
            return linf_scores(features)
        if method in (Method.MAHALANOBIS, Method.CODE_MAHALANOBIS):
            return mahalanobis_scores(features, self.moments)
        if method in (Method.LFDR, Method.LOG_LFDR):
            return lfdr_scores(self.lfdr, linf_scores(features))
        raise RejectedInputError(f"'{self.name}' scores whole sets, not single items")

    def score_set(self, features: np.ndarray) -> np.ndarray:
        """Scores of the items of one evaluation set, row order preserved."""
        if self.item_wise:
            return self.score_items(features)
        # at least two values must remain per dimension after trimming
        trim = max(0, min(self.trim, (len(features) - 2) // 2))
        moments = robust_moments(features, trim=trim)
        return linf_scores(equivariant_transform(features, moments))

    def _check_rep(self) -> None:
        mahalanobis = self.method in (Method.MAHALANOBIS, Method.CODE_MAHALANOBIS)
        assert (self.moments is not None) == mahalanobis
        assert (self.lfdr is not None) == (self.method in (Method.LFDR, Method.LOG_LFDR))


def fit_scorer(
    method: Method,
    reference: np.ndarray,
    pooled: Optional[np.ndarray] = None,
    trim: int = 1,
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> SetScorer:
    """
    Fit a scoring method.

    @param method: which method
    @param reference: features of the typical holdout pool, in method.feature_kind;
                      Mahalanobis moments are estimated on it
    @param pooled: features of every test item (holdout and probes); lfdr methods are
                   fitted on their L-infinity scores. Defaults to reference.
    @param trim: values dropped per tail per dimension for robust moments
    @param shrinkage: covariance shrinkage for the full-covariance method
    """
    method = Method(method)
    pooled = reference if pooled is None else pooled
    if method is Method.MAHALANOBIS:
        return SetScorer(method, trim, moments=robust_moments(reference, trim=trim))
    if method is Method.CODE_MAHALANOBIS:
        return SetScorer(method, trim, moments=robust_moments(reference, trim=trim, full=True, shrinkage=shrinkage))
    if method in (Method.LFDR, Method.LOG_LFDR):
        model = fit_lfdr(linf_scores(pooled), use_log=method is Method.LOG_LFDR)
        logger.info("%s fitted on %d scores: pi0=%.4f", method.value, len(pooled), model.pi0)
        return SetScorer(method, trim, lfdr=model)
    return SetScorer(method, trim)


def fit_scorers(
    methods: Sequence[Method],
    reference: Mapping[FeatureKind, np.ndarray],
    pooled: Mapping[FeatureKind, np.ndarray],
    trim: int = 1,
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> List[SetScorer]:
    """fit_scorer for every method, picking each method's feature kind from the maps."""
    scorers = []
    for method in methods:
        kind = Method(method).feature_kind
        if kind not in reference or kind not in pooled:
            raise RejectedInputError(f"method '{Method(method).value}' needs {kind.value} features")
        scorers.append(fit_scorer(method, reference[kind], pooled[kind], trim, shrinkage))
    return scorers


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Per-item scores of one method, as stored in a score file."""

    method: str
    ids: Tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.scores.shape != (len(self.ids),):
            raise RejectedInputError("score table needs one score per image id")
        if not np.all(np.isfinite(self.scores)):
            raise RejectedInputError("scores must be finite")

    def as_dict(self) -> Dict[str, float]:
        return {image_id: float(s) for image_id, s in zip(self.ids, self.scores)}

    def to_text(self) -> str:
        lines = ["# nopeek-scores larger=more-anomalous", "id\tmethod\tscore"]
        lines += [f"{image_id}\t{self.method}\t{s:.9g}" for image_id, s in zip(self.ids, self.scores)]
        return "\n".join(lines) + "\n"

    def save(self, path: PathLike) -> None:
        atomic_write_text(path, self.to_text())

    @staticmethod
    def parse(text: str) -> "ScoreTable":
        lines = [line for line in text.split("\n") if line and not line.startswith("#")]
        if not lines or lines[0] != "id\tmethod\tscore":
            raise RejectedInputError("score file must start with an 'id, method, score' header")
        ids, methods, scores = [], set(), []
        for number, line in enumerate(lines[1:], start=2):
            fields = line.split("\t")
            if len(fields) != 3:
                raise RejectedInputError(f"record {number}: expected 3 fields, got {len(fields)}")
            ids.append(fields[0])
            methods.add(fields[1])
            scores.append(float(fields[2]))
        if len(methods) > 1:
            raise RejectedInputError(f"score file mixes methods {sorted(methods)}")
        method = methods.pop() if methods else ""
        return ScoreTable(method, tuple(ids), np.array(scores, dtype=np.float64))

    @staticmethod
    async def parse_from_file(path: PathLike) -> "ScoreTable":
        async with aiofiles.open(Path(path), "r", encoding="utf-8") as f:
            text = await f.read()
        return ScoreTable.parse(text)
