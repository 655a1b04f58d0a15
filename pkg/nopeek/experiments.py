"""
Evaluation protocols.

Set trials: each trial hides one probe image among distractors drawn from a typical
holdout pool, scores the whole set and records the probe's rank. Anomaly runs draw
probes from the anomaly pool; control runs draw them from a pool of fresh typical
images with the same seed schedule, so both runs see the same distractors.

Attribute experiment: a proxy anomaly task with a binary attribute, scored by a
supervised oracle and by unsupervised scores.
"""

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import aiofiles
import numpy as np

from .artifacts import counter_rng, derive_seed
from .errors import RejectedInputError
from .features import FeatureKind
from .scorers import SetScorer
from .scoring import linf_scores, mahalanobis_scores, robust_moments
from .supervised import MetricReport, evaluate, score_report, select_l1_logistic, stratified_split

logger = logging.getLogger(__name__)

RECALL_LEVELS = (1, 5, 10)
TRIAL_CHUNK = 250


class ProbeKind(str, Enum):
    ANOMALY = "anomaly"
    CONTROL = "control-typical"


@dataclass(frozen=True, eq=False)
class ItemPool:
    """
    Images available to trials: their ids and their features of one or more kinds.

    Immutable.

    Representation Invariant:
        - ids unique
        - every feature matrix has one row per id
    """

    ids: Tuple[str, ...]
    features: Mapping[FeatureKind, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "features", {FeatureKind(k): np.asarray(v) for k, v in self.features.items()})
        if len(set(self.ids)) != len(self.ids):
            raise RejectedInputError("pool image ids must be unique")
        for kind, matrix in self.features.items():
            if matrix.ndim != 2 or matrix.shape[0] != len(self.ids):
                raise RejectedInputError(f"{kind.value} features need one row per pool image")

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, kind: FeatureKind) -> np.ndarray:
        kind = FeatureKind(kind)
        if kind not in self.features:
            raise RejectedInputError(f"pool has no {kind.value} features")
        return self.features[kind]


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """
    One trial of one scorer: which images formed the set and where the probe ranked.

    distractor_index indexes the holdout pool's ids; the array is shared by the
    records of every scorer in the same trial and must not be modified.
    """

    trial: int
    size: int
    method: str
    probe_id: str
    probe_kind: ProbeKind
    distractor_index: np.ndarray
    pool_ids: Tuple[str, ...]
    rank: int

    def __post_init__(self):
        assert 1 <= self.rank <= self.size
        assert len(self.distractor_index) == self.size - 1

    @property
    def distractor_ids(self) -> Tuple[str, ...]:
        return tuple(self.pool_ids[i] for i in self.distractor_index)

    def hit(self, k: int) -> bool:
        return self.rank <= k


@dataclass(frozen=True)
class RecallCurve:
    """
    Recall at 1, 5 and 10 against set size for one scorer and probe kind.

    Representation Invariant:
        - recall tuples have one entry per size, each in [0, 1]
        - recall_at_1 <= recall_at_5 <= recall_at_10 entrywise
    """

    method: str
    probe_kind: ProbeKind
    sizes: Tuple[int, ...]
    recall_at_1: Tuple[float, ...]
    recall_at_5: Tuple[float, ...]
    recall_at_10: Tuple[float, ...]
    trials: int

    def __post_init__(self):
        object.__setattr__(self, "probe_kind", ProbeKind(self.probe_kind))
        self._check_rep()

    def recall(self, k: int) -> Tuple[float, ...]:
        return {1: self.recall_at_1, 5: self.recall_at_5, 10: self.recall_at_10}[k]

    def at(self, size: int, k: int) -> float:
        return self.recall(k)[self.sizes.index(size)]

    def _check_rep(self) -> None:
        for values in (self.recall_at_1, self.recall_at_5, self.recall_at_10):
            assert len(values) == len(self.sizes)
            assert all(0 <= v <= 1 for v in values)
        for r1, r5, r10 in zip(self.recall_at_1, self.recall_at_5, self.recall_at_10):
            assert r1 <= r5 <= r10


def _check_pools(holdout: ItemPool, probes: ItemPool, sizes: Sequence[int], trials: int) -> None:
    if not sizes:
        raise RejectedInputError("no set sizes given")
    if min(sizes) < 1:
        raise RejectedInputError("set sizes must be at least 1")
    if len(holdout) < max(sizes):
        raise RejectedInputError(f"holdout pool of {len(holdout)} is smaller than set size {max(sizes)}")
    if len(probes) == 0:
        raise RejectedInputError("probe pool is empty")
    if trials < 1:
        raise RejectedInputError("trials must be at least 1")
    shared = set(holdout.ids) & set(probes.ids)
    if shared:
        raise RejectedInputError(f"holdout and probe pools share {len(shared)} image(s), e.g. {min(shared)}")


def probe_rank(probe_score: float, probe_id: str, distractor_scores: np.ndarray, distractor_ids: np.ndarray) -> int:
    """
    1-based position of the probe when the set is sorted by score descending, ties
    broken by image id ascending.
    """
    above = np.count_nonzero(distractor_scores > probe_score)
    tied_before = np.count_nonzero((distractor_scores == probe_score) & (distractor_ids < probe_id))
    return int(1 + above + tied_before)


def iter_trial_records(
    scorers: Sequence[SetScorer],
    holdout: ItemPool,
    probes: ItemPool,
    sizes: Sequence[int],
    trials: int,
    seed: int,
    probe_kind: ProbeKind = ProbeKind.ANOMALY,
    threads: int = 1,
) -> Iterator[TrialRecord]:
    """
    Run set trials and stream their records, ordered by size, then trial, then scorer.

    Trial t of size n draws n - 1 distinct distractors from the holdout pool and then
    one probe uniformly from the probe pool, using a generator keyed by (seed, n, t).
    The stream is identical for any number of threads.

    @param scorers: fitted scorers (anything with name, feature_kind, item_wise,
                    score_items and score_set)
    @raises RejectedInputError: if the pools are too small, empty or overlap
    """
    _check_pools(holdout, probes, sizes, trials)
    probe_kind = ProbeKind(probe_kind)
    holdout_ids = np.array(holdout.ids)
    item_scores: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for scorer in scorers:
        if scorer.item_wise:
            kind = scorer.feature_kind
            item_scores[scorer.name] = (scorer.score_items(holdout.take(kind)), scorer.score_items(probes.take(kind)))

    def run(size: int, trial: int) -> List[TrialRecord]:
        rng = counter_rng(seed, size, trial)
        distractors = rng.choice(len(holdout), size - 1, replace=False)
        distractors.setflags(write=False)
        probe = int(rng.integers(len(probes)))
        probe_id = probes.ids[probe]
        records = []
        for scorer in scorers:
            if scorer.item_wise:
                holdout_scores, probe_scores = item_scores[scorer.name]
                p, d = probe_scores[probe], holdout_scores[distractors]
            else:
                kind = scorer.feature_kind
                members = np.vstack([probes.take(kind)[probe][None], holdout.take(kind)[distractors]])
                scores = scorer.score_set(members)
                p, d = scores[0], scores[1:]
            rank = probe_rank(p, probe_id, d, holdout_ids[distractors])
            records.append(
                TrialRecord(trial, size, scorer.name, probe_id, probe_kind, distractors, holdout.ids, rank)
            )
        return records

    def run_chunk(chunk: Tuple[int, range]) -> List[TrialRecord]:
        size, span = chunk
        return [record for trial in span for record in run(size, trial)]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for size in sizes:
            logger.info("%s trials: size %d, %d trials, %d scorer(s)", probe_kind.value, size, trials, len(scorers))
            chunks = [(size, range(start, min(start + TRIAL_CHUNK, trials))) for start in range(0, trials, TRIAL_CHUNK)]
            for records in pool.map(run_chunk, chunks):
                yield from records


class TrialTally:
    """
    Streaming aggregate of trial records: recall counts per (method, size) and
    identification counts per (method, probe, size).

    Mutable; fed by one thread.
    """

    def __init__(self):
        self._methods: List[str] = []
        self._sizes: List[int] = []
        self._probe_kind: Optional[ProbeKind] = None
        self._trials: Dict[Tuple[str, int], int] = defaultdict(int)
        self._hits: Dict[Tuple[str, int], np.ndarray] = defaultdict(lambda: np.zeros(len(RECALL_LEVELS), dtype=np.int64))
        self._probes: Dict[Tuple[str, str, int], np.ndarray] = defaultdict(
            lambda: np.zeros(1 + len(RECALL_LEVELS), dtype=np.int64)
        )

    def add(self, record: TrialRecord) -> None:
        if self._probe_kind is None:
            self._probe_kind = record.probe_kind
        elif record.probe_kind is not self._probe_kind:
            raise RejectedInputError("cannot tally anomaly and control trials together")
        if record.method not in self._methods:
            self._methods.append(record.method)
        if record.size not in self._sizes:
            self._sizes.append(record.size)
        hits = np.array([record.hit(k) for k in RECALL_LEVELS], dtype=np.int64)
        self._trials[(record.method, record.size)] += 1
        self._hits[(record.method, record.size)] += hits
        self._probes[(record.method, record.probe_id, record.size)] += np.concatenate([[1], hits])

    def add_all(self, records: Iterable[TrialRecord]) -> "TrialTally":
        for record in records:
            self.add(record)
        return self

    def curves(self) -> List[RecallCurve]:
        """One curve per method, in order of first appearance."""
        out = []
        for method in self._methods:
            counts = [self._trials[(method, size)] for size in self._sizes]
            if len(set(counts)) != 1:
                raise RejectedInputError(f"{method}: unequal trial counts across sizes {counts}")
            recalls = [
                tuple(float(self._hits[(method, size)][i] / counts[0]) for size in self._sizes)
                for i in range(len(RECALL_LEVELS))
            ]
            out.append(RecallCurve(method, self._probe_kind, tuple(self._sizes), *recalls, trials=counts[0]))
        return out

    def frequencies(self) -> "FrequencyTable":
        return FrequencyTable({key: tuple(int(v) for v in counts) for key, counts in self._probes.items()})


def run_set_trials(
    scorers: Sequence[SetScorer],
    holdout: ItemPool,
    probes: ItemPool,
    sizes: Sequence[int],
    trials: int,
    seed: int,
    threads: int = 1,
) -> List[RecallCurve]:
    """
    Recall curves of anomaly probes hidden among holdout distractors.

    @returns one curve per scorer, in scorer order
    @raises RejectedInputError: if the pools are too small, empty or overlap
    """
    records = iter_trial_records(scorers, holdout, probes, sizes, trials, seed, ProbeKind.ANOMALY, threads)
    return TrialTally().add_all(records).curves()


def run_control(
    scorers: Sequence[SetScorer],
    holdout: ItemPool,
    controls: ItemPool,
    sizes: Sequence[int],
    trials: int,
    seed: int,
    threads: int = 1,
) -> List[RecallCurve]:
    """
    run_set_trials with typical control probes. With the same seed the distractor sets
    are exactly those of the anomaly run.
    """
    records = iter_trial_records(scorers, holdout, controls, sizes, trials, seed, ProbeKind.CONTROL, threads)
    return TrialTally().add_all(records).curves()


@dataclass(frozen=True)
class FrequencyTable:
    """
    How often each probe was identified when it was drawn.

    counts maps (method, probe id, size) to (appearances, hits@1, hits@5, hits@10).
    """

    counts: Mapping[Tuple[str, str, int], Tuple[int, ...]]

    def frequency(self, method: str, probe_id: str, size: int, k: int) -> Optional[float]:
        """@returns the fraction of the probe's trials with rank <= k, or None if it never appeared"""
        counts = self.counts.get((method, probe_id, size))
        if not counts or counts[0] == 0:
            return None
        return counts[1 + RECALL_LEVELS.index(k)] / counts[0]

    def to_text(self) -> str:
        lines = ["method\tprobe\tsize\ttrials\tat1\tat5\tat10"]
        for (method, probe_id, size), counts in sorted(self.counts.items()):
            freqs = "\t".join(f"{c / counts[0]:.6f}" for c in counts[1:])
            lines.append(f"{method}\t{probe_id}\t{size}\t{counts[0]}\t{freqs}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> "FrequencyTable":
        lines = [line for line in text.split("\n") if line]
        if not lines or not lines[0].startswith("method\tprobe\tsize"):
            raise RejectedInputError("frequency file must start with its header")
        counts = {}
        for number, line in enumerate(lines[1:], start=2):
            fields = line.split("\t")
            if len(fields) != 7:
                raise RejectedInputError(f"record {number}: expected 7 fields, got {len(fields)}")
            trials = int(fields[3])
            hits = tuple(int(round(float(f) * trials)) for f in fields[4:])
            counts[(fields[0], fields[1], int(fields[2]))] = (trials,) + hits
        return FrequencyTable(counts)


def identification_frequencies(records: Iterable[TrialRecord]) -> FrequencyTable:
    """Per-probe identification frequencies at 1, 5 and 10 from a record stream."""
    return TrialTally().add_all(records).frequencies()


@dataclass(frozen=True)
class DecileEntry:
    decile: int
    image_id: str
    score: float
    frequencies: Mapping[Tuple[int, int], Optional[float]]


def decile_report(
    ids: Sequence[str],
    scores: Sequence[float],
    frequencies: Optional[FrequencyTable] = None,
    method: str = "linf",
    sizes: Sequence[int] = (),
) -> List[DecileEntry]:
    """
    The median member of each score decile, lowest decile first.

    Images are sorted by score ascending with ties broken by id ascending and split
    into ten near-equal groups; the median member of a group of even length is the
    lower of the two middle members.

    @param frequencies: optional identification frequencies to attach for each of sizes
    @raises RejectedInputError: on fewer than ten images
    """
    if len(ids) != len(scores):
        raise RejectedInputError(f"{len(ids)} ids for {len(scores)} scores")
    if len(ids) < 10:
        raise RejectedInputError(f"decile report needs at least 10 images, got {len(ids)}")
    order = sorted(range(len(ids)), key=lambda i: (float(scores[i]), ids[i]))
    entries = []
    for decile, group in enumerate(np.array_split(np.array(order), 10), start=1):
        member = int(group[(len(group) - 1) // 2])
        image_id = ids[member]
        freqs = {}
        if frequencies is not None:
            freqs = {(size, k): frequencies.frequency(method, image_id, size, k) for size in sizes for k in RECALL_LEVELS}
        entries.append(DecileEntry(decile, image_id, float(scores[member]), freqs))
    return entries


def decile_manifest_text(entries: Sequence[DecileEntry], paths: Mapping[str, str], sizes: Sequence[int] = ()) -> str:
    """Montage manifest: decile, image id, path, score and identification frequencies."""
    header = ["decile", "id", "path", "score"] + [f"n{size}@{k}" for size in sizes for k in RECALL_LEVELS]
    lines = ["\t".join(header)]
    for entry in entries:
        freqs = [entry.frequencies.get((size, k)) for size in sizes for k in RECALL_LEVELS]
        cells = ["NA" if f is None else f"{f:.6f}" for f in freqs]
        row = [str(entry.decile), entry.image_id, paths.get(entry.image_id, ""), f"{entry.score:.9g}"] + cells
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def write_recall_table(curves: Sequence[RecallCurve]) -> str:
    """Recall table text: one row per method, probe kind, size and recall level."""
    lines = ["method\tprobe_kind\tsize\tk\trecall\ttrials"]
    for curve in curves:
        for index, size in enumerate(curve.sizes):
            for k in RECALL_LEVELS:
                lines.append(
                    f"{curve.method}\t{curve.probe_kind.value}\t{size}\t{k}\t{curve.recall(k)[index]:.6f}\t{curve.trials}"
                )
    return "\n".join(lines) + "\n"


def read_recall_table(text: str) -> List[RecallCurve]:
    """
    Parse write_recall_table output.

    @raises RejectedInputError: on a malformed table
    """
    lines = [line for line in text.split("\n") if line]
    if not lines or lines[0] != "method\tprobe_kind\tsize\tk\trecall\ttrials":
        raise RejectedInputError("recall table must start with its header")
    cells: Dict[Tuple[str, str], Dict[int, Dict[int, float]]] = {}
    trials: Dict[Tuple[str, str], int] = {}
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 6:
            raise RejectedInputError(f"record {number}: expected 6 fields, got {len(fields)}")
        key = (fields[0], fields[1])
        cells.setdefault(key, {}).setdefault(int(fields[2]), {})[int(fields[3])] = float(fields[4])
        trials[key] = int(fields[5])
    curves = []
    for (method, kind), by_size in cells.items():
        sizes = tuple(by_size)
        try:
            recalls = [tuple(by_size[size][k] for size in sizes) for k in RECALL_LEVELS]
        except KeyError as err:
            raise RejectedInputError(f"{method}/{kind}: missing recall level {err}") from None
        curves.append(RecallCurve(method, ProbeKind(kind), sizes, *recalls, trials=trials[(method, kind)]))
    return curves


async def read_recall_table_file(path) -> List[RecallCurve]:
    async with aiofiles.open(Path(path), "r", encoding="utf-8") as f:
        text = await f.read()
    return read_recall_table(text)


def recall_vs_size_table(curve: RecallCurve) -> str:
    """One row per set size with recall at 1, 5 and 10."""
    lines = ["size\t" + "\t".join(f"recall@{k}" for k in RECALL_LEVELS)]
    for index, size in enumerate(curve.sizes):
        lines.append(f"{size}\t" + "\t".join(f"{curve.recall(k)[index]:.6f}" for k in RECALL_LEVELS))
    return "\n".join(lines) + "\n"


class AttributeMethod(str, Enum):
    L1_LOGISTIC = "l1-logistic"
    MAHALANOBIS = "mahalanobis"
    LINF = "linf"


@dataclass(frozen=True)
class AttributeRow:
    """One cell of the attribute table; report is None where the method does not apply."""

    method: AttributeMethod
    feature_kind: FeatureKind
    report: Optional[MetricReport]


def run_attribute_experiment(
    reference: Mapping[FeatureKind, np.ndarray],
    test: Mapping[FeatureKind, np.ndarray],
    labels,
    split_seed: int,
    kinds: Sequence[FeatureKind] = tuple(FeatureKind),
    methods: Sequence[AttributeMethod] = tuple(AttributeMethod),
    trim: int = 1,
) -> List[AttributeRow]:
    """
    Score attribute detection with every requested (method, feature kind) pair.

    The labeled test images are split in half, stratified by label. The supervised
    oracle selects and fits an L1-regularized logistic model on the first half; every
    method is evaluated on the second half. Mahalanobis moments come from the
    reference (attribute-negative training) features, diagonal for residual kinds
    and full with shrinkage for codes. L-infinity applies to residual kinds only.

    @param reference: features of attribute-negative training images, per kind
    @param test: features of the labeled test images, per kind, rows aligned with labels
    @param labels: 1 where the image has the attribute
    @raises RejectedInputError: if labels are missing, single-class or misaligned
    """
    if labels is None:
        raise RejectedInputError("attribute experiment needs attribute labels")
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) == 0:
        raise RejectedInputError("attribute experiment needs attribute labels")
    y = y.astype(np.int64)
    fit_idx, eval_idx = stratified_split(y, 0.5, np.random.default_rng(split_seed))

    rows = []
    for method in methods:
        method = AttributeMethod(method)
        for kind in kinds:
            kind = FeatureKind(kind)
            if kind not in test or kind not in reference:
                raise RejectedInputError(f"no {kind.value} features for the attribute experiment")
            x = np.asarray(test[kind], dtype=np.float64)
            if x.shape[0] != len(y):
                raise RejectedInputError(f"{kind.value}: {x.shape[0]} feature rows for {len(y)} labels")
            if method is AttributeMethod.L1_LOGISTIC:
                pipeline = select_l1_logistic(x[fit_idx], y[fit_idx], derive_seed(split_seed, f"l1-logistic:{kind.value}"))
                report = evaluate(pipeline, x[eval_idx], y[eval_idx])
            elif method is AttributeMethod.MAHALANOBIS:
                moments = robust_moments(reference[kind], trim=trim, full=not kind.is_residual)
                report = score_report(mahalanobis_scores(x[eval_idx], moments), y[eval_idx])
            elif kind.is_residual:
                report = score_report(linf_scores(x[eval_idx]), y[eval_idx])
            else:
                report = None
            logger.info("attribute %s/%s: %s", method.value, kind.value, report)
            rows.append(AttributeRow(method, kind, report))
    return rows


def attribute_table_text(rows: Sequence[AttributeRow]) -> str:
    lines = ["method\tfeature\taccuracy\tauc\tpositives\tnegatives"]
    for row in rows:
        report = row.report
        if report is None:
            lines.append(f"{row.method.value}\t{row.feature_kind.value}\tNA\tNA\tNA\tNA")
            continue
        accuracy = "NA" if report.accuracy is None else f"{report.accuracy:.6f}"
        lines.append(
            f"{row.method.value}\t{row.feature_kind.value}\t{accuracy}\t{report.auc:.6f}\t{report.positives}\t{report.negatives}"
        )
    return "\n".join(lines) + "\n"
