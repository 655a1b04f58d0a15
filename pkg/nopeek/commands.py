"""
Pipeline stages behind the command-line interface.

Each stage reads what earlier stages left in the run directory, writes its own
artifacts atomically and finishes with a provenance record. No stage modifies
its inputs.
"""

import asyncio
import dataclasses
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import aiofiles
import numpy as np
import yaml

from .artifacts import RunLayout, atomic_write_text, derive_seed, require, write_provenance
from .autoencoder import Checkpoint
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import (
    ImageKind,
    Manifest,
    ManifestRecord,
    Split,
    generate_suite,
    load_corpus,
    load_directory,
    write_image,
)
from .errors import ConfigError, EmptyGridError, MissingArtifactError, RejectedInputError
from .experiments import (
    AttributeMethod,
    AttributeRow,
    FrequencyTable,
    ItemPool,
    ProbeKind,
    RecallCurve,
    TrialTally,
    attribute_table_text,
    decile_manifest_text,
    decile_report,
    iter_trial_records,
    read_recall_table_file,
    recall_vs_size_table,
    run_attribute_experiment,
    write_recall_table,
)
from .features import FeatureKind, FeatureTable, extract_feature_matrix, residual_canvas
from .masking import BoxGrid, grid_boxes
from .scorers import Method, ScoreTable, SetScorer, fit_scorers, parse_methods
from .scoring import export_lfdr
from .trainer import train as train_autoencoder

logger = logging.getLogger(__name__)

CORPORA = ("main", "attr")

# which splits of each corpus are turned into features
FEATURE_SPLITS = {"main": (Split.HOLDOUT, Split.PROBE), "attr": (Split.TRAIN, Split.HOLDOUT)}

INGEST_PARTS = (
    ("train", Split.TRAIN, ImageKind.TYPICAL),
    ("holdout", Split.HOLDOUT, ImageKind.TYPICAL),
    ("anomaly", Split.PROBE, ImageKind.ANOMALY),
    ("control", Split.PROBE, ImageKind.CONTROL),
)


def _layout(config: RunConfig) -> RunLayout:
    return RunLayout(Path(config.out))


def _finish(config: RunConfig, command: str) -> Path:
    layout = _layout(config)
    atomic_write_text(layout.provenance_dir / f"{command}.yaml", yaml.safe_dump(config.to_dict(), sort_keys=True))
    return write_provenance(layout.root, command, config.digest(), config.seed)


def _train_stage(corpus: str) -> str:
    return "train" if corpus == "main" else f"train --corpus {corpus}"


async def _manifest(layout: RunLayout, corpus: str) -> Manifest:
    path = layout.main_manifest if corpus == "main" else layout.attr_manifest
    return await Manifest.parse_from_file(require(path, "gen-data"))


async def _read_text(path: Path) -> str:
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        return await f.read()


def _grid(config: RunConfig) -> BoxGrid:
    try:
        return grid_boxes(config.extents[:2], config.grid.box, config.grid.stride, config.grid.exclusion)
    except EmptyGridError as err:
        raise ConfigError("grid", str(err)) from None


def _kinds_for(methods: Sequence[Method]) -> Tuple[FeatureKind, ...]:
    return tuple(dict.fromkeys(m.feature_kind for m in methods))


async def gen_data(config: RunConfig) -> Dict[str, Manifest]:
    """
    Write the data suite under <out>/data.

    @param config: run configuration; data.source_dir, when set, supplies the main
                   corpus and only the attribute corpus is synthesized
    @returns the written manifests by corpus name
    """
    layout = _layout(config)
    counts = config.data.counts()
    if config.data.source_dir is not None:
        counts = dataclasses.replace(counts, train=0, holdout=0, anomalies=0, controls=0)
    manifests = await asyncio.to_thread(
        generate_suite, layout.data_dir, counts, config.seed, config.extents, config.threads
    )
    if config.data.source_dir is not None:
        manifests["main"] = await ingest_directory(Path(config.data.source_dir), layout.data_dir / "main", config.extents)
    _finish(config, "gen-data")
    return manifests


async def ingest_directory(source: Path, out_dir: Path, extents: Tuple[int, int, int]) -> Manifest:
    """
    Copy a user image tree into the run as its main corpus.

    @param source: directory with train/, holdout/, anomaly/ and control/ subdirectories
    @param out_dir: corpus directory; images go to out_dir/images, the manifest to
                    out_dir/manifest.tsv
    @param extents: every image is converted and resized to these extents
    @raises MissingArtifactError: if a subdirectory is missing
    @raises EmptyManifestError: if a subdirectory holds no decodable image
    """
    suffix = ".pgm" if extents[2] == 1 else ".ppm"
    records: List[ManifestRecord] = []
    for name, split, kind in INGEST_PARTS:
        corpus = await load_directory(require(source / name, "data.source_dir"), extents, split, kind)
        for record, image in zip(corpus.manifest, corpus.images):
            image_id = f"{name}-{record.image_id.replace('/', '-')}"
            relative = f"images/{image_id}{suffix}"
            write_image(out_dir / relative, image)
            records.append(ManifestRecord(image_id, relative, split, kind))
    manifest = Manifest(out_dir, tuple(records))
    manifest.save(out_dir / "manifest.tsv")
    return manifest


async def train(config: RunConfig, corpus: str = "main") -> Checkpoint:
    """
    Train the inpainting autoencoder on the typical training split of a corpus.

    Writes models/<corpus>.npae and the per-epoch loss history next to it.

    @param corpus: "main" or "attr"
    @raises MissingArtifactError: if gen-data has not run
    @raises TrainingDivergedError: if the loss stops being finite
    """
    layout = _layout(config)
    manifest = await _manifest(layout, corpus)
    images = await load_corpus(manifest.select(Split.TRAIN, ImageKind.TYPICAL), config.extents)
    hyper = config.train.hyper(derive_seed(config.seed, f"train:{corpus}"))
    logger.info("training on %d %s images for %d epoch(s)", len(images), corpus, hyper.epochs)
    ckpt = await asyncio.to_thread(train_autoencoder, images.images, config.arch, hyper)
    save_checkpoint(ckpt, layout.model(corpus))
    history = ["epoch\tloss"] + [f"{epoch}\t{loss:.9g}" for epoch, loss in enumerate(ckpt.metadata.loss_history)]
    atomic_write_text(layout.loss_history(corpus), "\n".join(history) + "\n")
    _finish(config, f"train-{corpus}")
    return ckpt


async def features(
    config: RunConfig, corpus: str = "main", kinds: Sequence[FeatureKind] = ()
) -> Dict[FeatureKind, FeatureTable]:
    """
    Extract feature files for the evaluated splits of a corpus.

    @param kinds: feature kinds to extract; empty means features.kinds
    @returns the written tables by kind
    @raises MissingArtifactError: if gen-data or train has not run
    """
    layout = _layout(config)
    manifest = await _manifest(layout, corpus)
    ckpt = load_checkpoint(require(layout.model(corpus), _train_stage(corpus)))
    chosen = tuple(r for r in manifest if r.split in FEATURE_SPLITS[corpus])
    images = await load_corpus(Manifest(manifest.root, chosen), config.extents)
    grid = _grid(config)
    tables = {}
    for kind in kinds or config.features.kinds:
        kind = FeatureKind(kind)
        values = await asyncio.to_thread(extract_feature_matrix, ckpt, images.images, grid, kind, config.threads)
        table = FeatureTable(kind, grid.describe(), images.ids, values)
        table.save(layout.features(kind.value, corpus))
        tables[kind] = table
    _finish(config, f"features-{corpus}")
    return tables


async def _feature_tables(
    config: RunConfig, corpus: str, kinds: Sequence[FeatureKind], extract_missing: bool
) -> Dict[FeatureKind, FeatureTable]:
    layout = _layout(config)
    missing = [k for k in kinds if not layout.features(k.value, corpus).exists()]
    if missing and extract_missing:
        logger.info("no %s features for %s yet; extracting", ", ".join(k.value for k in missing), corpus)
        await features(config, corpus, missing)
    grid = _grid(config).describe()
    tables = {}
    for kind in kinds:
        table = await FeatureTable.parse_from_file(require(layout.features(kind.value, corpus), "features"))
        if kind.is_residual and table.grid_description != grid:
            raise ConfigError("grid", f"{kind.value} features were extracted with {table.grid_description}; rerun features")
        tables[kind] = table
    return tables


def _pool(manifest: Manifest, tables: Mapping[FeatureKind, FeatureTable], split: Split, kind: ImageKind) -> ItemPool:
    ids = manifest.select(split, kind).ids
    return ItemPool(ids, {k: t.rows(ids) for k, t in tables.items()})


def _test_ids(manifest: Manifest) -> Tuple[str, ...]:
    return manifest.select(Split.HOLDOUT).ids + manifest.select(Split.PROBE).ids


def _fit(
    config: RunConfig, methods: Sequence[Method], manifest: Manifest, tables: Mapping[FeatureKind, FeatureTable]
) -> List[SetScorer]:
    holdout_ids = manifest.select(Split.HOLDOUT, ImageKind.TYPICAL).ids
    test_ids = _test_ids(manifest)
    reference = {k: t.rows(holdout_ids) for k, t in tables.items()}
    pooled = {k: t.rows(test_ids) for k, t in tables.items()}
    return fit_scorers(methods, reference, pooled, config.scoring.trim, config.scoring.shrinkage)


async def score(config: RunConfig) -> List[ScoreTable]:
    """
    Score every holdout and probe image with every configured method.

    The set-dependent method scores the whole test collection as one set. lfdr
    methods also export their fitted curve.

    @raises MissingArtifactError: if a needed feature file is missing
    """
    layout = _layout(config)
    methods = parse_methods(config.scoring.methods)
    manifest = await _manifest(layout, "main")
    tables = await _feature_tables(config, "main", _kinds_for(methods), extract_missing=False)
    test_ids = _test_ids(manifest)
    written = []
    for scorer in _fit(config, methods, manifest, tables):
        x = tables[scorer.feature_kind].rows(test_ids)
        values = scorer.score_items(x) if scorer.item_wise else scorer.score_set(x)
        table = ScoreTable(scorer.name, test_ids, values)
        table.save(layout.scores(scorer.name))
        if scorer.lfdr is not None:
            atomic_write_text(layout.scores_dir / f"{scorer.name}-curve.tsv", export_lfdr(scorer.lfdr))
        written.append(table)
    _finish(config, "score")
    return written


def probe_scores_text(scorers: Sequence[SetScorer], manifest: Manifest, tables: Mapping[FeatureKind, FeatureTable]) -> str:
    """Item-wise scores of every test image, one column per method."""
    item_wise = [s for s in scorers if s.item_wise]
    ids = _test_ids(manifest)
    kinds = {r.image_id: r.kind.value for r in manifest}
    columns = [s.score_items(tables[s.feature_kind].rows(ids)) for s in item_wise]
    lines = ["id\tkind\t" + "\t".join(s.name for s in item_wise)]
    for i, image_id in enumerate(ids):
        lines.append(f"{image_id}\t{kinds[image_id]}\t" + "\t".join(f"{c[i]:.9g}" for c in columns))
    return "\n".join(lines) + "\n"


def parse_probe_scores(text: str) -> Tuple[Tuple[str, ...], Tuple[ImageKind, ...], Dict[str, np.ndarray]]:
    """
    @returns (image ids, image kinds, scores by method)
    @raises RejectedInputError: on a malformed table
    """
    lines = [line for line in text.split("\n") if line]
    if not lines or not lines[0].startswith("id\tkind"):
        raise RejectedInputError("probe score file must start with its header")
    methods = lines[0].split("\t")[2:]
    ids, kinds, rows = [], [], []
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 2 + len(methods):
            raise RejectedInputError(f"record {number}: expected {2 + len(methods)} fields, got {len(fields)}")
        try:
            kinds.append(ImageKind(fields[1]))
            rows.append([float(v) for v in fields[2:]])
        except ValueError:
            raise RejectedInputError(f"record {number}: invalid kind or score") from None
        ids.append(fields[0])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(methods))
    return tuple(ids), tuple(kinds), {m: values[:, j] for j, m in enumerate(methods)}


async def eval_sets(config: RunConfig) -> Tuple[List[RecallCurve], List[RecallCurve]]:
    """
    Anomaly and control set trials with a shared seed schedule.

    Writes the recall table, per-probe identification frequencies and the
    item-wise scores of every test image. Missing feature files are extracted
    first.

    @returns (anomaly curves, control curves), one per method
    @raises MissingArtifactError: if gen-data or train has not run
    @raises RejectedInputError: if the holdout pool is smaller than a set
    """
    layout = _layout(config)
    methods = parse_methods(config.scoring.methods)
    manifest = await _manifest(layout, "main")
    tables = await _feature_tables(config, "main", _kinds_for(methods), extract_missing=True)
    scorers = _fit(config, methods, manifest, tables)
    holdout = _pool(manifest, tables, Split.HOLDOUT, ImageKind.TYPICAL)
    seed = derive_seed(config.seed, "eval-sets")
    sizes, trials = config.experiment.set_sizes, config.experiment.trials

    tallies = []
    for kind, probe_kind in ((ImageKind.ANOMALY, ProbeKind.ANOMALY), (ImageKind.CONTROL, ProbeKind.CONTROL)):
        probes = _pool(manifest, tables, Split.PROBE, kind)
        records = iter_trial_records(scorers, holdout, probes, sizes, trials, seed, probe_kind, config.threads)
        tallies.append(await asyncio.to_thread(TrialTally().add_all, records))
    anomaly, control = tallies[0].curves(), tallies[1].curves()
    for a, c in zip(anomaly, control):
        logger.info(
            "%s recall@1 anomaly/control: %s",
            a.method,
            ", ".join(f"n={n} {x:.3f}/{y:.3f}" for n, x, y in zip(a.sizes, a.recall_at_1, c.recall_at_1)),
        )

    atomic_write_text(layout.recall_table, write_recall_table(anomaly + control))
    frequencies = FrequencyTable({**tallies[0].frequencies().counts, **tallies[1].frequencies().counts})
    atomic_write_text(layout.frequencies, frequencies.to_text())
    atomic_write_text(layout.probe_scores, probe_scores_text(scorers, manifest, tables))
    _finish(config, "eval-sets")
    return anomaly, control


async def eval_attr(config: RunConfig) -> List[AttributeRow]:
    """
    The proxy-attribute experiment on the attribute corpus.

    The reference features are those of the attribute-negative training split the
    attribute model was trained on; the labeled test split is scored.

    @raises MissingArtifactError: if the attribute corpus or model is missing
    @raises RejectedInputError: if no test image carries the attribute
    """
    layout = _layout(config)
    manifest = await _manifest(layout, "attr")
    require(layout.model("attr"), _train_stage("attr"))
    kinds = tuple(FeatureKind(k) for k in config.attribute.kinds)
    tables = await _feature_tables(config, "attr", kinds, extract_missing=True)
    train_ids = manifest.select(Split.TRAIN).ids
    test = manifest.select(Split.HOLDOUT)
    labels = np.array([int(r.has(config.attribute.flag)) for r in test], dtype=np.int64)
    if not labels.any():
        raise RejectedInputError(f"no test image carries the '{config.attribute.flag}' attribute")
    rows = await asyncio.to_thread(
        run_attribute_experiment,
        {k: t.rows(train_ids) for k, t in tables.items()},
        {k: t.rows(test.ids) for k, t in tables.items()},
        labels,
        derive_seed(config.seed, "eval-attr"),
        kinds,
        tuple(AttributeMethod(m) for m in config.attribute.methods),
        config.scoring.trim,
    )
    atomic_write_text(layout.attribute_table, attribute_table_text(rows))
    _finish(config, "eval-attr")
    return rows


async def report(config: RunConfig) -> List[Path]:
    """
    Turn evaluation results into report files under <out>/report:

        recall-<method>-<probe kind>.tsv   recall at 1, 5 and 10 against set size
        deciles-<image kind>.tsv           median image of each score decile, ranked
                                           within the typical, anomaly and control
                                           images separately; probe kinds add their
                                           identification frequencies
        residuals/<id>.pgm                 residual maps of the first few probes, when
                                           the main model is available

    @returns paths written
    @raises MissingArtifactError: if eval-sets has not run or left no results
    """
    layout = _layout(config)
    curves = await read_recall_table_file(require(layout.recall_table, "eval-sets"))
    if not curves:
        raise MissingArtifactError(str(layout.recall_table), "eval-sets")
    written = []
    for curve in curves:
        path = layout.report_dir / f"recall-{curve.method}-{curve.probe_kind.value}.tsv"
        atomic_write_text(path, recall_vs_size_table(curve))
        written.append(path)

    ids, kinds, scores = parse_probe_scores(await _read_text(require(layout.probe_scores, "eval-sets")))
    method = config.report.map_method
    if method not in scores:
        raise ConfigError("report.map_method", f"eval-sets produced no '{method}' scores")
    frequencies = FrequencyTable.parse(await _read_text(require(layout.frequencies, "eval-sets")))
    manifest = await _manifest(layout, "main")
    root = layout.main_manifest.parent.relative_to(layout.root).as_posix()
    paths = {r.image_id: f"{root}/{r.path}" for r in manifest}
    for kind in ImageKind:
        members = [i for i, k in enumerate(kinds) if k is kind]
        if len(members) < 10:
            logger.warning("only %d %s image(s); no decile manifest", len(members), kind.value)
            continue
        # holdout images are never probes, so only probe kinds carry frequencies
        sizes = () if kind is ImageKind.TYPICAL else curves[0].sizes
        entries = decile_report(
            [ids[i] for i in members], scores[method][members], frequencies, method, sizes
        )
        path = layout.report_dir / f"deciles-{kind.value}.tsv"
        atomic_write_text(path, decile_manifest_text(entries, paths, sizes))
        written.append(path)

    if config.report.residual_maps > 0 and layout.model("main").exists():
        written += await _residual_maps(config, layout, manifest)
    _finish(config, "report")
    return written


async def _residual_maps(config: RunConfig, layout: RunLayout, manifest: Manifest) -> List[Path]:
    ckpt = load_checkpoint(layout.model("main"))
    grid = _grid(config)
    count = config.report.residual_maps
    chosen = tuple(r for kind in (ImageKind.ANOMALY, ImageKind.CONTROL) for r in manifest.select(Split.PROBE, kind).records[:count])
    if not chosen:
        return []
    corpus = await load_corpus(Manifest(manifest.root, chosen), config.extents)
    extension = ".pgm" if config.extents[2] == 1 else ".ppm"
    written = []
    for record, image in zip(corpus.manifest, corpus.images):
        canvas = await asyncio.to_thread(residual_canvas, ckpt, image, grid)
        # residuals in [0, 2] map onto the full 8-bit range
        pictures = ((f"-input{extension}", image), ("-residual.pgm", (canvas - 1.0)[:, :, None]))
        for name, picture in pictures:
            path = layout.report_dir / "residuals" / f"{record.image_id}{name}"
            write_image(path, picture)
            written.append(path)
    return written
