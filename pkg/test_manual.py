#!/usr/bin/env python3
"""Manual walk-through of the pipeline on a tiny in-memory corpus."""

import asyncio
import tempfile
from pathlib import Path

import numpy as np

from nopeek.autoencoder import ArchConfig, inpaint
from nopeek.checkpoint import load_checkpoint, save_checkpoint
from nopeek.dataset import ImageKind, Split, generate_corpus, load_corpus
from nopeek.experiments import ItemPool, run_control, run_set_trials
from nopeek.features import FeatureKind, extract_feature_matrix
from nopeek.masking import Box, grid_boxes
from nopeek.scorers import Method, fit_scorers
from nopeek.trainer import TrainHyper, train

EXTENTS = (16, 16, 1)
ARCH = ArchConfig(
    input_extents=EXTENTS, encoder_channels=(4, 8), decoder_channels=(8, 4), decoder_base_channels=4, code_dim=8
)


async def walk_through_data(root: Path):
    print("=" * 60)
    print("1. Generate and reload a small corpus")
    print("-" * 60)
    typical = generate_corpus(root, 48, seed=1, kind=ImageKind.TYPICAL, extents=EXTENTS, split=Split.TRAIN)
    anomalies = generate_corpus(
        root, 8, seed=2, kind=ImageKind.ANOMALY, extents=EXTENTS, split=Split.PROBE, prefix="anomaly-"
    )
    manifest = typical.concat(anomalies)
    manifest.save(root / "manifest.tsv")
    corpus = await load_corpus(manifest, EXTENTS)
    print(f"{len(corpus)} images, first anomaly: {anomalies.records[0].attributes}")
    assert corpus.images.shape == (56,) + EXTENTS
    assert np.all(np.abs(corpus.images) <= 1)
    print("✓ images decoded into [-1, 1]")
    return corpus


def walk_through_training(corpus, root: Path):
    print("\n2. Train for two epochs and round-trip the checkpoint")
    print("-" * 60)
    typical = corpus.subset(Split.TRAIN).images
    ckpt = train(typical, ARCH, TrainHyper(epochs=2, batch_size=16, seed=3, step_size=3e-3, box_sizes=(3, 6)))
    print(f"loss history: {[round(v, 4) for v in ckpt.metadata.loss_history]}")
    save_checkpoint(ckpt, root / "model.npae")
    restored = load_checkpoint(root / "model.npae")
    assert restored.identical(ckpt)
    print("✓ checkpoint restored bit-identically")

    image = typical[0]
    box = Box(4, 4, 6, 6)
    noisy = image.copy()
    noisy[box.slices()] = np.random.default_rng(0).uniform(-1, 1, noisy[box.slices()].shape)
    assert np.array_equal(inpaint(ckpt, image, box), inpaint(ckpt, noisy, box))
    print("✓ inpainting ignores the pixels inside the box")
    return ckpt


def walk_through_scoring(corpus, ckpt):
    print("\n3. Features, scorers and set trials")
    print("-" * 60)
    grid = grid_boxes(EXTENTS[:2], (4, 4), 4, 4)
    holdout = corpus.subset(Split.TRAIN)
    probes = corpus.subset(Split.PROBE)
    kinds = (FeatureKind.INPAINT_RESIDUAL, FeatureKind.RAW_RESIDUAL)
    holdout_features = {k: extract_feature_matrix(ckpt, holdout.images, grid, k) for k in kinds}
    probe_features = {k: extract_feature_matrix(ckpt, probes.images, grid, k) for k in kinds}
    print(f"{len(grid)} grid boxes, feature matrix {holdout_features[kinds[0]].shape}")

    scorers = fit_scorers((Method.LINF, Method.EQUIVARIANT, Method.MAHALANOBIS, Method.RAW_LINF), holdout_features, holdout_features)
    holdout_pool = ItemPool(holdout.ids, holdout_features)
    probe_pool = ItemPool(probes.ids, probe_features)
    control_pool = ItemPool(holdout.ids[-8:], {k: v[-8:] for k, v in holdout_features.items()})
    reference_pool = ItemPool(holdout.ids[:-8], {k: v[:-8] for k, v in holdout_features.items()})
    for curve in run_set_trials(scorers, holdout_pool, probe_pool, (8, 16), 200, seed=4):
        print(f"{curve.method:12s} anomaly recall@1 {curve.recall_at_1}")
        assert all(a <= b for a, b in zip(curve.recall_at_1, curve.recall_at_5))
    for curve in run_control(scorers, reference_pool, control_pool, (8, 16), 200, seed=4):
        print(f"{curve.method:12s} control recall@1 {curve.recall_at_1}")
    print("✓ recall curves are nested")


async def main():
    """Run the whole walk-through in a scratch directory."""
    try:
        with tempfile.TemporaryDirectory() as scratch:
            root = Path(scratch)
            corpus = await walk_through_data(root)
            ckpt = walk_through_training(corpus, root)
            walk_through_scoring(corpus, ckpt)

        print("\n" + "=" * 60)
        print(" WALK-THROUGH COMPLETE")
        print("=" * 60)

    except Exception as e:
        print(f"\n WALK-THROUGH FAILED: {e}")
        raise


if __name__ == "__main__":
    asyncio.run(main())
