"""
Anomaly features.

The main feature is the per-box inpainting residual: for each box b of a grid,
the mean absolute difference between D(E(mask_b(Q))) and Q over the pixels and
channels inside b. Two baselines share the same machinery: the raw residual of
the unmasked reconstruction D(E(Q)) (which lets the network peek at the box),
and the code E(Q) itself.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import aiofiles
import numpy as np

from .artifacts import PathLike, atomic_write_text
from .autoencoder import Checkpoint, encode, reconstruct_batch
from .errors import RejectedInputError
from .masking import Box, BoxGrid, apply_box_mask, apply_complement_mask

logger = logging.getLogger(__name__)


class FeatureKind(str, Enum):
    INPAINT_RESIDUAL = "inpaint-residual"
    RAW_RESIDUAL = "raw-residual"
    CODE = "code"

    @property
    def is_residual(self) -> bool:
        return self is not FeatureKind.CODE


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """
    Feature values of one image.

    Immutable.

    Representation Invariant:
        - residual kinds carry a grid and have one non-negative value per grid box
        - all values are finite
    """

    kind: FeatureKind
    values: np.ndarray
    grid: Optional[BoxGrid] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        self._check_rep()

    def __len__(self) -> int:
        return len(self.values)

    def _check_rep(self) -> None:
        assert self.values.ndim == 1, "feature values must be a vector"
        assert np.all(np.isfinite(self.values)), "feature values must be finite"
        if self.kind.is_residual:
            assert self.grid is not None, "residual features need their grid"
            assert len(self.values) == len(self.grid), "one residual value per grid box"
            assert np.all(self.values >= 0), "residuals are non-negative"


@dataclass(frozen=True, eq=False)
class ResidualMap:
    """
    Channel-averaged absolute inpainting residual of one (image, box) pair,
    zero outside the box.
    """

    box: Box
    pixels: np.ndarray

    def __post_init__(self):
        assert np.all(self.pixels >= 0), "residual map is non-negative"


def _check_extents(ckpt: Checkpoint, image: np.ndarray, grid: Optional[BoxGrid]) -> None:
    if image.shape != tuple(ckpt.arch.input_extents):
        raise RejectedInputError(f"image extents {image.shape} != model extents {tuple(ckpt.arch.input_extents)}")
    if grid is not None and tuple(grid.extents) != image.shape[:2]:
        raise RejectedInputError(f"grid extents {grid.extents} != image extents {image.shape[:2]}")


def box_mean_residuals(predictions: np.ndarray, image: np.ndarray, grid: BoxGrid) -> np.ndarray:
    """
    Reduce predictions to one value per box: mean |prediction - image| over the
    pixels and channels inside that box.

    @param predictions: (len(grid), rows, columns, channels), predictions[i] is the
                        reconstruction used for box i
    """
    values = np.empty(len(grid))
    for i, b in enumerate(grid):
        rows, cols = b.slices()
        values[i] = np.abs(predictions[i, rows, cols, :].astype(np.float64) - image[rows, cols, :]).mean()
    return values


def inpaint_residual_features(ckpt: Checkpoint, image: np.ndarray, grid: BoxGrid) -> FeatureVector:
    """
    Per-box inpainting residuals of one image.

    @param image: (rows, columns, channels) array matching the checkpoint and grid
    @returns FeatureVector of kind inpaint-residual with one value per grid box, in grid order
    @raises RejectedInputError: on extent mismatch
    """
    _check_extents(ckpt, image, grid)
    masked = np.stack([apply_box_mask(image, b) for b in grid])
    predictions = reconstruct_batch(ckpt, masked)
    return FeatureVector(FeatureKind.INPAINT_RESIDUAL, box_mean_residuals(predictions, image, grid), grid)


def raw_residual_features(ckpt: Checkpoint, image: np.ndarray, grid: BoxGrid) -> FeatureVector:
    """
    Per-box residuals of the unmasked reconstruction D(E(Q)), the peeking baseline.

    @raises RejectedInputError: on extent mismatch
    """
    _check_extents(ckpt, image, grid)
    prediction = reconstruct_batch(ckpt, image[None])
    predictions = np.broadcast_to(prediction, (len(grid),) + prediction.shape[1:])
    return FeatureVector(FeatureKind.RAW_RESIDUAL, box_mean_residuals(predictions, image, grid), grid)


def code_features(ckpt: Checkpoint, image: np.ndarray) -> FeatureVector:
    """The code E(Q) as a feature vector."""
    _check_extents(ckpt, image, None)
    return FeatureVector(FeatureKind.CODE, encode(ckpt, image))


def residual_map(ckpt: Checkpoint, image: np.ndarray, b: Box) -> ResidualMap:
    """
    |complement_b(D(E(mask_b(Q))) - Q)| averaged over channels.

    The map's sum divided by the box area equals the box's inpaint-residual feature.
    """
    _check_extents(ckpt, image, None)
    prediction = reconstruct_batch(ckpt, apply_box_mask(image, b)[None])[0].astype(np.float64)
    residual = np.abs(apply_complement_mask(prediction - image, b))
    return ResidualMap(b, residual.mean(axis=2))


def residual_canvas(ckpt: Checkpoint, image: np.ndarray, grid: BoxGrid) -> np.ndarray:
    """
    Residual maps of every grid box laid over one canvas; where boxes overlap the
    larger residual is kept.

    @returns (rows, columns) array in [0, 2], zero outside the grid
    """
    _check_extents(ckpt, image, grid)
    canvas = np.zeros(image.shape[:2])
    for b in grid:
        np.maximum(canvas, residual_map(ckpt, image, b).pixels, out=canvas)
    return canvas


def image_features(ckpt: Checkpoint, image: np.ndarray, grid: BoxGrid, kind: FeatureKind) -> FeatureVector:
    kind = FeatureKind(kind)
    if kind is FeatureKind.INPAINT_RESIDUAL:
        return inpaint_residual_features(ckpt, image, grid)
    if kind is FeatureKind.RAW_RESIDUAL:
        return raw_residual_features(ckpt, image, grid)
    return code_features(ckpt, image)


def extract_feature_matrix(
    ckpt: Checkpoint,
    images: np.ndarray,
    grid: BoxGrid,
    kind: FeatureKind,
    threads: int = 1,
) -> np.ndarray:
    """
    Features of a stack of images, one row per image in input order.

    Each image is processed on its own, so the result does not depend on threads.

    @param images: (N, rows, columns, channels)
    @param threads: number of worker threads (at least 1)
    @returns (N, dimension) matrix
    """
    kind = FeatureKind(kind)
    if len(images) == 0:
        raise RejectedInputError("no images to extract features from")

    def one(image: np.ndarray) -> np.ndarray:
        return image_features(ckpt, image, grid, kind).values

    ckpt.network  # build once before fanning out
    logger.info("extracting %s features of %d images on %d thread(s)", kind.value, len(images), threads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(one, images))
    return np.stack(rows)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """
    A feature matrix with its image ids, as stored in a feature file.

    Immutable.
    """

    kind: FeatureKind
    grid_description: str
    ids: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise RejectedInputError("feature table needs one row per image id")
        if len(set(self.ids)) != len(self.ids):
            raise RejectedInputError("feature table image ids must be unique")

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        """@returns the rows for the given ids, in that order"""
        index = {image_id: i for i, image_id in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise RejectedInputError(f"no features for {len(missing)} image(s), e.g. {missing[0]}")
        return self.values[[index[i] for i in ids]]

    def to_text(self) -> str:
        lines = [
            f"# nopeek-features kind={self.kind.value} grid={self.grid_description} dim={self.dimension}"
        ]
        for image_id, row in zip(self.ids, self.values):
            lines.append(f"{image_id}\t" + ",".join(f"{v:.9g}" for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path: PathLike) -> None:
        atomic_write_text(path, self.to_text())

    @staticmethod
    def parse(text: str) -> "FeatureTable":
        lines = text.rstrip("\n").split("\n")
        header = lines[0].split()
        if len(header) != 5 or header[:2] != ["#", "nopeek-features"]:
            raise RejectedInputError(f"invalid feature file header: '{lines[0]}'")
        try:
            fields = dict(token.split("=", 1) for token in header[2:])
            dim = int(fields["dim"])
            kind = FeatureKind(fields["kind"])
            grid = fields["grid"]
        except KeyError as err:
            raise RejectedInputError(f"feature file header lacks {err}: '{lines[0]}'") from None
        except ValueError:
            raise RejectedInputError(f"invalid feature file header: '{lines[0]}'") from None
        ids: List[str] = []
        rows: List[List[float]] = []
        for number, line in enumerate(lines[1:], start=2):
            image_id, sep, values = line.partition("\t")
            if not sep:
                raise RejectedInputError(f"line {number}: expected 'id<TAB>values'")
            try:
                row = [float(v) for v in values.split(",")]
            except ValueError:
                raise RejectedInputError(f"line {number}: values must be numbers") from None
            if len(row) != dim:
                raise RejectedInputError(f"line {number}: {len(row)} values, header says {dim}")
            ids.append(image_id)
            rows.append(row)
        values = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
        return FeatureTable(kind, grid, tuple(ids), values)

    @staticmethod
    async def parse_from_file(path: PathLike) -> "FeatureTable":
        """
        Read a feature file.

        @raises FileNotFoundError: if the file does not exist
        @raises RejectedInputError: if the file is malformed
        """
        async with aiofiles.open(Path(path), "r", encoding="utf-8") as f:
            text = await f.read()
        return FeatureTable.parse(text)
