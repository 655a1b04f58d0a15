"""
Box masks: the box-overwrite operator (zero inside a box), its complement (zero
outside a box), the regular test-time grid of boxes and the random training box.

Images are numpy arrays of shape (rows, columns, channels).
"""

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from .errors import EmptyGridError, RejectedInputError

Extents = Tuple[int, int]


@dataclass(frozen=True, order=True)
class Box:
    """
    Axis-aligned pixel rectangle [top, top+height) x [left, left+width).

    Immutable.
    """

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise RejectedInputError(f"box extents must be positive: {self}")
        if self.top < 0 or self.left < 0:
            raise RejectedInputError(f"box corner must be non-negative: {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width

    def fits(self, extents: Extents) -> bool:
        """@returns True iff this box lies inside an image of the given (rows, columns)"""
        return self.bottom <= extents[0] and self.right <= extents[1]

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def union(self, other: "Box") -> "Box":
        """@returns the smallest box containing both boxes"""
        top, left = min(self.top, other.top), min(self.left, other.left)
        return Box(top, left, max(self.bottom, other.bottom) - top, max(self.right, other.right) - left)

    def to_text(self) -> str:
        return f"{self.top},{self.left},{self.height},{self.width}"

    @staticmethod
    def from_text(text: str) -> "Box":
        parts = text.split(",")
        if len(parts) != 4:
            raise RejectedInputError(f"invalid box '{text}', expected 'top,left,height,width'")
        return Box(*(int(p) for p in parts))


def _check_contained(image: np.ndarray, b: Box) -> None:
    if image.ndim != 3:
        raise RejectedInputError(f"image must be (rows, columns, channels), got shape {image.shape}")
    if not b.fits(image.shape[:2]):
        raise RejectedInputError(f"box {b} lies outside image of extents {image.shape[:2]}")


def apply_box_mask(image: np.ndarray, b: Box) -> np.ndarray:
    """
    Overwrite the pixels inside b with zeros on every channel.

    @param image: (rows, columns, channels) array; not modified
    @param b: box contained in the image
    @returns a new array equal to image outside b and zero inside b
    @raises RejectedInputError: if b is not contained in the image
    """
    _check_contained(image, b)
    masked = image.copy()
    masked[b.slices()] = 0
    return masked


def apply_complement_mask(image: np.ndarray, b: Box) -> np.ndarray:
    """
    Overwrite every pixel outside b with zeros.

    @param image: (rows, columns, channels) array; not modified
    @param b: box contained in the image
    @returns a new array equal to image inside b and zero outside b
    @raises RejectedInputError: if b is not contained in the image
    """
    _check_contained(image, b)
    kept = np.zeros_like(image)
    kept[b.slices()] = image[b.slices()]
    return kept


@dataclass(frozen=True)
class BoxGrid:
    """
    Regular lattice of equal boxes used to build per-box features.

    Immutable.

    Abstraction Function:
        AF(extents, box_extents, stride, edge_exclusion, boxes) = the ordered set of
            boxes of size box_extents whose corners lie on the stride lattice and which
            keep edge_exclusion pixels clear of every image edge, in row-major order

    Representation Invariant:
        - boxes is nonempty and sorted by (top, left)
        - every box has extents box_extents and respects edge_exclusion on all sides
    """

    extents: Extents
    box_extents: Extents
    stride: int
    edge_exclusion: int
    boxes: Tuple[Box, ...]

    def __post_init__(self):
        self._check_rep()

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return iter(self.boxes)

    def describe(self) -> str:
        """@returns a one-token description used in feature file headers"""
        return (
            f"image={self.extents[0]}x{self.extents[1]};box={self.box_extents[0]}x{self.box_extents[1]};"
            f"stride={self.stride};exclusion={self.edge_exclusion}"
        )

    def _check_rep(self) -> None:
        assert self.boxes, "grid must hold at least one box"
        assert list(self.boxes) == sorted(self.boxes), "boxes must be in row-major order"
        e = self.edge_exclusion
        for b in self.boxes:
            assert (b.height, b.width) == tuple(self.box_extents), "box extents must match the grid"
            assert b.top >= e and b.left >= e, "box violates edge exclusion"
            assert b.bottom <= self.extents[0] - e and b.right <= self.extents[1] - e, (
                "box violates edge exclusion"
            )


def _lattice(extent: int, box: int, stride: int, exclusion: int) -> range:
    first = -(-exclusion // stride) * stride
    last = extent - exclusion - box
    return range(first, last + 1, stride)


def grid_boxes(extents: Extents, box_extents: Extents, stride: int, edge_exclusion: int) -> BoxGrid:
    """
    Enumerate the test-time grid of boxes.

    A box is kept when its corner lies on the stride lattice anchored at (0, 0) and
    its full extent stays at least edge_exclusion pixels from every image edge.

    @param extents: image (rows, columns)
    @param box_extents: box (height, width)
    @param stride: lattice spacing in pixels, at least 1
    @param edge_exclusion: clearance from every image edge in pixels, at least 0
    @returns the boxes in row-major order
    @raises RejectedInputError: if stride < 1, exclusion < 0 or box extents are not positive
    @raises EmptyGridError: if no box is admissible
    """
    if stride < 1:
        raise RejectedInputError("grid stride must be at least 1")
    if edge_exclusion < 0:
        raise RejectedInputError("edge exclusion must be non-negative")
    if min(box_extents) < 1 or min(extents) < 1:
        raise RejectedInputError("image and box extents must be positive")
    tops = _lattice(extents[0], box_extents[0], stride, edge_exclusion)
    lefts = _lattice(extents[1], box_extents[1], stride, edge_exclusion)
    boxes = tuple(Box(t, l, box_extents[0], box_extents[1]) for t in tops for l in lefts)
    if not boxes:
        raise EmptyGridError(
            f"no {box_extents[0]}x{box_extents[1]} box fits a {extents[0]}x{extents[1]} image "
            f"with stride {stride} and edge exclusion {edge_exclusion}"
        )
    return BoxGrid(tuple(extents), tuple(box_extents), stride, edge_exclusion, boxes)


def sample_random_box(extents: Extents, size_range: Tuple[int, int], rng: np.random.Generator) -> Box:
    """
    Draw a training box: each side's length uniform over size_range (inclusive),
    then the corner uniform over the in-bounds positions.

    @param extents: image (rows, columns)
    @param size_range: (smallest, largest) side length in pixels
    @param rng: generator the draw is taken from; same state gives the same box
    @raises RejectedInputError: if the range is empty or a side cannot fit
    """
    low, high = size_range
    if low < 1 or low > high:
        raise RejectedInputError(f"box size range {size_range} is empty")
    if high > min(extents):
        raise RejectedInputError(f"box size range {size_range} does not fit extents {extents}")
    height = int(rng.integers(low, high + 1))
    width = int(rng.integers(low, high + 1))
    top = int(rng.integers(0, extents[0] - height + 1))
    left = int(rng.integers(0, extents[1] - width + 1))
    return Box(top, left, height, width)


def default_training_sizes(extents: Extents) -> Tuple[int, int]:
    """@returns the default training side-length range: a quarter to a half of the shorter side"""
    side = min(extents)
    return max(1, side // 4), max(1, side // 2)
