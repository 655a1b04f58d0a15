"""
Procedural face images and injected anomalies.

Faces are drawn from soft geometric shapes (head ellipse, eyes, nose, mouth curve)
on a canvas measured in fractions of the image extents, so the same parameters
render at any resolution. Typical faces sample every parameter from a declared
interval; anomalies are local edits with parameters far outside those intervals.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import special

from .errors import RejectedInputError
from .masking import Box

logger = logging.getLogger(__name__)

Extents = Tuple[int, int, int]

NOISE_SIGMA = 0.02
RGB_SKIN_TINT = np.array([0.08, 0.0, -0.08])


@dataclass(frozen=True)
class Interval:
    low: float
    high: float

    def __post_init__(self):
        assert self.low <= self.high

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high

    @property
    def middle(self) -> float:
        return (self.low + self.high) / 2


@dataclass(frozen=True)
class FaceParams:
    """
    Geometry and shading of one face, in canvas fractions (0 = top/left, 1 = bottom/right)
    and intensities in [-1, 1].

    Immutable.

    Representation Invariant:
        - the head ellipse lies inside the canvas
        - eye, nose and mouth sizes are positive
    """

    head_x: float
    head_y: float
    head_width: float
    head_height: float
    eye_y: float
    eye_spacing: float
    eye_radius: float
    nose_length: float
    mouth_y: float
    mouth_width: float
    mouth_curvature: float
    skin: float
    feature_shade: float
    background: float
    illumination: float

    def __post_init__(self):
        self._check_rep()

    def is_typical(self) -> bool:
        return all(TYPICAL_INTERVALS[f.name].contains(getattr(self, f.name)) for f in fields(self))

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def _check_rep(self) -> None:
        assert 0 < self.head_x - self.head_width and self.head_x + self.head_width < 1, "head leaves the canvas"
        assert 0 < self.head_y - self.head_height and self.head_y + self.head_height < 1, "head leaves the canvas"
        assert min(self.eye_radius, self.nose_length, self.mouth_width, self.eye_spacing) > 0


TYPICAL_INTERVALS: Dict[str, Interval] = {
    "head_x": Interval(0.47, 0.53),
    "head_y": Interval(0.48, 0.54),
    "head_width": Interval(0.30, 0.36),
    "head_height": Interval(0.38, 0.44),
    "eye_y": Interval(0.38, 0.44),
    "eye_spacing": Interval(0.12, 0.16),
    "eye_radius": Interval(0.035, 0.05),
    "nose_length": Interval(0.08, 0.12),
    "mouth_y": Interval(0.66, 0.72),
    "mouth_width": Interval(0.18, 0.26),
    "mouth_curvature": Interval(-0.02, 0.04),
    "skin": Interval(0.2, 0.6),
    "feature_shade": Interval(-0.8, -0.5),
    "background": Interval(-0.8, -0.3),
    "illumination": Interval(-0.1, 0.1),
}


def sample_face_params(rng: np.random.Generator) -> FaceParams:
    """Draw every parameter uniformly from its typical interval, in field order."""
    return FaceParams(**{f.name: TYPICAL_INTERVALS[f.name].sample(rng) for f in fields(FaceParams)})


def default_face_params() -> FaceParams:
    return FaceParams(**{f.name: TYPICAL_INTERVALS[f.name].middle for f in fields(FaceParams)})


def _check_extents(extents: Extents) -> Tuple[int, int, int]:
    rows, cols, channels = extents
    if rows < 8 or cols < 8 or channels not in (1, 3):
        raise RejectedInputError(f"canvas extents must be at least 8x8 with 1 or 3 channels, got {extents}")
    return rows, cols, channels


def _coordinates(rows: int, cols: int) -> Tuple[np.ndarray, np.ndarray]:
    y = (np.arange(rows) + 0.5) / rows
    x = (np.arange(cols) + 0.5) / cols
    return np.meshgrid(y, x, indexing="ij")


def _coverage(signed_distance: np.ndarray, softness: float) -> np.ndarray:
    """Soft inside-indicator of a shape given its signed distance (positive inside)."""
    return special.expit(signed_distance / softness)


def _segment_distance(y, x, start: Tuple[float, float], end: Tuple[float, float]) -> np.ndarray:
    (y0, x0), (y1, x1) = start, end
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((y - y0) * dy + (x - x0) * dx) / length2, 0.0, 1.0) if length2 > 0 else 0.0
    return np.hypot(y - (y0 + t * dy), x - (x0 + t * dx))


def _pixel_box(extents: Extents, top: float, left: float, bottom: float, right: float) -> Box:
    """Smallest pixel box covering the fractional rectangle, clipped to the canvas."""
    rows, cols = extents[:2]
    t = min(max(int(math.floor(top * rows)), 0), rows - 1)
    l = min(max(int(math.floor(left * cols)), 0), cols - 1)
    b = min(max(int(math.ceil(bottom * rows)), t + 1), rows)
    r = min(max(int(math.ceil(right * cols)), l + 1), cols)
    return Box(t, l, b - t, r - l)


def eye_region(params: FaceParams, extents: Extents) -> Box:
    """Pixel box around both eyes; glasses are drawn only inside it."""
    reach = 2.6 * params.eye_radius
    return _pixel_box(
        extents,
        params.eye_y - reach,
        params.head_x - params.eye_spacing - reach,
        params.eye_y + reach,
        params.head_x + params.eye_spacing + reach,
    )


def mouth_region(params: FaceParams, extents: Extents) -> Box:
    margin = 0.03
    low = min(0.0, params.mouth_curvature)
    high = max(0.0, params.mouth_curvature)
    return _pixel_box(
        extents,
        params.mouth_y + low - margin,
        params.head_x - params.mouth_width / 2 - margin,
        params.mouth_y + high + margin,
        params.head_x + params.mouth_width / 2 + margin,
    )


def render_face(
    params: FaceParams,
    extents: Extents = (64, 64, 1),
    glasses: bool = False,
    noise_seed: Optional[int] = None,
) -> np.ndarray:
    """
    Draw a face.

    @param params: face geometry and shading
    @param extents: (rows, columns, channels), channels 1 or 3
    @param glasses: draw spectacle rings and bridge, confined to eye_region(params)
    @param noise_seed: seed of the additive Gaussian pixel noise; None for a clean image
    @returns (rows, columns, channels) float64 array in [-1, 1]
    """
    rows, cols, channels = _check_extents(extents)
    y, x = _coordinates(rows, cols)
    soft = 0.5 / min(rows, cols)
    stroke = max(0.012, 0.6 / min(rows, cols))
    p = params

    plane = np.full((rows, cols), p.background)
    radial = np.sqrt(((x - p.head_x) / p.head_width) ** 2 + ((y - p.head_y) / p.head_height) ** 2)
    head = _coverage((1.0 - radial) * min(p.head_width, p.head_height), soft)
    plane += (p.skin - plane) * head

    for side in (-1, 1):
        eye = _coverage(p.eye_radius - np.hypot(x - (p.head_x + side * p.eye_spacing), y - p.eye_y), soft)
        plane += (p.feature_shade - plane) * eye

    nose_top = p.eye_y + 0.05
    nose = _coverage(stroke - _segment_distance(y, x, (nose_top, p.head_x), (nose_top + p.nose_length, p.head_x)), soft)
    plane += (p.skin - 0.25 - plane) * nose

    half = p.mouth_width / 2
    u = np.clip((x - p.head_x) / half, -1.0, 1.0)
    curve = p.mouth_y + p.mouth_curvature * (1.0 - u**2)
    mouth = _coverage(stroke - np.abs(y - curve), soft) * _coverage(half - np.abs(x - p.head_x), soft)
    plane += (p.feature_shade + 0.1 - plane) * mouth

    if glasses:
        ring_radius = 2.0 * p.eye_radius
        frame = np.zeros_like(plane)
        for side in (-1, 1):
            distance = np.abs(np.hypot(x - (p.head_x + side * p.eye_spacing), y - p.eye_y) - ring_radius)
            frame = np.maximum(frame, _coverage(stroke - distance, soft))
        bridge = _segment_distance(
            y, x, (p.eye_y, p.head_x - p.eye_spacing + ring_radius), (p.eye_y, p.head_x + p.eye_spacing - ring_radius)
        )
        frame = np.maximum(frame, _coverage(stroke - bridge, soft))
        confined = np.zeros_like(frame)
        rows_slice, cols_slice = eye_region(p, extents).slices()
        confined[rows_slice, cols_slice] = frame[rows_slice, cols_slice]
        plane += (-0.95 - plane) * confined

    image = np.repeat(plane[:, :, None], channels, axis=2)
    if channels == 3:
        image += head[:, :, None] * RGB_SKIN_TINT
    image += p.illumination
    if noise_seed is not None:
        image += np.random.default_rng(noise_seed).normal(0.0, NOISE_SIGMA, size=image.shape)
    return np.clip(image, -1.0, 1.0)


class AnomalyKind(str, Enum):
    DISPLACED_MOUTH = "displaced-mouth"
    OVERSIZED_EYE = "oversized-eye"
    OCCLUDING_BLOCK = "occluding-block"
    TEXTURE_PATCH = "texture-patch"


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise RejectedInputError(f"expected a (rows, columns, channels) image, got shape {image.shape}")


def _shift_box(b: Box, dy: int, dx: int, extents) -> Box:
    rows, cols = extents[:2]
    top = min(max(b.top + dy, 0), rows - b.height)
    left = min(max(b.left + dx, 0), cols - b.width)
    return Box(top, left, b.height, b.width)


def displace_mouth(image: np.ndarray, params: FaceParams, dy: int, dx: int = 0) -> Tuple[np.ndarray, Box]:
    """
    Move the mouth band by (dy, dx) pixels, filling its old place with the band's median.

    @returns (edited image, region containing every changed pixel)
    """
    _check_image(image)
    source = mouth_region(params, image.shape)
    target = _shift_box(source, dy, dx, image.shape)
    out = image.copy()
    band = image[source.slices()]
    out[source.slices()] = np.median(band.reshape(-1, image.shape[2]), axis=0)
    out[target.slices()] = band
    return out, source.union(target)


def enlarge_eye(image: np.ndarray, params: FaceParams, factor: float, side: int = -1) -> Tuple[np.ndarray, Box]:
    """
    Magnify one eye about its center by factor (nearest neighbour).

    @param side: -1 for the eye on the left of the image, +1 for the right one
    @returns (edited image, region containing every changed pixel)
    """
    _check_image(image)
    if factor <= 0:
        raise RejectedInputError(f"magnification must be positive, got {factor}")
    rows, cols = image.shape[:2]
    center_y = params.eye_y * rows
    center_x = (params.head_x + side * params.eye_spacing) * cols
    reach = 1.3 * params.eye_radius * factor
    region = _pixel_box(
        image.shape,
        params.eye_y - reach,
        params.head_x + side * params.eye_spacing - reach,
        params.eye_y + reach,
        params.head_x + side * params.eye_spacing + reach,
    )
    rows_slice, cols_slice = region.slices()
    yy, xx = np.meshgrid(np.arange(region.top, region.bottom), np.arange(region.left, region.right), indexing="ij")
    src_y = np.clip(np.floor(center_y + (yy + 0.5 - center_y) / factor).astype(int), 0, rows - 1)
    src_x = np.clip(np.floor(center_x + (xx + 0.5 - center_x) / factor).astype(int), 0, cols - 1)
    out = image.copy()
    out[rows_slice, cols_slice] = image[src_y, src_x]
    return out, region


def _random_patch(extents, rng: np.random.Generator) -> Box:
    rows, cols = extents[:2]
    height = int(rng.integers(max(2, rows // 5), max(3, rows // 3) + 1))
    width = int(rng.integers(max(2, cols // 5), max(3, cols // 3) + 1))
    top = int(rng.integers(rows // 5, max(rows // 5 + 1, rows - rows // 5 - height + 1)))
    left = int(rng.integers(cols // 5, max(cols // 5 + 1, cols - cols // 5 - width + 1)))
    return Box(min(top, rows - height), min(left, cols - width), height, width)


def inject_anomaly(
    image: np.ndarray,
    kind: AnomalyKind,
    rng: Union[int, np.random.Generator],
    params: Optional[FaceParams] = None,
) -> Tuple[np.ndarray, Box]:
    """
    Apply one local anomaly with parameters outside the typical intervals.

    @param image: (rows, columns, channels) image in [-1, 1]; not modified
    @param kind: which anomaly
    @param rng: seed or generator of the anomaly's parameters
    @param params: face the image was rendered from; locates mouth and eyes
                   (the typical mid-point face if None)
    @returns (anomalous image, box containing every changed pixel)
    @raises RejectedInputError: on an unknown kind or a malformed image
    """
    _check_image(image)
    try:
        kind = AnomalyKind(kind)
    except ValueError:
        raise RejectedInputError(f"unknown anomaly kind '{kind}'") from None
    rng = np.random.default_rng(rng)
    params = params or default_face_params()
    rows = image.shape[0]

    if kind is AnomalyKind.DISPLACED_MOUTH:
        shift = int(round(rng.uniform(0.10, 0.16) * rows)) * (1 if rng.random() < 0.5 else -1)
        return displace_mouth(image, params, shift)
    if kind is AnomalyKind.OVERSIZED_EYE:
        return enlarge_eye(image, params, rng.uniform(1.8, 2.4), side=-1 if rng.random() < 0.5 else 1)

    region = _random_patch(image.shape, rng)
    out = image.copy()
    if kind is AnomalyKind.OCCLUDING_BLOCK:
        out[region.slices()] = rng.uniform(-1.0, 1.0, size=image.shape[2])
    else:
        period = int(rng.integers(2, 4))
        yy, xx = np.meshgrid(np.arange(region.height), np.arange(region.width), indexing="ij")
        stripes = np.where(((yy + xx) // period) % 2 == 0, 0.85, -0.85)
        out[region.slices()] = stripes[:, :, None]
    return out, region
