"""
Image corpora on disk: manifests, 8-bit PGM/PPM image files, directory ingestion
and generation of the synthetic suite.
"""

import asyncio
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import aiofiles
import numpy as np
from PIL import Image, UnidentifiedImageError

from .artifacts import PathLike, atomic_write_bytes, atomic_write_text, counter_rng, derive_seed
from .errors import EmptyManifestError, RejectedInputError
from .faces import AnomalyKind, inject_anomaly, render_face, sample_face_params

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_HEADER = f"# nopeek-manifest version={MANIFEST_VERSION}"
MANIFEST_COLUMNS = "id\tpath\tsplit\tkind\tattributes\tseed"
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

Extents = Tuple[int, int, int]


class Split(str, Enum):
    TRAIN = "train"
    HOLDOUT = "holdout"
    PROBE = "probe"


class ImageKind(str, Enum):
    TYPICAL = "typical"
    ANOMALY = "anomaly"
    CONTROL = "control-typical"


@dataclass(frozen=True)
class ManifestRecord:
    """
    One image of a manifest.

    attributes are flags ("glasses") or key=value tokens ("anomaly=occluding-block",
    "region=top,left,height,width").
    """

    image_id: str
    path: str
    split: Split
    kind: ImageKind
    attributes: Tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "kind", ImageKind(self.kind))
        object.__setattr__(self, "attributes", tuple(sorted(self.attributes)))
        if not self.image_id or any(c.isspace() for c in self.image_id):
            raise RejectedInputError(f"image id must be nonempty without whitespace: '{self.image_id}'")
        if any(";" in a or "\t" in a for a in self.attributes):
            raise RejectedInputError(f"attribute tokens must not contain ';' or tabs: {self.attributes}")

    def has(self, flag: str) -> bool:
        return flag in self.attributes

    def attribute(self, key: str) -> Optional[str]:
        prefix = f"{key}="
        for token in self.attributes:
            if token.startswith(prefix):
                return token[len(prefix) :]
        return None

    def to_line(self) -> str:
        attributes = ";".join(self.attributes) or "-"
        return f"{self.image_id}\t{self.path}\t{self.split.value}\t{self.kind.value}\t{attributes}\t{self.seed}"

    @staticmethod
    def from_line(line: str, number: int) -> "ManifestRecord":
        fields = line.split("\t")
        if len(fields) != 6:
            raise RejectedInputError(f"manifest line {number}: expected 6 fields, got {len(fields)}")
        image_id, path, split, kind, attributes, seed = fields
        try:
            return ManifestRecord(
                image_id,
                path,
                Split(split),
                ImageKind(kind),
                tuple(a for a in attributes.split(";") if a and a != "-"),
                int(seed),
            )
        except ValueError as err:
            raise RejectedInputError(f"manifest line {number}: {err}") from None


@dataclass(frozen=True)
class Manifest:
    """
    The images of a corpus and their roles.

    Immutable. Paths are relative to root.

    Representation Invariant:
        - image ids unique
    """

    root: Path
    records: Tuple[ManifestRecord, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "records", tuple(self.records))
        self._check_rep()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(r.image_id for r in self.records)

    def path_of(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def select(
        self, split: Optional[Split] = None, kind: Optional[ImageKind] = None, flag: Optional[str] = None
    ) -> "Manifest":
        """@returns the records matching every given criterion, in manifest order"""
        chosen = [
            r
            for r in self.records
            if (split is None or r.split is Split(split))
            and (kind is None or r.kind is ImageKind(kind))
            and (flag is None or r.has(flag))
        ]
        return Manifest(self.root, tuple(chosen))

    def concat(self, other: "Manifest") -> "Manifest":
        if other.root != self.root:
            other = Manifest(self.root, tuple(replace(r, path=_relative(other.root / r.path, self.root)) for r in other))
        return Manifest(self.root, self.records + other.records)

    def to_text(self) -> str:
        return "\n".join([MANIFEST_HEADER, MANIFEST_COLUMNS] + [r.to_line() for r in self.records]) + "\n"

    def save(self, path: PathLike) -> None:
        atomic_write_text(path, self.to_text())

    @staticmethod
    def parse(text: str, root: PathLike) -> "Manifest":
        lines = [line.rstrip("\r") for line in text.split("\n")]
        while lines and lines[-1] == "":
            lines.pop()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise RejectedInputError(f"manifest must start with '{MANIFEST_HEADER}'")
        if len(lines) < 2 or lines[1] != MANIFEST_COLUMNS:
            raise RejectedInputError("manifest column header missing")
        records = tuple(ManifestRecord.from_line(line, number) for number, line in enumerate(lines[2:], start=3))
        return Manifest(Path(root), records)

    @staticmethod
    async def parse_from_file(filename: PathLike) -> "Manifest":
        """
        Read a manifest; record paths are taken relative to the manifest's directory.

        @raises FileNotFoundError: if the file does not exist
        @raises RejectedInputError: if the file is not a valid manifest
        """
        async with aiofiles.open(filename, "r", encoding="utf-8") as f:
            content = await f.read()
        return Manifest.parse(content, Path(filename).parent)

    def _check_rep(self) -> None:
        ids = self.ids
        duplicates = {i for i in ids if ids.count(i) > 1} if len(set(ids)) != len(ids) else set()
        if duplicates:
            raise RejectedInputError(f"duplicate image ids in manifest: {sorted(duplicates)[:5]}")


def _relative(path: Path, root: Path) -> str:
    return Path(path).resolve().relative_to(Path(root).resolve()).as_posix()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] intensities to 8-bit pixels, p = round((v + 1) * 127.5)."""
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1], v = p / 127.5 - 1."""
    return pixels.astype(np.float64) / 127.5 - 1.0


def encode_image(image: np.ndarray) -> bytes:
    """Binary PGM (one channel) or PPM (three channels) bytes of an image."""
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise RejectedInputError(f"expected a (rows, columns, 1 or 3) image, got shape {image.shape}")
    pixels = to_uint8(image)
    picture = Image.fromarray(pixels[:, :, 0] if image.shape[2] == 1 else pixels)
    buffer = io.BytesIO()
    picture.save(buffer, format="PPM")
    return buffer.getvalue()


def write_image(path: PathLike, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_image(image))


def decode_image(data: bytes, extents: Extents, name: str = "<bytes>") -> np.ndarray:
    """
    Decode image bytes, convert to the channel count of extents and resize to its
    rows and columns when they differ.

    @raises RejectedInputError: if the bytes are not a decodable image
    """
    rows, cols, channels = extents
    try:
        with Image.open(io.BytesIO(data)) as picture:
            picture = picture.convert("L" if channels == 1 else "RGB")
            if picture.size != (cols, rows):
                picture = picture.resize((cols, rows), Image.Resampling.BILINEAR)
            pixels = np.asarray(picture)
    except (UnidentifiedImageError, OSError) as err:
        raise RejectedInputError(f"{name}: cannot decode image ({err})") from None
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return from_uint8(pixels)


async def read_image(path: PathLike, extents: Extents) -> np.ndarray:
    async with aiofiles.open(path, "rb") as f:
        data = await f.read()
    return decode_image(data, extents, str(path))


@dataclass(frozen=True, eq=False)
class Corpus:
    """
    Decoded images of a manifest, one per record in manifest order.

    Immutable; images must not be modified by callers.
    """

    manifest: Manifest
    images: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(self.manifest):
            raise RejectedInputError("corpus needs one (rows, columns, channels) image per manifest record")
        self.images.setflags(write=False)

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def ids(self) -> Tuple[str, ...]:
        return self.manifest.ids

    def subset(
        self, split: Optional[Split] = None, kind: Optional[ImageKind] = None, flag: Optional[str] = None
    ) -> "Corpus":
        chosen = self.manifest.select(split, kind, flag)
        wanted = set(chosen.ids)
        index = [i for i, image_id in enumerate(self.ids) if image_id in wanted]
        return Corpus(chosen, self.images[index])

    def labels(self, flag: str) -> np.ndarray:
        """1 for records carrying the flag, 0 otherwise."""
        return np.array([int(r.has(flag)) for r in self.manifest], dtype=np.int64)


async def load_corpus(manifest: Manifest, extents: Extents) -> Corpus:
    """
    Decode every image of a manifest.

    @raises EmptyManifestError: if the manifest has no records
    @raises FileNotFoundError: if an image file is missing
    @raises RejectedInputError: if an image cannot be decoded
    """
    if len(manifest) == 0:
        raise EmptyManifestError("manifest has no images")
    images = await asyncio.gather(*(read_image(manifest.path_of(r), extents) for r in manifest))
    logger.info("loaded %d images from %s", len(images), manifest.root)
    return Corpus(manifest, np.stack(images))


async def load_directory(
    path: PathLike,
    extents: Extents,
    split: Split = Split.HOLDOUT,
    kind: ImageKind = ImageKind.TYPICAL,
) -> Corpus:
    """
    Ingest a directory tree of image files.

    Files are visited in sorted path order; ids are their relative paths without
    suffix. Each image is converted to the channel count of extents, resized to its
    rows and columns, and mapped to [-1, 1]. Undecodable files are skipped with a
    warning.

    @raises EmptyManifestError: if no file could be decoded
    """
    root = Path(path)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    records, images = [], []
    for file in files:
        try:
            image = await read_image(file, extents)
        except RejectedInputError as err:
            logger.warning("skipping %s", err)
            continue
        relative = file.relative_to(root)
        image_id = relative.with_suffix("").as_posix().replace(" ", "_")
        records.append(ManifestRecord(image_id, relative.as_posix(), split, kind))
        images.append(image)
    if not images:
        raise EmptyManifestError(f"no decodable images under {root} ({len(files)} candidate file(s))")
    logger.info("ingested %d of %d image files from %s", len(images), len(files), root)
    return Corpus(Manifest(root, tuple(records)), np.stack(images))


_KIND_STREAM = {ImageKind.TYPICAL: 0, ImageKind.ANOMALY: 1, ImageKind.CONTROL: 2}


def synthesize_image(
    seed: int, index: int, kind: ImageKind, extents: Extents, glasses: bool = False
) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """
    Image index of a generated stream: a pure function of its arguments.

    @returns (image in [-1, 1], attribute tokens for its manifest record)
    """
    kind = ImageKind(kind)
    rng = counter_rng(seed, _KIND_STREAM[kind], index)
    params = sample_face_params(rng)
    noise_seed = int(rng.integers(2**63))
    image = render_face(params, extents, glasses=glasses, noise_seed=noise_seed)
    attributes = ("glasses",) if glasses else ()
    if kind is ImageKind.ANOMALY:
        anomaly = list(AnomalyKind)[index % len(AnomalyKind)]
        image, region = inject_anomaly(image, anomaly, rng, params)
        attributes += (f"anomaly={anomaly.value}", f"region={region.to_text()}")
    return image, attributes


def generate_corpus(
    out_dir: PathLike,
    count: int,
    seed: int,
    kind: ImageKind = ImageKind.TYPICAL,
    extents: Extents = (64, 64, 1),
    split: Split = Split.TRAIN,
    glasses: bool = False,
    prefix: Optional[str] = None,
    threads: int = 1,
) -> Manifest:
    """
    Render count images and write them under out_dir/images.

    Deterministic given (count, seed, kind, extents, glasses). Typical and control
    images sample faces from the typical intervals on separate streams; anomaly
    images add one injected anomaly each, cycling over the anomaly kinds.

    @returns manifest rooted at out_dir (not written)
    @raises RejectedInputError: if count < 1
    @raises OSError: if out_dir is not writable
    """
    if count < 1:
        raise RejectedInputError(f"count must be at least 1, got {count}")
    kind = ImageKind(kind)
    out_dir = Path(out_dir)
    prefix = prefix if prefix is not None else f"{split.value}-{kind.value}-"
    suffix = ".pgm" if extents[2] == 1 else ".ppm"

    def one(index: int) -> ManifestRecord:
        image, attributes = synthesize_image(seed, index, kind, extents, glasses)
        image_id = f"{prefix}{index:05d}"
        relative = f"images/{image_id}{suffix}"
        write_image(out_dir / relative, image)
        return ManifestRecord(image_id, relative, split, kind, attributes, seed)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = tuple(pool.map(one, range(count)))
    logger.info("generated %d %s image(s) in %s", count, kind.value, out_dir)
    return Manifest(out_dir, records)


@dataclass(frozen=True)
class SuiteCounts:
    train: int = 2000
    holdout: int = 600
    anomalies: int = 100
    controls: int = 100
    attr_train: int = 2000
    attr_negative: int = 500
    attr_positive: int = 500


def generate_suite(
    out_dir: PathLike,
    counts: SuiteCounts,
    seed: int,
    extents: Extents = (64, 64, 1),
    threads: int = 1,
) -> Dict[str, Manifest]:
    """
    Write the whole synthetic suite under out_dir:

        main/  typical train and holdout images, anomaly probes and control probes
               drawn from a separate stream
        attr/  glasses-free train images, and a test split of glasses-free and
               glasses-wearing images

    Every part uses its own seed derived from seed.

    @returns {"main": manifest, "attr": manifest}, both also saved as manifest.tsv
    """
    out_dir = Path(out_dir)
    parts: List[Tuple[str, Split, ImageKind, int, bool, str]] = [
        ("main", Split.TRAIN, ImageKind.TYPICAL, counts.train, False, "train-"),
        ("main", Split.HOLDOUT, ImageKind.TYPICAL, counts.holdout, False, "holdout-"),
        ("main", Split.PROBE, ImageKind.ANOMALY, counts.anomalies, False, "anomaly-"),
        ("main", Split.PROBE, ImageKind.CONTROL, counts.controls, False, "control-"),
        ("attr", Split.TRAIN, ImageKind.TYPICAL, counts.attr_train, False, "attr-train-"),
        ("attr", Split.HOLDOUT, ImageKind.TYPICAL, counts.attr_negative, False, "attr-neg-"),
        ("attr", Split.HOLDOUT, ImageKind.TYPICAL, counts.attr_positive, True, "attr-pos-"),
    ]
    manifests: Dict[str, Manifest] = {}
    for corpus, split, kind, count, glasses, prefix in parts:
        if count == 0:
            continue
        part_seed = derive_seed(seed, f"gen-data:{prefix}")
        part = generate_corpus(out_dir / corpus, count, part_seed, kind, extents, split, glasses, prefix, threads)
        manifests[corpus] = manifests[corpus].concat(part) if corpus in manifests else part
    for corpus, manifest in manifests.items():
        manifest.save(out_dir / corpus / "manifest.tsv")
    return manifests
