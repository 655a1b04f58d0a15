"""
Run configuration.

Precedence, lowest first: built-in defaults, environment (NOPEEK_OUT,
NOPEEK_THREADS), the YAML file given with --config, command-line flags.
"""

import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import aiofiles
import yaml

from .autoencoder import ArchConfig
from .dataset import SuiteCounts
from .errors import ConfigError, RejectedInputError
from .experiments import AttributeMethod
from .features import FeatureKind
from .scorers import parse_methods
from .trainer import TrainHyper

logger = logging.getLogger(__name__)


class Config:
    DEFAULT_OUT = "runs/default"
    DEFAULT_THREADS = 1

    @staticmethod
    def get_defaults() -> Tuple[str, int]:
        """
        Defaults that the environment may override.

        @returns (output root, worker cap) tuple
        """
        out = Config.DEFAULT_OUT
        threads = Config.DEFAULT_THREADS

        if "NOPEEK_OUT" in os.environ and os.environ["NOPEEK_OUT"]:
            out = os.environ["NOPEEK_OUT"]

        if "NOPEEK_THREADS" in os.environ:
            try:
                threads = int(os.environ["NOPEEK_THREADS"])
                if threads < 1:
                    raise ValueError
            except ValueError:
                threads = Config.DEFAULT_THREADS
                logger.warning("invalid NOPEEK_THREADS env var, using default %d", threads)

        return out, threads


def _fail(key: str, message: str):
    raise ConfigError(key, message)


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    """Check value against a field annotation, converting YAML lists to tuples."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            _fail(key, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            _fail(key, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if annotation is bool:
        if not isinstance(value, bool):
            _fail(key, f"expected true or false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(key, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(key, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            _fail(key, f"expected a string, got {value!r}")
        return value
    return value


def _section(cls, data: Any, prefix: str):
    """Build a section dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        _fail(prefix, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            _fail(f"{prefix}.{key}", "unknown key")
    values = {key: _coerce(value, hints[key], f"{prefix}.{key}") for key, value in data.items()}
    return cls(**values)


def _positive(key: str, value: int) -> None:
    if value < 1:
        _fail(key, f"must be at least 1, got {value}")


@dataclass(frozen=True)
class DataSection:
    """
    Image extents and synthetic suite sizes. source_dir, when set, is a directory
    with train/, holdout/, anomaly/ and control/ image trees that replaces the
    synthetic main corpus; the main counts are then ignored.
    """

    extents: Tuple[int, int, int] = (64, 64, 1)
    train: int = 2000
    holdout: int = 600
    anomalies: int = 100
    controls: int = 100
    attr_train: int = 2000
    attr_negative: int = 500
    attr_positive: int = 500
    source_dir: Optional[str] = None

    def __post_init__(self):
        rows, cols, channels = self.extents
        if rows < 1 or cols < 1:
            _fail("data.extents", f"rows and columns must be positive, got {self.extents}")
        if channels not in (1, 3):
            _fail("data.extents", f"channels must be 1 or 3, got {channels}")
        for name in ("train", "holdout", "anomalies", "controls"):
            _positive(f"data.{name}", getattr(self, name))
        for name in ("attr_train", "attr_negative", "attr_positive"):
            if getattr(self, name) < 0:
                _fail(f"data.{name}", "must not be negative")

    def counts(self) -> SuiteCounts:
        return SuiteCounts(
            self.train,
            self.holdout,
            self.anomalies,
            self.controls,
            self.attr_train,
            self.attr_negative,
            self.attr_positive,
        )


@dataclass(frozen=True)
class GridSection:
    box: Tuple[int, int] = (16, 16)
    stride: int = 16
    exclusion: int = 16

    def __post_init__(self):
        if min(self.box) < 1:
            _fail("grid.box", f"box extents must be positive, got {self.box}")
        _positive("grid.stride", self.stride)
        if self.exclusion < 0:
            _fail("grid.exclusion", "must not be negative")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    step_size: float = 1e-3
    box_sizes: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        _positive("train.epochs", self.epochs)
        _positive("train.batch_size", self.batch_size)
        if not self.step_size > 0:
            _fail("train.step_size", f"must be positive, got {self.step_size}")
        if self.box_sizes is not None and not 1 <= self.box_sizes[0] <= self.box_sizes[1]:
            _fail("train.box_sizes", f"expected [smallest, largest] with 1 <= smallest <= largest, got {list(self.box_sizes)}")

    def hyper(self, seed: int) -> TrainHyper:
        return TrainHyper(self.epochs, self.batch_size, seed, self.step_size, self.box_sizes)


def _kinds(key: str, names: Tuple[str, ...]) -> None:
    if not names:
        _fail(key, "needs at least one feature kind")
    for name in names:
        try:
            FeatureKind(name)
        except ValueError:
            _fail(key, f"unknown feature kind '{name}'")


@dataclass(frozen=True)
class FeaturesSection:
    kinds: Tuple[str, ...] = tuple(k.value for k in FeatureKind)

    def __post_init__(self):
        _kinds("features.kinds", self.kinds)


@dataclass(frozen=True)
class ScoringSection:
    methods: Tuple[str, ...] = ("linf", "equivariant", "mahalanobis", "lfdr", "log-lfdr", "code-mahalanobis", "raw-linf")
    trim: int = 1
    shrinkage: float = 0.1

    def __post_init__(self):
        if not self.methods:
            _fail("scoring.methods", "needs at least one method")
        try:
            parse_methods(self.methods)
        except RejectedInputError as err:
            _fail("scoring.methods", str(err))
        if self.trim < 0:
            _fail("scoring.trim", "must not be negative")
        if not 0 <= self.shrinkage < 1:
            _fail("scoring.shrinkage", f"must be in [0, 1), got {self.shrinkage}")


@dataclass(frozen=True)
class ExperimentSection:
    set_sizes: Tuple[int, ...] = (16, 64, 128, 256)
    trials: int = 2000

    def __post_init__(self):
        if not self.set_sizes:
            _fail("experiment.set_sizes", "needs at least one set size")
        for size in self.set_sizes:
            if size < 2:
                _fail("experiment.set_sizes", f"sets need at least two images, got {size}")
        if len(set(self.set_sizes)) != len(self.set_sizes):
            _fail("experiment.set_sizes", "set sizes must be distinct")
        _positive("experiment.trials", self.trials)


@dataclass(frozen=True)
class AttributeSection:
    methods: Tuple[str, ...] = tuple(m.value for m in AttributeMethod)
    kinds: Tuple[str, ...] = tuple(k.value for k in FeatureKind)
    flag: str = "glasses"

    def __post_init__(self):
        if not self.methods:
            _fail("attribute.methods", "needs at least one method")
        for name in self.methods:
            try:
                AttributeMethod(name)
            except ValueError:
                _fail("attribute.methods", f"unknown attribute method '{name}'")
        _kinds("attribute.kinds", self.kinds)
        if not self.flag:
            _fail("attribute.flag", "must be nonempty")


@dataclass(frozen=True)
class ReportSection:
    residual_maps: int = 4
    map_method: str = "linf"

    def __post_init__(self):
        if self.residual_maps < 0:
            _fail("report.residual_maps", "must not be negative")
        try:
            (method,) = parse_methods([self.map_method])
        except RejectedInputError as err:
            _fail("report.map_method", str(err))
        if not method.item_wise:
            _fail("report.map_method", f"'{method.value}' scores whole sets, pick an item-wise method")


_SECTIONS = {
    "data": DataSection,
    "grid": GridSection,
    "train": TrainSection,
    "features": FeaturesSection,
    "scoring": ScoringSection,
    "experiment": ExperimentSection,
    "attribute": AttributeSection,
    "report": ReportSection,
}


@dataclass(frozen=True)
class RunConfig:
    """
    Validated configuration of one pipeline run.

    Immutable.

    Representation Invariant:
        - every section satisfies its own range checks
        - arch.input_extents == data.extents
    """

    seed: int = 0
    threads: int = Config.DEFAULT_THREADS
    out: str = Config.DEFAULT_OUT
    data: DataSection = field(default_factory=DataSection)
    arch: ArchConfig = field(default_factory=ArchConfig)
    grid: GridSection = field(default_factory=GridSection)
    train: TrainSection = field(default_factory=TrainSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    attribute: AttributeSection = field(default_factory=AttributeSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        if self.seed < 0:
            _fail("seed", f"must not be negative, got {self.seed}")
        _positive("threads", self.threads)
        if not self.out:
            _fail("out", "must be nonempty")
        self._check_rep()

    @property
    def extents(self) -> Tuple[int, int, int]:
        return self.data.extents

    def with_overrides(
        self,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
        out: Optional[str] = None,
        set_sizes: Optional[Tuple[int, ...]] = None,
        trials: Optional[int] = None,
        methods: Optional[Tuple[str, ...]] = None,
        feature_kinds: Optional[Tuple[str, ...]] = None,
    ) -> "RunConfig":
        """
        Apply command-line flags; None leaves a value as configured.

        @raises ConfigError: if an override is out of range
        """
        config = self
        top = {k: v for k, v in (("seed", seed), ("threads", threads), ("out", out)) if v is not None}
        if top:
            config = dataclasses.replace(config, **top)
        if set_sizes is not None or trials is not None:
            experiment = dataclasses.replace(
                config.experiment,
                set_sizes=tuple(set_sizes) if set_sizes is not None else config.experiment.set_sizes,
                trials=trials if trials is not None else config.experiment.trials,
            )
            config = dataclasses.replace(config, experiment=experiment)
        if methods is not None:
            config = dataclasses.replace(config, scoring=dataclasses.replace(config.scoring, methods=tuple(methods)))
        if feature_kinds is not None:
            kinds = tuple(feature_kinds)
            config = dataclasses.replace(
                config,
                features=dataclasses.replace(config.features, kinds=kinds),
                attribute=dataclasses.replace(config.attribute, kinds=kinds),
            )
        return config

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"seed": self.seed, "threads": self.threads, "out": self.out}
        for name in _SECTIONS:
            data[name] = _plain(dataclasses.asdict(getattr(self, name)))
        arch = self.arch.to_dict()
        del arch["input_extents"]
        data["arch"] = arch
        return data

    def digest(self) -> str:
        """
        SHA-256 of the canonical JSON form, leaving out the worker cap and the
        output root, which do not change results.
        """
        data = self.to_dict()
        del data["threads"], data["out"]
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @staticmethod
    def from_dict(data: Any) -> "RunConfig":
        """
        @raises ConfigError: naming the first unknown, mistyped or out-of-range key
        """
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            _fail("<root>", f"expected a mapping, got {type(data).__name__}")
        known = {"seed", "threads", "out", "arch"} | set(_SECTIONS)
        for key in data:
            if key not in known:
                _fail(str(key), "unknown key")

        out, threads = Config.get_defaults()
        values: Dict[str, Any] = {
            "seed": _coerce(data.get("seed", 0), int, "seed"),
            "threads": _coerce(data.get("threads", threads), int, "threads"),
            "out": _coerce(data.get("out", out), str, "out"),
        }
        for name, cls in _SECTIONS.items():
            values[name] = _section(cls, data.get(name), name)
        values["arch"] = _arch(data.get("arch"), values["data"].extents)
        return RunConfig(**values)

    @staticmethod
    def parse(text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError("<file>", f"not valid YAML: {err}") from None
        return RunConfig.from_dict(data)

    def _check_rep(self) -> None:
        assert self.arch.input_extents == self.data.extents


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    return value


def _arch(data: Any, extents: Tuple[int, int, int]) -> ArchConfig:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        _fail("arch", f"expected a mapping, got {type(data).__name__}")
    if "input_extents" in data:
        _fail("arch.input_extents", "set data.extents instead")
    hints = typing.get_type_hints(ArchConfig)
    for key in data:
        if key not in hints:
            _fail(f"arch.{key}", "unknown key")
    values = {key: _coerce(value, hints[key], f"arch.{key}") for key, value in data.items()}
    try:
        return ArchConfig(input_extents=extents, **values)
    except RejectedInputError as err:
        raise ConfigError("arch", str(err)) from None


async def load_config(path: Optional[os.PathLike] = None) -> RunConfig:
    """
    Load and validate a run configuration.

    @param path: YAML file, or None for defaults (environment still applies)
    @raises ConfigError: on unreadable, malformed or invalid configuration
    """
    if path is None:
        return RunConfig.from_dict({})
    try:
        async with aiofiles.open(Path(path), "r", encoding="utf-8") as f:
            text = await f.read()
    except OSError as err:
        raise ConfigError("--config", f"cannot read {path}: {err.strerror or err}") from None
    config = RunConfig.parse(text)
    logger.debug("loaded configuration %s (sha256 %s)", path, config.digest()[:12])
    return config
