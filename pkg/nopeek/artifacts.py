"""
Run-directory plumbing: atomic writes, labeled seed derivation, provenance
records and the fixed layout of artifacts under an output directory.
"""

import hashlib
import json
import logging
import os
import platform
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import MissingArtifactError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write data to path through a temporary file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def derive_seed(master: int, label: str) -> int:
    """
    Stage seed for label, derived from the master seed by hashing.

    @returns a 63-bit non-negative integer; equal inputs give equal seeds
    """
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def counter_rng(seed: int, *counters: int) -> np.random.Generator:
    """
    Counter-based generator for one unit of work (an image, a trial).

    The stream depends only on (seed, counters), so units can be processed in
    any order and on any number of threads.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counters])))


def write_provenance(out_dir: PathLike, command: str, config_digest: str, seed: int) -> Path:
    """
    Record what produced the artifacts of one command run.

    @returns path of the provenance file
    """
    import scipy

    from . import __version__

    record = {
        "command": command,
        "config_sha256": config_digest,
        "seed": seed,
        "versions": {
            "nopeek": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    path = RunLayout(Path(out_dir)).provenance_dir / f"{command}.json"
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class RunLayout:
    """Where each stage reads and writes inside one output directory."""

    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def main_manifest(self) -> Path:
        return self.data_dir / "main" / "manifest.tsv"

    @property
    def attr_manifest(self) -> Path:
        return self.data_dir / "attr" / "manifest.tsv"

    def model(self, corpus: str = "main") -> Path:
        return self.root / "models" / f"{corpus}.npae"

    def loss_history(self, corpus: str = "main") -> Path:
        return self.root / "models" / f"{corpus}_loss.tsv"

    @property
    def features_dir(self) -> Path:
        return self.root / "features"

    def features(self, kind: str, corpus: str = "main") -> Path:
        return self.features_dir / corpus / f"{kind}.tsv"

    @property
    def scores_dir(self) -> Path:
        return self.root / "scores"

    def scores(self, method: str) -> Path:
        return self.scores_dir / f"{method}.tsv"

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    @property
    def recall_table(self) -> Path:
        return self.results_dir / "recall.tsv"

    @property
    def frequencies(self) -> Path:
        return self.results_dir / "frequencies.tsv"

    @property
    def probe_scores(self) -> Path:
        return self.results_dir / "probe_scores.tsv"

    @property
    def attribute_table(self) -> Path:
        return self.results_dir / "attribute_table.tsv"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def provenance_dir(self) -> Path:
        return self.root / "provenance"


def require(path: Path, stage: str) -> Path:
    """
    @returns path if it exists
    @raises MissingArtifactError: naming the stage that produces it otherwise
    """
    if not path.exists():
        raise MissingArtifactError(str(path), stage)
    return path
