import numpy as np
import pytest

from nopeek import commands
from nopeek.artifacts import RunLayout, atomic_write_text
from nopeek.config import RunConfig
from nopeek.dataset import ImageKind, Manifest, ManifestRecord, Split
from nopeek.errors import RejectedInputError
from nopeek.experiments import FrequencyTable, ProbeKind, RecallCurve, write_recall_table

KINDS = (
    ("holdout", Split.HOLDOUT, ImageKind.TYPICAL, 30),
    ("anomaly", Split.PROBE, ImageKind.ANOMALY, 10),
    ("control", Split.PROBE, ImageKind.CONTROL, 10),
)


def _rows(text: str):
    return [line.split("\t") for line in text.strip().split("\n")]


class TestReport:
    """
    Testing strategy:
    - deciles ranked within each image kind: typical, anomaly and control manifests
    - probe manifests carry identification frequencies in every row; the typical one
      has none, even when typical images outscore every probe
    - a kind with fewer than ten images gets no manifest
    - probe score file: kinds read back, unknown kind rejected
    """

    def _write_run(self, root, anomalies: int = 10) -> RunConfig:
        layout = RunLayout(root)
        records, lines, counts = [], ["id\tkind\tlinf"], {}
        rng = np.random.default_rng(0)
        for prefix, split, kind, count in KINDS:
            count = anomalies if kind is ImageKind.ANOMALY else count
            for index in range(count):
                image_id = f"{prefix}-{index:03d}"
                records.append(ManifestRecord(image_id, f"images/{image_id}.pgm", split, kind))
                # typical images score highest so a pooled ranking would put them in every upper decile
                offset = 10.0 if kind is ImageKind.TYPICAL else 0.0
                lines.append(f"{image_id}\t{kind.value}\t{offset + rng.uniform():.9g}")
                if split is Split.PROBE:
                    counts[("linf", image_id, 8)] = (4, 1, 3, 4)
        Manifest(layout.main_manifest.parent, tuple(records)).save(layout.main_manifest)
        curves = [RecallCurve("linf", kind, (8,), (0.25,), (0.75,), (1.0,), 40) for kind in ProbeKind]
        atomic_write_text(layout.recall_table, write_recall_table(curves))
        atomic_write_text(layout.frequencies, FrequencyTable(counts).to_text())
        atomic_write_text(layout.probe_scores, "\n".join(lines) + "\n")
        return RunConfig().with_overrides(out=str(root))

    @pytest.mark.asyncio
    async def test_deciles_per_kind(self, tmp_path):
        config = self._write_run(tmp_path)
        written = await commands.report(config)
        report_dir = tmp_path / "report"
        assert report_dir / "deciles-anomaly.tsv" in written

        for kind, prefix in ((ImageKind.ANOMALY, "anomaly-"), (ImageKind.CONTROL, "control-")):
            rows = _rows((report_dir / f"deciles-{kind.value}.tsv").read_text())
            assert rows[0] == ["decile", "id", "path", "score", "n8@1", "n8@5", "n8@10"]
            assert len(rows) == 11
            for row in rows[1:]:
                assert row[1].startswith(prefix)
                assert "NA" not in row
                assert row[4:] == ["0.250000", "0.750000", "1.000000"]

        typical = _rows((report_dir / "deciles-typical.tsv").read_text())
        assert typical[0] == ["decile", "id", "path", "score"]
        assert all(row[1].startswith("holdout-") for row in typical[1:])
        assert typical[1][2] == f"data/main/images/{typical[1][1]}.pgm"

    @pytest.mark.asyncio
    async def test_small_kind_skipped(self, tmp_path):
        config = self._write_run(tmp_path, anomalies=4)
        await commands.report(config)
        assert not (tmp_path / "report" / "deciles-anomaly.tsv").exists()
        assert (tmp_path / "report" / "deciles-control-typical.tsv").is_file()

    def test_probe_score_kinds(self):
        ids, kinds, scores = commands.parse_probe_scores("id\tkind\tlinf\na\tanomaly\t0.5\nb\ttypical\t0.25\n")
        assert ids == ("a", "b")
        assert kinds == (ImageKind.ANOMALY, ImageKind.TYPICAL)
        assert np.array_equal(scores["linf"], [0.5, 0.25])
        with pytest.raises(RejectedInputError):
            commands.parse_probe_scores("id\tkind\tlinf\na\tstrange\t0.5\n")
