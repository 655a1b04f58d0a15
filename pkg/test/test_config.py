import logging
from pathlib import Path

import pytest

from nopeek.config import Config, RunConfig, load_config
from nopeek.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("NOPEEK_OUT", raising=False)
    monkeypatch.delenv("NOPEEK_THREADS", raising=False)


def _key_of(data) -> str:
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(data)
    return info.value.key


class TestDefaults:
    """
    Testing strategy:
    - empty mapping and empty file give the built-in defaults
    - environment overrides the output root and worker cap; YAML overrides the environment
    - invalid worker cap in the environment falls back with a warning
    """

    def test_empty_config(self):
        assert RunConfig.from_dict({}) == RunConfig()
        assert RunConfig.parse("") == RunConfig()

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("NOPEEK_OUT", "/tmp/elsewhere")
        monkeypatch.setenv("NOPEEK_THREADS", "3")
        config = RunConfig.from_dict({})
        assert (config.out, config.threads) == ("/tmp/elsewhere", 3)
        assert RunConfig.from_dict({"threads": 5}).threads == 5

    @pytest.mark.parametrize("value", ["zero", "0"])
    def test_invalid_thread_env(self, monkeypatch, caplog, value):
        monkeypatch.setenv("NOPEEK_THREADS", value)
        with caplog.at_level(logging.WARNING, logger="nopeek.config"):
            assert Config.get_defaults()[1] == Config.DEFAULT_THREADS
        assert "NOPEEK_THREADS" in caplog.text


class TestValidation:
    """
    Testing strategy:
    - unknown keys at the top level, in a section and in arch are named
    - wrong types named with their dotted path
    - range checks: set sizes, shrinkage, map method, grid box
    - arch: input extents come from data.extents; extents incompatible with the
      architecture rejected
    - malformed YAML
    """

    @pytest.mark.parametrize(
        "data, key",
        [
            ({"sed": 1}, "sed"),
            ({"train": {"epoch": 3}}, "train.epoch"),
            ({"arch": {"layers": 3}}, "arch.layers"),
            ({"train": {"epochs": "ten"}}, "train.epochs"),
            ({"seed": True}, "seed"),
            ({"data": {"extents": [16, 16]}}, "data.extents"),
            ({"experiment": {"set_sizes": [1, 16]}}, "experiment.set_sizes"),
            ({"experiment": {"set_sizes": [16, 16]}}, "experiment.set_sizes"),
            ({"scoring": {"shrinkage": 1.0}}, "scoring.shrinkage"),
            ({"scoring": {"methods": ["linf", "psychic"]}}, "scoring.methods"),
            ({"report": {"map_method": "equivariant"}}, "report.map_method"),
            ({"grid": {"box": [0, 4]}}, "grid.box"),
            ({"train": {"box_sizes": [8, 4]}}, "train.box_sizes"),
            ({"arch": {"input_extents": [16, 16, 1]}}, "arch.input_extents"),
            ({"data": {"extents": [30, 30, 1]}}, "arch"),
            ([1, 2], "<root>"),
        ],
    )
    def test_bad_value_named(self, data, key):
        assert _key_of(data) == key

    def test_message_names_key(self):
        with pytest.raises(ConfigError, match=r"^train\.epoch: unknown key"):
            RunConfig.from_dict({"train": {"epoch": 3}})

    def test_arch_follows_data_extents(self):
        config = RunConfig.from_dict(
            {
                "data": {"extents": [16, 16, 1]},
                "arch": {"encoder_channels": [4, 8], "decoder_channels": [8, 4], "decoder_base_channels": 4, "code_dim": 8},
            }
        )
        assert config.arch.input_extents == (16, 16, 1)
        assert config.arch.encoder_channels == (4, 8)

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.parse("seed: [1,\n")
        assert info.value.key == "<file>"


class TestOverridesAndDigest:
    """
    Testing strategy:
    - flags override configured values; None leaves them
    - out-of-range override rejected
    - feature kinds override both the feature and attribute sections
    - digest: ignores worker cap and output root, changes with seed and sections
    """

    def test_overrides(self):
        config = RunConfig().with_overrides(seed=4, trials=10, set_sizes=(8,), methods=("linf",))
        assert (config.seed, config.experiment.trials, config.experiment.set_sizes) == (4, 10, (8,))
        assert config.scoring.methods == ("linf",)
        assert RunConfig().with_overrides() == RunConfig()

    def test_bad_override(self):
        with pytest.raises(ConfigError) as info:
            RunConfig().with_overrides(threads=0)
        assert info.value.key == "threads"

    def test_feature_kinds(self):
        config = RunConfig().with_overrides(feature_kinds=("code",))
        assert config.features.kinds == ("code",) and config.attribute.kinds == ("code",)

    def test_digest(self):
        base = RunConfig()
        assert base.with_overrides(threads=8, out="/tmp/other").digest() == base.digest()
        assert base.with_overrides(seed=1).digest() != base.digest()
        assert base.with_overrides(trials=5).digest() != base.digest()


class TestLoad:
    """
    Testing strategy:
    - shipped configuration files load
    - no path gives defaults
    - unreadable path rejected as a configuration error
    """

    @pytest.mark.asyncio
    @pytest.mark.parametrize("name", ["default.yaml", "smoke.yaml", "full.yaml"])
    async def test_shipped_configs(self, name):
        config = await load_config(CONFIGS / name)
        assert config.arch.input_extents == config.data.extents

    @pytest.mark.asyncio
    async def test_smoke_values(self):
        config = await load_config(CONFIGS / "smoke.yaml")
        assert config.seed == 7
        assert config.data.holdout >= 200
        assert config.experiment.set_sizes == (8, 16)

    @pytest.mark.asyncio
    async def test_no_path(self):
        assert await load_config(None) == RunConfig()

    @pytest.mark.asyncio
    async def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            await load_config(tmp_path / "absent.yaml")
        assert info.value.key == "--config"
