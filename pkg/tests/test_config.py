from pathlib import Path

import pytest

from config.experiment import ExperimentConfig
from hlq.errors.handlers import ConfigError
from hlq.harness.data import synthetic_dataset, write_dataset


def test_defaults_are_valid():
    config = ExperimentConfig()
    config.validate()
    assert config.seeds == (0,)
    assert config.strategy().name == "hlq"
    assert config.train_config().warmup_epochs == 1


def test_parses_sections():
    config = ExperimentConfig.from_string(
        "[experiment]\nseeds = 1, 2 3\nmodel = small_cnn\n"
        "[train]\nepochs = 16\nwarmup_epochs = 4\n"
        "[strategy]\nname = hq\nbits_gw = 4\nrounding = stochastic\n"
    )
    assert config.seeds == (1, 2, 3)
    assert config.train_config().warmup_epochs == 4
    strategy = config.strategy()
    assert (strategy.name, strategy.grad_w.bits, strategy.rounding) == ("hq", 4, "stochastic")
    assert config.model_spec().layers[0].kind == "conv"


@pytest.mark.parametrize("text", [
    "[experiment]\ncolour = blue\n",
    "[plotting]\ndpi = 300\n",
    "[train]\nepochs = many\n",
    "[strategy]\nrounding = nearest\n",
    "[strategy]\nbits_gx = 3\n",
    "[train]\nepochs = 0\n",
    "[experiment]\nseeds =\n",
    "not an ini file",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string(text)


def test_missing_file_is_named(tmp_path):
    path = tmp_path / "absent.ini"
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_file(path)
    assert str(path) in str(info.value)


def test_dataset_path_relative_to_config(tmp_path):
    write_dataset(tmp_path / "tiny.hlqd", synthetic_dataset(num_samples=8, num_classes=2, image_size=4))
    config_path = tmp_path / "exp.ini"
    config_path.write_text("[data]\nsource = file\npath = tiny.hlqd\nnum_classes = 2\nimage_size = 4\n")
    config = ExperimentConfig.from_file(config_path)
    assert len(config.dataset()) == 8


def test_missing_dataset_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[data]\nsource = file\npath = nowhere.hlqd\n", base_dir=tmp_path)


def test_overrides_are_recorded():
    config = ExperimentConfig()
    config.override("strategy", "rank", 4).override("strategy", "bits_gx", None)
    assert config.overrides == {"strategy.rank": 4}
    assert config.strategy().grad_w.rank == 4
    with pytest.raises(ConfigError):
        config.override("strategy", "colour", "red")


def test_exempt_layers_run_vanilla():
    config = ExperimentConfig.from_string("[strategy]\nexempt = conv0 linear9\n")
    layers = {layer.name: layer for layer in config.model_spec().layers if layer.name}
    assert layers["conv0"].strategy.name == "vanilla"
    assert layers["conv3"].strategy is None
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[strategy]\nexempt = conv99\n").model_spec()


def test_effective_is_json_ready():
    effective = ExperimentConfig().effective()
    assert effective["experiment"]["seeds"] == [0]
    assert effective["gradcheck"]["strategies"] == ["naive", "hq", "lbp-wht", "hlq"]


def test_example_file_lists_the_defaults():
    example = Path(__file__).resolve().parent.parent / "config" / "example.ini"
    assert ExperimentConfig.from_file(example).values == ExperimentConfig().values
