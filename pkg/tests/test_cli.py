import json

import numpy as np
import pytest
from click.testing import CliRunner

from cli import cli

SMALL_RUN = """
[experiment]
model = reference_mlp
dump_acbp = true

[train]
epochs = 2

[data]
num_samples = 128
num_classes = 4
image_size = 8

[quant_error]
trials = 5
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_RUN)
    return path


@pytest.fixture
def trained(runner, config_path, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(cli, ["--config", str(config_path), "--seed", "7", "--out", str(out), "train"])
    assert result.exit_code == 0, result.output
    return out


def test_missing_config_exits_with_config_code(runner, tmp_path):
    missing = tmp_path / "nope.ini"
    result = runner.invoke(cli, ["--config", str(missing), "cost"])
    assert result.exit_code == 2
    assert "nope.ini" in result.output


def test_bad_override_is_a_config_error(runner, config_path, tmp_path):
    result = runner.invoke(cli, ["--config", str(config_path), "--out", str(tmp_path), "--bits-gx", "3", "cost"])
    assert result.exit_code == 2


def test_train_records_seed_override(trained):
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["command"] == "train"
    assert summary["seed"] == 7
    assert summary["overrides"]["experiment.seeds"] == [7]
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [record["epoch"] for record in records] == [0, 1]
    assert "wall_time" not in records[0]


def test_acbp_inspect_and_verify(runner, trained):
    container = trained / "acbp" / "linear1.acbp"
    result = runner.invoke(cli, ["acbp", "inspect", str(container)])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert "bits=8" in lines
    assert "n=16" in lines
    assert "rank=8" in lines
    assert runner.invoke(cli, ["acbp", "verify", str(container)]).exit_code == 0


def test_acbp_verify_flags_a_flipped_bit(runner, trained):
    container = trained / "acbp" / "linear1.acbp"
    data = bytearray(container.read_bytes())
    data[len(data) // 2] ^= 0x10
    container.write_bytes(bytes(data))
    result = runner.invoke(cli, ["acbp", "verify", str(container)])
    assert result.exit_code == 1
    assert "Format Error" in result.output


def test_acbp_dump(runner, trained, tmp_path):
    container = trained / "acbp" / "linear3.acbp"
    dumps = tmp_path / "dumps"
    result = runner.invoke(cli, ["--out", str(dumps), "acbp", "dump", str(container), "--axis", "0", "--reconstruct"])
    assert result.exit_code == 0, result.output
    values = np.load(dumps / "linear3.npy")
    # hidden activations of a 32-sample batch, projected along the batch axis
    assert values.shape == (32, 1, 32)
    assert np.all(np.isfinite(values))


def test_cost_writes_reports(runner, config_path, tmp_path):
    out = tmp_path / "cost"
    result = runner.invoke(cli, ["--config", str(config_path), "--out", str(out), "cost"])
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "cost.json").read_text())
    labels = [report["strategy"] for report in payload["reports"]]
    assert labels == ["vanilla", "naive", "hq", "lbp-wht", "hlq", "hlq-no-acbp"]
    assert (out / "cost.csv").read_text().startswith("name,B,L,I,O,strategy")


def test_quant_error_command(runner, config_path, tmp_path):
    out = tmp_path / "qe"
    result = runner.invoke(cli, ["--config", str(config_path), "--out", str(out), "quant-error"])
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "quant_error.json").read_text())["summary"]
    assert summary["trials"] == 5


def test_repeated_runs_are_byte_identical(runner, config_path, tmp_path):
    out = tmp_path / "repeat"
    contents = []
    for _ in range(2):
        for command in ("train", "cost"):
            result = runner.invoke(cli, ["--config", str(config_path), "--seed", "3", "--out", str(out), command])
            assert result.exit_code == 0, result.output
        contents.append({name: (out / name).read_bytes()
                         for name in ("metrics.jsonl", "summary.json", "cost.json", "cost.csv", "acbp/linear1.acbp")})
    assert contents[0] == contents[1]
