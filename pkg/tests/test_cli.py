"""End-to-end command line checks, run in process through main().

Covers the train / eval / compress / decompress / flatten-demo / analyze
subcommands, the documented exit codes, and the seed override rules.
"""

from __future__ import annotations

import re

import numpy as np
import pytest

from intflow.cli import main
from intflow.data import read_raw_image, write_raw_image
from intflow.grid import GridTensor

TOY_INI = """
[data]
dataset = toy
bits = 1

[model]
couplings = 1
net_depth = 1
net_hidden = 4

[train]
epochs = 1
iters_per_epoch = 5
batch_size = 32
seed = 0
use_ema = false
"""


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Train one tiny toy model through the CLI and hand out its artifacts."""
    root = tmp_path_factory.mktemp("cli_toy")
    config = root / "toy.ini"
    config.write_text(TOY_INI)
    out = root / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    return config, out


def _value(stdout: str, key: str) -> float:
    match = re.search(rf"^{key} = ([-\d.eE+]+)$", stdout, flags=re.M)
    assert match is not None, f"{key} missing from output:\n{stdout}"
    return float(match.group(1))


class TestTrain:
    def test_writes_model_and_metrics(self, toy_run):
        _, out = toy_run
        assert (out / "model.idfm").is_file()
        assert (out / "metrics.csv").is_file()

    def test_echoes_config_and_reports_rate(self, toy_run, tmp_path, capsys):
        config, out = toy_run
        rerun = tmp_path / "rerun"
        assert main(["train", "--config", str(config), "--out", str(rerun)]) == 0
        stdout = capsys.readouterr().out
        assert "dataset = toy" in stdout
        assert "epochs_run = 1" in stdout
        bpd = _value(stdout, "final_bpd")
        assert np.isfinite(bpd)
        # Same config and seed: the trained weights are byte-reproducible.
        assert (rerun / "model.idfm").read_bytes() == (out / "model.idfm").read_bytes()

    def test_seed_flag_overrides_environment(self, toy_run, tmp_path, capsys, monkeypatch):
        config, _ = toy_run
        monkeypatch.setenv("IDF_SEED", "77")
        out = tmp_path / "env_seed"
        assert main(["train", "--config", str(config), "--out", str(out)]) == 0
        assert "seed = 77" in capsys.readouterr().out

        out2 = tmp_path / "flag_seed"
        args = ["train", "--config", str(config), "--out", str(out2), "--seed", "5"]
        assert main(args) == 0
        stdout = capsys.readouterr().out
        assert "seed = 5" in stdout
        assert "seed = 77" not in stdout

    def test_bad_seed_env_is_a_usage_error(self, toy_run, monkeypatch, tmp_path, capsys):
        config, _ = toy_run
        monkeypatch.setenv("IDF_SEED", "lucky")
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "IDF_SEED" in capsys.readouterr().err


class TestEval:
    def test_reports_exact_validation_rate(self, toy_run, capsys):
        config, out = toy_run
        code = main(["eval", "--config", str(config), "--model", str(out / "model.idfm")])
        assert code == 0
        bpd = _value(capsys.readouterr().out, "val_bpd")
        # The exact rate of any model is bounded below by the source entropy.
        assert bpd >= 0.9232196723 - 1e-9
        assert bpd < 4.0


class TestCodecCommands:
    def test_compress_decompress_round_trip(self, toy_run, tmp_path, capsys, rng):
        _, out = toy_run
        model = str(out / "model.idfm")
        image = GridTensor(rng.integers(0, 2, size=(1, 1, 1, 2)), 1)
        raw_in = tmp_path / "image.idfi"
        write_raw_image(raw_in, image)
        stream = tmp_path / "image.idfz"
        assert main(["compress", "--model", model, "--in", str(raw_in), "--out", str(stream)]) == 0
        stdout = capsys.readouterr().out
        assert _value(stdout, "bytes") == stream.stat().st_size
        assert np.isfinite(_value(stdout, "stream_bpd"))

        raw_out = tmp_path / "restored.idfi"
        code = main(["decompress", "--model", model, "--in", str(stream), "--out", str(raw_out)])
        assert code == 0
        restored = read_raw_image(raw_out)
        np.testing.assert_array_equal(restored.codes, image.codes)
        assert restored.bits == image.bits

    def test_missing_model_file_is_an_input_error(self, tmp_path, capsys):
        args = [
            "compress",
            "--model", str(tmp_path / "no.idfm"),
            "--in", str(tmp_path / "no.idfi"),
            "--out", str(tmp_path / "no.idfz"),
        ]
        assert main(args) == 3
        assert "error:" in capsys.readouterr().err

    def test_corrupt_stream_is_an_input_error(self, toy_run, tmp_path, capsys):
        _, out = toy_run
        stream = tmp_path / "junk.idfz"
        stream.write_bytes(b"this is not a stream")
        args = [
            "decompress",
            "--model", str(out / "model.idfm"),
            "--in", str(stream),
            "--out", str(tmp_path / "restored.idfi"),
        ]
        assert main(args) == 3
        assert "error:" in capsys.readouterr().err


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.ini")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_config_content(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\ndataset = toy\n\n[model]\ndropout = 0.5\n")
        assert main(["train", "--config", str(bad)]) == 2
        assert "model.dropout" in capsys.readouterr().err

    def test_missing_required_argument_exits_via_argparse(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["train"])
        assert excinfo.value.code == 2
        capsys.readouterr()


class TestFlattenDemo:
    def test_audits_the_flattened_toy_joint(self, capsys):
        assert main(["flatten-demo", "--bits", "1"]) == 0
        stdout = capsys.readouterr().out
        assert "counts = (2, 2)" in stdout
        assert "rank_one = True" in stdout
        entropy = _value(stdout, "entropy_bpd")
        bpd = _value(stdout, "flatten_bpd")
        assert bpd == pytest.approx(entropy, abs=1e-9)


class TestAnalyze:
    def test_agreement_sweep_writes_csv(self, toy_run, tmp_path, capsys):
        config, _ = toy_run
        out = tmp_path / "analysis"
        args = ["analyze", "--config", str(config), "--out", str(out), "--what", "agreement"]
        assert main(args) == 0
        assert (out / "agreement.csv").is_file()
        assert "agreement eps=" in capsys.readouterr().out
