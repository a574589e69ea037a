import json

import pytest
import yaml

from probpit import cli
from probpit import experiment as ex
from probpit.errors import NumericError
from probpit.io import read_csv

from test_experiment import TINY


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({**TINY, "output_dir": str(tmp_path / "out")}))
    return path


class TestExitCodes:
    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 1

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--bogus"])
        assert exc.value.code == 1

    def test_bad_set_syntax(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--set", "novalue"])
        assert exc.value.code == 1

    def test_config_error_is_usage(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path), "--set", "trials_per_gamma=0"]) == 1
        assert "trials_per_gamma" in capsys.readouterr().err

    def test_missing_corpus_is_data_error(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path)]) == 2
        assert "synth" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["synth", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_numeric_error(self, monkeypatch, config_file):
        def boom(*args, **kwargs):
            raise NumericError("training diverged at epoch 1, batch 1")

        monkeypatch.setattr(ex, "cmd_train", boom)
        assert cli.main(["train", "--config", str(config_file)]) == 3


class TestWorkflow:
    def test_end_to_end(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["synth", "--config", str(config_file)]) == 0
        assert cli.main(["train", "--config", str(config_file), "--gamma", "2.5", "--seed", "1"]) == 0
        run = out / "runs" / "gamma2.5_seed1"
        assert json.loads((run / "meta.json").read_text())["label"] == "prob_pit"
        assert cli.main(["eval", "--config", str(config_file), "--gamma", "2.5", "--seed", "1"]) == 0
        assert len(read_csv(run / "eval.csv")) == 3 * 2 + 1
        assert cli.main(["eval", "--config", str(config_file), "--estimator", "ideal"]) == 0
        assert (out / "eval_ideal.csv").exists()
        assert cli.main(["costgap", "--config", str(config_file)]) == 0
        assert (out / "costgap" / "seed0" / "summary.csv").exists()
        assert cli.main(
            ["sweep", "--config", str(config_file), "--gamma", "0", "--gamma", "3", "--set", "trials_per_gamma=1"]
        ) == 0
        assert len(read_csv(out / "sweep" / "trials.csv")) == 2
        assert "mean SDR" in capsys.readouterr().out

    def test_flags_override_config(self, config_file):
        parser = cli.build_parser()
        args = parser.parse_args(
            ["sweep", "--config", str(config_file), "--out", "x", "--jobs", "3", "--seed", "9", "--gamma", "1"]
        )
        cfg = cli._config(args)
        assert (cfg.output_dir, cfg.jobs, cfg.base_seed, cfg.gamma_list) == ("x", 3, 9, (0.0, 1.0))

    def test_set_parses_yaml_values(self):
        assert cli._parse_set("train.lr=0.5") == ("train.lr", 0.5)
        assert cli._parse_set("gamma_list=[1, 2]") == ("gamma_list", [1, 2])
