import json

import pandas as pd
import pytest

from solaris.cli import EXIT_CONFIG, EXIT_OK, build_parser, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("SOLARIS_CONFIG", "SOLARIS_OUTPUT_DIR", "SOLARIS_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def small_config(tmp_path):
    """A tiny experiment file."""
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "world": {"n_users": 12, "n_items": 2000, "candidates_per_request": 30, "seed": 4},
        "enrichment": {"k_neighbors": 4},
        "run": {"n_requests": 150, "seeds": [4, 5], "sweep_requests": 60, "progress_every": 50},
    }), encoding="utf-8")
    return path


class TestParser:
    def test_subcommands(self):
        args = build_parser().parse_args(["sweep", "--levels", "0,0.2,0.5,1.0", "--quality"])
        assert args.command == "sweep"
        assert args.levels == [0.0, 0.2, 0.5, 1.0]
        assert args.quality is True

    @pytest.mark.parametrize("levels", ["0.5,0.2", "0,1.5", "a,b", ""])
    def test_bad_levels_exit_2(self, levels):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["sweep", "--levels", levels])
        assert exc.value.code == 2

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestCommands:
    def test_simulate(self, small_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
        assert "treatment BCE" in capsys.readouterr().out
        report = json.loads((out / "report.json").read_text())
        assert report["treatment"]["config"]["world"]["seed"] == 4

    def test_seed_override(self, small_config, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(small_config), "--out", str(out), "--seed-override", "9"]) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["treatment"]["config"]["world"]["seed"] == 9
        assert report["treatment"]["config"]["run"]["seeds"] == [9]

    def test_output_dir_from_environment(self, small_config, tmp_path, monkeypatch):
        monkeypatch.setenv("SOLARIS_OUTPUT_DIR", str(tmp_path / "env"))
        assert main(["ablate", "--config", str(small_config)]) == EXIT_OK
        assert (tmp_path / "env" / "ablation.csv").exists()

    def test_sweep_levels(self, small_config, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(small_config), "--out", str(out), "--levels", "0,0.2,0.5,1.0"]) == EXIT_OK
        table = pd.read_csv(out / "sweep.csv")
        assert table.groupby("seed").size().tolist() == [4, 4]
        assert sorted(table.coverage_level.unique().tolist()) == [0.0, 0.2, 0.5, 1.0]


class TestConfigErrors:
    """Configuration problems exit 2 with diagnostics on stderr."""

    def test_zero_requests(self, tmp_path, capsys):
        path = tmp_path / "zero.yaml"
        path.write_text("run:\n  n_requests: 0\n", encoding="utf-8")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert f"{path}:2: run.n_requests" in err
        assert not (tmp_path / "o").exists()

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "typo.yaml"
        path.write_text("world:\n  seed: 1\ncache:\n  ttl_hour: 5\n", encoding="utf-8")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert f"{path}:4: cache.ttl_hour" in capsys.readouterr().err

    def test_unparseable_yaml(self, tmp_path, capsys):
        path = tmp_path / "broken.yaml"
        path.write_text("run: {n_requests: 5\n", encoding="utf-8")
        assert main(["sweep", "--config", str(path)]) == EXIT_CONFIG
        assert "cannot parse" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["ablate", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
