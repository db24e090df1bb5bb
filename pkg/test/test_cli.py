"""Test the semtraj command line."""

import json
from pathlib import Path

import pytest

from modules.cli import (
    EXIT_INVALID,
    EXIT_OK,
    build_parser,
    config_overrides,
    main,
    parse_seeds,
)

TINY = Path(__file__).parents[1] / "configs" / "experiments" / "tiny.yaml"


class TestParser:
    """Test the argument parsing helpers."""

    def test_parse_seeds(self):
        assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
        assert parse_seeds("1,3,5") == [1, 3, 5]
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", str(TINY), "--seeds", "4..1"])

    def test_flag_overrides(self):
        args = build_parser().parse_args(
            ["infer", str(TINY), "--lambda", "0", "--tau", "0.05", "--out", "runs/x"]
        )
        assert config_overrides(args) == [
            "energy.lambda_=0.0",
            "affinity.tau=0.05",
            "output_dir=runs/x",
        ]


class TestMain:
    """Test the exit codes and outputs of main."""

    def test_missing_bodies(self, tmp_path, capsys):
        path = tmp_path / "broken.yaml"
        path.write_text("scene:\n  frames: 10\n")
        assert main(["synth", str(path), "-q"]) == EXIT_INVALID
        assert "scene.bodies" in capsys.readouterr().err

    def test_unknown_scene(self, tmp_path, capsys):
        code = main(
            ["synth", str(TINY), "--scene", "no_such_scene", "--out", str(tmp_path), "-q"]
        )
        assert code == EXIT_INVALID
        assert "no_such_scene" in capsys.readouterr().err
        assert not (tmp_path / "manifest.json").exists()

    def test_unknown_metric(self, tmp_path):
        assert main(["eval", str(tmp_path), "precision", "-q"]) == EXIT_INVALID

    def test_missing_run(self, tmp_path):
        assert main(["describe", str(tmp_path / "nothing"), "-q"]) == EXIT_INVALID

    def test_seed_sweep(self, tmp_path, capsys):
        out = tmp_path / "runs"
        code = main(
            ["synth", str(TINY), "--out", str(out), "--seeds", "0..1", "--json", "-q"]
        )
        assert code == EXIT_OK
        outcome = json.loads(capsys.readouterr().out)
        assert [run["seed"] for run in outcome["details"]["runs"]] == [0, 1]
        for seed in (0, 1):
            assert (out / f"seed_{seed}" / "manifest.json").exists()

    def test_no_smoothness_equals_argmax(self, tmp_path, capsys):
        code = main(
            ["infer", str(TINY), "--out", str(tmp_path), "--lambda", "0", "--json", "-q"]
        )
        assert code == EXIT_OK
        outcome = json.loads(capsys.readouterr().out)
        headline = outcome["details"]["runs"][0]["headline"]
        assert headline["equals_argmax"] is True
        assert headline["changed_labels"] == 0
