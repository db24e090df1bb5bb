"""Test the experiment configuration layer."""

import json
from pathlib import Path

import numpy as np
import pytest

from modules.pipeline.config import (
    OUTPUT_ENV,
    camera_subset,
    config_hash,
    derive_seed,
    load_config,
    load_experiment_config,
    save_config,
)
from modules.utils.exceptions import ConfigError

GOLDEN = Path(__file__).parents[1] / "golden"


class TestLoadConfig:
    """Test load_config."""

    def setup_method(self):
        self.tiny = load_experiment_config("tiny")

    def test_experiment_file(self):
        assert len(self.tiny.scene.bodies) == 2
        assert self.tiny.scene.bodies[1].shape == "box"
        assert self.tiny.affinity.dropout == 0.0
        assert self.tiny.energy.audit is True

    def test_missing_bodies(self):
        with pytest.raises(ConfigError) as info:
            load_config(overrides=["scene.frames=10"])
        assert info.value.key == "scene.bodies", "The error names the missing key."

    def test_invalid_values(self):
        with pytest.raises(ConfigError) as info:
            load_experiment_config("tiny", ["energy.lambda_=abc"])
        assert info.value.key == "energy.lambda_"
        with pytest.raises(ConfigError):
            load_experiment_config("tiny", ["energy.lambda_=-1"])
        with pytest.raises(ConfigError):
            load_experiment_config("tiny", ["scene.colour=red"])
        with pytest.raises(ConfigError):
            load_config("does/not/exist.yaml")

    def test_named_scene(self):
        config = load_experiment_config("tiny")
        assert config.scene.noise.confusion_rate == 0.0
        config = load_config(
            Path(__file__).parents[2] / "configs" / "experiments" / "tiny.yaml",
            scene="two_bodies_noisy",
        )
        assert config.scene.noise.confusion_rate == 0.3
        assert config.scene.bodies[0].n_points == 400
        assert config.scene.frames == 90
        assert config.affinity.dropout == 0.0, "Only the scene section is replaced."
        with pytest.raises(ConfigError):
            load_config(scene="no_such_scene")

    def test_seed_interpolation(self):
        config = load_experiment_config("tiny", ["seed=5"])
        assert config.scene.seed == config.affinity.seed == config.evaluation.seed == 5
        config = load_experiment_config("tiny", ["seed=5", "affinity.seed=2"])
        assert config.affinity.seed == 2 and config.scene.seed == 5

    def test_output_dir_precedence(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert load_experiment_config("tiny").output_dir == str(tmp_path / "env")
        config = load_experiment_config("tiny", [f"output_dir={tmp_path / 'flag'}"])
        assert config.output_dir == str(tmp_path / "flag"), (
            "Explicit overrides win over the environment."
        )

    def test_save_round_trip(self, tmp_path):
        path = tmp_path / "config.yaml"
        save_config(self.tiny, path)
        again = load_config(path)
        assert config_hash(again) == config_hash(self.tiny)
        assert config_hash(again.energy) != config_hash(
            load_experiment_config("tiny", ["energy.lambda_=2"]).energy
        )


class TestSeeds:
    """Test the derived random streams."""

    def test_golden_seeds(self):
        with open(GOLDEN / "derive_seed.json") as f:
            golden = json.load(f)
        for key, expected in golden.items():
            master, stage, stream = key.split(":")
            assert derive_seed(int(master), stage, int(stream)) == expected, (
                f"Derived seed of {key} changed."
            )

    def test_camera_subset(self):
        config = load_experiment_config("tiny")
        assert camera_subset(config, 0) is None
        assert camera_subset(config, 12) is None
        subset = camera_subset(config, 4)
        assert len(subset) == 4 and np.all(np.diff(subset) > 0)
        assert np.array_equal(subset, camera_subset(config, 4))
        assert subset.max() < 12
