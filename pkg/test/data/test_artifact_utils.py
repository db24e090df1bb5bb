"""Test the hashing, seeding and loading helpers of the stage artifacts."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from omegaconf import OmegaConf

from modules.data.load.loaders import LOADERS, TrajectoryLoader
from modules.data.utils.manual_data import load_manual_trajectories
from modules.data.utils.utils import (
    derive_seed,
    ensure_serializable,
    file_digest,
    make_hash,
    stage_rng,
)

GOLDEN = Path(__file__).parents[1] / "golden" / "derive_seed.json"


@dataclass
class Params:
    tau: float = 0.02
    bins: tuple = (0.1, 0.3)


class TestSerialization:
    """Test ensure_serializable and make_hash."""

    def test_ensure_serializable(self):
        obj = {
            "params": Params(),
            "array": np.arange(3),
            "scalar": np.float32(0.5),
            "path": Path("runs/x"),
            "set": {3, 1},
            "config": OmegaConf.create({"a": [1, 2]}),
            "other": object(),
        }
        out = ensure_serializable(obj)
        assert out == {
            "params": {"tau": 0.02, "bins": [0.1, 0.3]},
            "array": [0, 1, 2],
            "scalar": 0.5,
            "path": "runs/x",
            "set": [1, 3],
            "config": {"a": [1, 2]},
            "other": None,
        }
        json.dumps(out)

    def test_make_hash(self):
        a = ensure_serializable(Params())
        assert make_hash(a) == make_hash(ensure_serializable(Params()))
        assert make_hash(a) != make_hash(ensure_serializable(Params(tau=0.03)))
        assert 0 <= make_hash(a) < 4294967295


class TestSeeds:
    """Test derive_seed and stage_rng."""

    def test_golden(self):
        with open(GOLDEN) as f:
            golden = json.load(f)
        for key, value in golden.items():
            master, stage, stream = key.split(":")
            assert derive_seed(int(master), stage, int(stream)) == value

    def test_stage_rng(self):
        a = stage_rng(0, "synth", 1).random(4)
        b = stage_rng(0, "synth", 1).random(4)
        c = stage_rng(0, "synth", 2).random(4)
        assert np.array_equal(a, b), "Streams are reproducible."
        assert not np.array_equal(a, c), "Streams are independent."


class TestArtifacts:
    """Test file_digest and the stage loaders."""

    def test_file_digest(self, tmp_path):
        path = tmp_path / "a.bin"
        path.write_bytes(b"abc")
        assert file_digest(path) == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )

    def test_trajectory_loader(self, tmp_path):
        trajectories, _ = load_manual_trajectories()
        with pytest.raises(FileNotFoundError):
            TrajectoryLoader(tmp_path).load()
        trajectories.save(tmp_path / "trajectories.bin")
        loaded = LOADERS["reconstruct"](tmp_path).load()
        assert len(loaded) == len(trajectories)
        assert np.allclose(loaded.positions, trajectories.positions, atol=1e-6)

    def test_registry(self):
        assert list(LOADERS) == [
            "synth",
            "reconstruct",
            "semantics",
            "affinity",
            "infer",
        ]
