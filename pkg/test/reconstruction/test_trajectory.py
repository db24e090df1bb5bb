"""Test the trajectory containers and stream format."""

import json

import numpy as np
import pytest

from modules.data.utils.manual_data import load_manual_track_set, load_manual_trajectories
from modules.reconstruction.trajectory import Trajectory, TrajectorySet


class TestTrajectory:
    """Test the Trajectory record."""

    def test_lifespan(self):
        traj = Trajectory(0, 5, 3, np.zeros((4, 3)), np.full((4, 2), 0.5))
        assert traj.dissolve == 6
        assert traj.frames.tolist() == [3, 4, 5, 6]
        assert traj.alive(3) and traj.alive(6) and not traj.alive(7)
        assert traj.visible_cameras(4, 0.3).tolist() == [0, 1]

    def test_invalid(self):
        with pytest.raises(ValueError):
            Trajectory(0, 0, 0, np.zeros((0, 3)), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            Trajectory(0, 0, 0, np.zeros((2, 3)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            Trajectory(0, 0, 0, np.zeros((1, 3)), np.full((1, 2), 1.5))
        with pytest.raises(ValueError):
            Trajectory(0, 0, 0, np.full((1, 3), np.nan), np.zeros((1, 2)))


class TestTrajectorySet:
    """Test TrajectorySet."""

    def setup_method(self):
        nan = [np.nan] * 3
        points = np.array(
            [
                [[0, 0, 0], nan, [1, 1, 1]],
                [[0, 0, 1], [2, 0, 0], [1, 1, 2]],
                [[0, 0, 2], [2, 0, 1], nan],
                [nan, [2, 0, 2], nan],
            ],
            dtype=float,
        )
        self.trajset = load_manual_track_set(points)

    def test_positions(self):
        assert self.trajset.emerge.tolist() == [0, 1, 0]
        assert self.trajset.dissolve.tolist() == [2, 3, 1]
        assert self.trajset.alive_at(3).tolist() == [1]
        assert np.isnan(self.trajset.positions[3, 0]).all()

    def test_shared_frames(self):
        assert self.trajset.shared_frames(0, 1).tolist() == [1, 2]
        assert self.trajset.shared_frames(1, 2).tolist() == [1]
        assert self.trajset.shared_frames(0, 0).tolist() == [0, 1, 2]

    def test_invalid(self):
        traj = Trajectory(1, 0, 0, np.zeros((2, 3)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            TrajectorySet([traj], n_frames=4, n_cameras=2)
        traj = Trajectory(0, 0, 3, np.zeros((2, 3)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            TrajectorySet([traj], n_frames=4, n_cameras=2)

    def test_save_load(self, tmp_path):
        trajset, _ = load_manual_trajectories()
        trajset.trajectories[3].visibility[2, 1] = 0.0
        path = tmp_path / "trajectories.bin"
        trajset.save(path)
        loaded = TrajectorySet.load(path)
        assert len(loaded) == len(trajset)
        assert loaded.n_frames == trajset.n_frames
        assert loaded.n_cameras == trajset.n_cameras
        assert np.allclose(loaded.positions, trajset.positions, atol=1e-6)
        assert np.allclose(loaded[3].visibility, trajset[3].visibility)
        assert loaded[3].visibility[2, 1] == 0.0

    def test_to_json(self, tmp_path):
        path = tmp_path / "trajectories.json"
        self.trajset.to_json(path)
        with open(path) as f:
            document = json.load(f)
        assert document["n_frames"] == 4
        assert [t["emerge"] for t in document["trajectories"]] == [0, 1, 0]
