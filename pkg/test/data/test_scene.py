"""Test the synthetic scene generator."""

import numpy as np
import pytest

from modules.data.synthesis.scene import (
    BodySpec,
    GroundTruth,
    NoiseSpec,
    ObservationSet,
    RigLayout,
    SceneSpec,
    build_rig,
    export_ply,
    ground_truth_trajectories,
    look_at,
    make_bodies,
    occluded_points,
    render_observations,
)
from modules.data.utils.manual_data import load_manual_scene


class TestSceneSpec:
    """Test the declarative scene records and the rig helpers."""

    def test_default_rig(self):
        rig = build_rig(SceneSpec(bodies=[BodySpec()]))
        assert len(rig) == 69, "The default rig has 69 cameras."
        for camera in rig:
            assert np.isclose(np.linalg.norm(camera.center[:2]), 1.5)
            assert camera.optical_axis[:2] @ camera.center[:2] < 0, (
                "Cameras face the cylinder axis."
            )
        assert rig.frame_rate == 30.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(bodies=[BodySpec()], frames=1)
        with pytest.raises(ValueError):
            SceneSpec(bodies=[])
        with pytest.raises(ValueError):
            SceneSpec(bodies=[BodySpec(label=5)], n_classes=4)
        with pytest.raises(ValueError):
            NoiseSpec(confusion_rate=1.5)
        with pytest.raises(ValueError):
            NoiseSpec(confusion_mode="global")
        with pytest.raises(ValueError):
            BodySpec(shape="torus")
        with pytest.raises(ValueError):
            RigLayout(row_heights=[1.0], cameras_per_row=[3, 3])

    def test_look_at(self):
        center, target = np.array([1.5, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])
        rotation = look_at(center, target)
        assert np.allclose(rotation @ rotation.T, np.eye(3))
        assert np.isclose(np.linalg.det(rotation), 1.0)
        assert np.allclose(rotation[2], [-1.0, 0.0, 0.0]), "The third row looks ahead."
        assert rotation[1] @ [0.0, 0.0, 1.0] < 0, "Image rows run downwards."

    def test_occluded_points(self):
        pixels = np.array([[10.0, 10.0], [10.5, 10.0], [11.0, 10.0], [50.0, 50.0]])
        depth = np.array([1.0, 2.0, 3.0, 1.0])
        bodies = np.array([0, 1, 0, 1])
        valid = np.ones(4, dtype=bool)
        occluded = occluded_points(pixels, depth, bodies, valid, radius=1.0)
        assert occluded.tolist() == [False, True, True, False]
        valid[0] = False
        occluded = occluded_points(pixels, depth, bodies, valid, radius=1.0)
        assert occluded.tolist() == [False, False, True, False], (
            "Points outside the image occlude nothing."
        )


class TestRenderObservations:
    """Test the occlusion-aware renderer."""

    def setup_method(self):
        self.scene = load_manual_scene(frames=4)
        self.rig = build_rig(self.scene)
        self.observations, self.truth = render_observations(self.scene, self.rig)

    def test_ground_truth(self):
        assert self.truth.n_points == 50
        assert self.truth.positions.shape == (4, 50, 3)
        assert self.truth.visible.shape == (4, 8, 50)
        assert sorted(np.unique(self.truth.labels)) == [1, 2]
        bodies = make_bodies(self.scene)
        assert np.allclose(self.truth.positions[2, :30], bodies[0].positions(2))

    def test_noiseless_pixels(self):
        for t in range(4):
            pixels, _ = self.rig.project_all(self.truth.positions[t])
            for point, (cameras, observed) in self.observations.groups(t).items():
                assert np.allclose(observed, pixels[cameras, point], atol=1e-3), (
                    "Noiseless observations are the exact projections."
                )
                assert self.truth.visible[t, cameras, point].all()

    def test_rigid_motion(self):
        positions = self.truth.positions[:, :30]
        distances = np.linalg.norm(positions[:, :1] - positions[:, 1:], axis=2)
        assert np.allclose(distances, distances[0]), "Bodies move rigidly."

    def test_deterministic(self):
        again, truth = render_observations(self.scene, self.rig)
        assert np.array_equal(again.records, self.observations.records)
        assert np.array_equal(truth.visible, self.truth.visible)

    def test_save_load(self, tmp_path):
        self.observations.save(tmp_path / "observations.bin")
        loaded = ObservationSet.load(tmp_path / "observations.bin")
        assert np.array_equal(loaded.records, self.observations.records)
        self.truth.save(tmp_path)
        truth = GroundTruth.load(tmp_path)
        assert np.array_equal(truth.positions, self.truth.positions)

    def test_ground_truth_trajectories(self):
        trajectories = ground_truth_trajectories(self.truth)
        assert len(trajectories) > 0
        for traj in trajectories:
            assert traj.dissolve > traj.emerge
            assert np.all(traj.visibility.sum(axis=1) >= 2)
            assert np.allclose(
                traj.points, self.truth.positions[traj.frames, traj.source_id]
            )

    def test_export_ply(self, tmp_path):
        path = tmp_path / "truth.ply"
        export_ply(path, self.truth.positions[0], self.truth.labels)
        lines = path.read_text().splitlines()
        assert "element vertex 50" in lines
        assert len(lines) == 10 + 50
