"""Test the local rigid transforms and prediction errors."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from modules.affinity.rigid import (
    MIN_SPREAD,
    RigidRansacParams,
    RigidTransform,
    TransformField,
    directed_errors,
    estimate_transforms,
    kabsch,
    local_transform,
    neighbor_pairs,
    neighbors,
    reconstruction_error,
)
from modules.data.utils.manual_data import (
    load_manual_track_set,
    load_manual_trajectories,
    load_manual_two_cubes,
)
from modules.utils.exceptions import UnderdeterminedTransformError


class TestRigidTransform:
    """Test RigidTransform and kabsch."""

    def test_kabsch(self):
        rotation = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
        rng = np.random.default_rng(2)
        source = rng.normal(size=(6, 3))
        estimate, spread = kabsch(source, source @ rotation.T)
        assert np.allclose(estimate, rotation, atol=1e-9)
        assert spread > MIN_SPREAD

    def test_kabsch_collinear(self):
        source = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        rotations, spread = kabsch(source[None], source[None])
        assert rotations.shape == (1, 3, 3)
        assert spread[0] < MIN_SPREAD, "Collinear samples leave the rotation free."
        assert np.allclose(np.linalg.det(rotations[0]), 1.0)

    def test_compose(self):
        a = RigidTransform(Rotation.from_rotvec([0, 0, 0.4]).as_matrix(), np.array([1.0, 0, 0]))
        b = RigidTransform(Rotation.from_rotvec([0.1, 0, 0]).as_matrix(), np.array([0, 2.0, 0]))
        points = np.array([[0.3, -0.2, 0.1], [1.0, 1.0, 1.0]])
        assert np.allclose(a.compose(b).apply(points), a.apply(b.apply(points)))
        assert np.isclose(a.angle_to(RigidTransform.identity()), 0.4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3), np.zeros(2))
        with pytest.raises(ValueError):
            RigidRansacParams(inlier_tol=0.0)


class TestNeighbors:
    """Test neighbors and neighbor_pairs."""

    def setup_method(self):
        nan = [np.nan] * 3
        frame = [[0, 0, 0], [0.03, 0, 0], [0, 0.05, 0], [0, 0, 0.049], nan]
        last = [[0, 0, 0], [0.03, 0, 0], [0, 0.05, 0], [0, 0, 0.049], [-0.01, 0, 0]]
        self.trajset = load_manual_track_set(np.array([frame, frame, last]))

    def test_neighbors(self):
        assert neighbors(self.trajset, 0, 0.05).tolist() == [1, 3], (
            "The radius is exclusive and one shared frame is not enough."
        )
        assert neighbors(self.trajset, 4, 0.05, overlap_min=1).tolist() == [0, 1]
        with pytest.raises(ValueError):
            neighbors(self.trajset, 0, 0.0)

    def test_neighbor_pairs(self):
        pairs, worst = neighbor_pairs(self.trajset, 0.05)
        assert pairs.tolist() == [[0, 1], [0, 3]]
        assert np.allclose(worst, [0.03, 0.049])


class TestLocalTransform:
    """Test local_transform on two interleaved rigid groups."""

    def setup_method(self):
        self.trajset, self.groups = load_manual_trajectories()
        self.ransac = RigidRansacParams(inlier_tol=0.002)

    def test_planted_translation(self):
        estimate = local_transform(
            self.trajset, 0, 2, ransac=self.ransac, candidates=np.arange(1, 12)
        )
        assert np.allclose(estimate.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(estimate.translation, [0.01, 0.0, 0.0], atol=1e-9)
        assert estimate.inliers.tolist() == list(range(1, 8)), (
            "Exactly the other cube corners support the translation."
        )

    def test_planted_rotation(self):
        estimate = local_transform(
            self.trajset, 8, 3, ransac=self.ransac, candidates=np.array([9, 10, 11])
        )
        expected = Rotation.from_rotvec([0.0, 0.0, 0.2]).as_matrix()
        assert np.allclose(estimate.rotation, expected, atol=1e-9)
        before = self.trajset.positions[2, 8:]
        assert np.allclose(
            estimate.apply(before), self.trajset.positions[3, 8:], atol=1e-9
        )

    def test_underdetermined(self):
        with pytest.raises(UnderdeterminedTransformError):
            local_transform(self.trajset, 0, 1, candidates=np.array([1, 2]))

    def test_not_alive(self):
        with pytest.raises(ValueError):
            local_transform(self.trajset, 0, 0, candidates=np.arange(1, 8))


class TestPredictionErrors:
    """Test directed_errors and reconstruction_error."""

    def setup_method(self):
        self.trajset, _ = load_manual_trajectories()
        self.field = TransformField.empty(len(self.trajset), self.trajset.n_frames)
        self.field.valid[0, 1:] = True
        self.field.translations[0, 1:] = [0.01, 0.0, 0.0]

    def test_frame_mode(self):
        assert reconstruction_error(self.trajset, 0, 5, self.field) < 1e-12
        assert reconstruction_error(self.trajset, 0, 8, self.field) > 0.003, (
            "The translation cannot predict a spinning point."
        )
        assert reconstruction_error(self.trajset, 1, 0, self.field) == np.inf, (
            "Without any transform there is no prediction."
        )

    def test_emergence_mode(self):
        errors = directed_errors(
            self.trajset, self.field, [0, 0], [3, 9], mode="emergence"
        )
        assert errors[0] < 1e-12
        assert errors[1] > 0.003

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            directed_errors(self.trajset, self.field, [0], [1], mode="window")

    def test_field_save_load(self, tmp_path):
        self.field.save(tmp_path)
        loaded = TransformField.load(tmp_path)
        assert np.array_equal(loaded.valid, self.field.valid)
        assert np.allclose(loaded[0, 2].translation, [0.01, 0.0, 0.0])
        assert loaded[1, 2] is None


class TestEstimateTransforms:
    """Test estimate_transforms on two separated cubes."""

    def test_two_cubes(self):
        trajset, groups = load_manual_two_cubes()
        field = estimate_transforms(
            trajset, eps=0.08, ransac=RigidRansacParams(inlier_tol=0.002)
        )
        assert not field.valid[:, 0].any()
        assert field.valid[:, 1:].all()
        spin = Rotation.from_rotvec([0.0, 0.0, 0.2]).as_matrix()
        for i in range(len(trajset)):
            expected = np.eye(3) if groups[i] == 0 else spin
            assert np.allclose(field.rotations[i, 1:], expected, atol=1e-9), (
                f"Trajectory {i} got the wrong local rotation."
            )


class TestNoisyLocalTransform:
    """Test local_transform under 1 mm point noise and foreign neighbours."""

    def setup_method(self):
        self.rng = np.random.default_rng(11)
        self.rotation = Rotation.from_rotvec([0.1, -0.05, 0.2]).as_matrix()
        self.translation = np.array([0.02, 0.0, 0.01])
        self.ransac = RigidRansacParams(inlier_tol=0.01)

    def track_set(self, offsets, foreign):
        """Anchor at the origin plus neighbours; ``foreign`` ones drift 4 cm."""
        before = np.vstack([np.zeros(3), offsets])
        after = before @ self.rotation.T + self.translation
        after[1:][foreign] += [0.0, 0.04, 0.0]
        tracks = np.stack([before, after])
        tracks += self.rng.normal(scale=0.001, size=tracks.shape)
        return load_manual_track_set(tracks), after

    def test_contaminated_neighbourhood(self):
        offsets = self.rng.uniform(-0.08, 0.08, size=(20, 3))
        foreign = np.zeros(20, dtype=bool)
        foreign[[1, 4, 7, 10, 13, 16]] = True
        trajset, after = self.track_set(offsets, foreign)
        estimate = local_transform(
            trajset, 0, 1, ransac=self.ransac, candidates=np.arange(1, 21)
        )
        truth = RigidTransform(self.rotation, self.translation)
        assert estimate.angle_to(truth) < 0.04
        assert np.linalg.norm(estimate.translation - self.translation) < 0.008
        clean = np.flatnonzero(~foreign) + 1
        assert set(estimate.inliers) <= set(clean), (
            "No drifting neighbour supports the estimate."
        )
        assert len(estimate.inliers) >= 12
        predicted = estimate.apply(trajset.positions[0, clean])
        assert np.linalg.norm(predicted - after[clean], axis=1).mean() < 0.007

    def test_mixed_bodies(self):
        self.rotation, self.translation = np.eye(3), np.zeros(3)
        offsets = self.rng.uniform(-0.06, 0.06, size=(12, 3))
        foreign = np.arange(12) >= 8
        trajset, _ = self.track_set(offsets, foreign)
        estimate = local_transform(
            trajset, 0, 1, ransac=self.ransac, candidates=np.arange(1, 13)
        )
        assert estimate.inliers.tolist() == list(range(1, 9)), (
            "Exactly the eight static neighbours are inliers."
        )
        assert estimate.angle_to(RigidTransform.identity()) < 0.06
        assert np.linalg.norm(estimate.translation) < 0.008


class TestEquivariance:
    """Test that a global rigid motion leaves the prediction errors unchanged."""

    def test_global_motion(self):
        trajset, _ = load_manual_two_cubes()
        motion = Rotation.from_rotvec([0.4, -0.7, 1.1])
        shift = np.array([1.5, -0.3, 2.0])
        moved = load_manual_track_set(
            motion.apply(trajset.positions.reshape(-1, 3)).reshape(
                trajset.positions.shape
            )
            + shift,
            n_cameras=trajset.n_cameras,
        )
        ransac = RigidRansacParams(inlier_tol=0.002)
        field = estimate_transforms(trajset, eps=0.08, ransac=ransac)
        moved_field = estimate_transforms(moved, eps=0.08, ransac=ransac)
        assert np.array_equal(field.valid, moved_field.valid)

        g = motion.as_matrix()
        conjugated = np.einsum("ab,mtbc,dc->mtad", g, field.rotations, g)
        assert np.allclose(moved_field.rotations[:, 1:], conjugated[:, 1:], atol=1e-9)

        n = len(trajset)
        sources, targets = np.nonzero(~np.eye(n, dtype=bool))
        for mode in ("frame", "emergence"):
            errors = directed_errors(trajset, field, sources, targets, mode)
            moved_errors = directed_errors(moved, moved_field, sources, targets, mode)
            assert np.allclose(moved_errors, errors, rtol=0.0, atol=1e-9), (
                f"Errors changed under a global motion in {mode} mode."
            )
