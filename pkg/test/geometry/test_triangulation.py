"""Test the RANSAC triangulation."""

import numpy as np
import pytest

from modules.data.utils.manual_data import load_manual_rig
from modules.geometry.camera import Camera, Observation, Rig, project
from modules.geometry.triangulation import (
    RansacParams,
    triangulate,
    triangulate_many,
)
from modules.utils.exceptions import DegenerateTriangulationError


class TestTriangulate:
    """Test triangulate and triangulate_many."""

    def setup_method(self):
        self.rig = load_manual_rig()
        self.point = np.array([0.05, -0.08, 1.1])

    def observations(self, cameras, noise=None):
        observations = []
        for c in cameras:
            pixel = project(self.rig[c], self.point)
            if noise is not None:
                pixel = pixel + noise[c]
            observations.append(Observation(camera_id=c, pixel=pixel))
        return observations

    def test_noiseless_round_trip(self):
        result = triangulate(self.rig, self.observations(range(5)))
        assert np.linalg.norm(result.point - self.point) < 1e-6, (
            "Noiseless projections should give back the point."
        )
        assert result.inliers.all()
        assert result.mean_reprojection < 1e-6

    def test_gross_outliers(self):
        rng = np.random.default_rng(3)
        noise = rng.normal(0.0, 0.3, size=(8, 2))
        noise[5] += [50.0, 0.0]
        noise[6] += [0.0, -50.0]
        result = triangulate(self.rig, self.observations(range(7), noise))
        assert result.inlier_ids.tolist() == [0, 1, 2, 3, 4], (
            "Exactly the five correct observations should be inliers."
        )
        assert np.linalg.norm(result.point - self.point) < 0.01

    def test_parallel_rays(self):
        cameras = tuple(
            Camera(
                id=k,
                fx=1000.0,
                fy=1000.0,
                cx=640.0,
                cy=512.0,
                rotation=np.eye(3),
                center=[0.001 * k, 0.0, 0.0],
                width=1280,
                height=1024,
            )
            for k in range(2)
        )
        rig = Rig(cameras=cameras)
        point = np.array([0.0, 0.0, 1000.0])
        observations = [
            Observation(camera_id=k, pixel=project(rig[k], point)) for k in range(2)
        ]
        with pytest.raises(DegenerateTriangulationError):
            triangulate(rig, observations)

    def test_invalid_input(self):
        with pytest.raises(ValueError):
            triangulate(self.rig, self.observations([0]))
        observations = self.observations([0, 0])
        with pytest.raises(ValueError):
            triangulate(self.rig, observations)

    def test_triangulate_many(self):
        rng = np.random.default_rng(1)
        points = rng.uniform([-0.2, -0.2, 0.8], [0.2, 0.2, 1.2], size=(6, 3))
        groups = []
        for k, point in enumerate(points):
            cameras = np.arange(k % 3, k % 3 + 4)
            pixels = np.stack([project(self.rig[c], point) for c in cameras])
            if k == 4:
                pixels[0] += [40.0, 40.0]
            groups.append((cameras, pixels))
        results = triangulate_many(self.rig, groups)
        assert len(results) == 6
        for k, (result, point) in enumerate(zip(results, points, strict=True)):
            assert result is not None
            assert np.linalg.norm(result.point - point) < 1e-5, (
                f"Group {k} triangulated to the wrong point."
            )
        assert results[4].inliers.tolist() == [False, True, True, True]
        assert results[0].inliers.all()
        assert triangulate_many(self.rig, []) == []

    def test_refinement_keeps_inliers(self):
        rng = np.random.default_rng(7)
        noise = rng.normal(0.0, 1.0, size=(8, 2))
        ransac = RansacParams(threshold_px=2.0)
        result = triangulate(self.rig, self.observations(range(8), noise), ransac)
        assert result.inliers.sum() >= 2
        assert np.all(result.residuals[result.inliers] < ransac.threshold_px)

    def test_params(self):
        with pytest.raises(ValueError):
            RansacParams(threshold_px=0.0)
        with pytest.raises(ValueError):
            RansacParams(confidence=1.0)
