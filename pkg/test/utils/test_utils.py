"""Test the description and plotting helpers."""

import logging

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pytest

from modules.affinity.graph import AffinityGraph
from modules.data.load.loaders import SceneArtifacts
from modules.data.synthesis.confidence import simulate_confidence
from modules.data.synthesis.scene import build_rig, render_observations
from modules.data.utils.manual_data import (
    load_manual_scene,
    load_manual_trajectories,
)
from modules.utils.utils import (
    describe_affinity,
    describe_scene,
    describe_trajectories,
    load_scene_config,
    plot_point_cloud,
    setup_logging,
)


class TestDescribe:
    """Test the describe_* helpers."""

    def test_describe_scene(self, capsys):
        scene = load_manual_scene(frames=2)
        rig = build_rig(scene)
        observations, truth = render_observations(scene, rig)
        fields = simulate_confidence(scene, rig, truth)
        describe_scene(SceneArtifacts(rig, truth, observations, fields))
        out = capsys.readouterr().out
        assert "Scene with 50 points on 2 bodies" in out
        assert "seen by 8 cameras over 2 frames" in out

    def test_describe_trajectories(self, capsys):
        trajectories, _ = load_manual_trajectories()
        describe_trajectories(trajectories)
        out = capsys.readouterr().out
        assert "Stream with 12 trajectories over 5 frames." in out
        assert "Lifespan in frames: min 5, median 5, max 5" in out

    def test_describe_affinity(self, capsys):
        graph = AffinityGraph(4, [0, 1], [1, 2], [0.5, 1.0])
        describe_affinity(graph)
        out = capsys.readouterr().out
        assert "4 nodes and 2 edges" in out
        assert "There are 1 isolated nodes." in out


class TestHelpers:
    """Test the configuration, logging and plotting helpers."""

    def test_load_scene_config(self):
        scene = load_scene_config("two_bodies_noisy")
        assert scene.frames == 90
        assert len(scene.bodies) == 2
        assert scene.noise.confusion_rate == 0.3

    def test_setup_logging(self):
        setup_logging(verbose=True)
        assert logging.getLogger().level == logging.DEBUG
        setup_logging(verbose=True, quiet=True)
        assert logging.getLogger().level == logging.WARNING, "Quiet wins."
        setup_logging()
        assert logging.getLogger().level == logging.INFO

    def test_plot_point_cloud(self):
        trajectories, groups = load_manual_trajectories()
        points = trajectories.positions[0].copy()
        points[3] = np.nan
        ax = plot_point_cloud(points, groups, title="Frame 0")
        assert ax.get_title() == "Frame 0"
        assert len(ax.collections[0].get_offsets()) == 11, "NaN rows are skipped."
        with pytest.raises(ValueError):
            plot_point_cloud(np.zeros((3, 2)))
