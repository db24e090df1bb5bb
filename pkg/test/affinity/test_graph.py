"""Test the rigid-motion affinity graph."""

import numpy as np
import pytest

from modules.affinity.graph import (
    AffinityGraph,
    AffinityParams,
    affinity_weight,
    build_affinity,
)
from modules.affinity.rigid import TransformField, reconstruction_error
from modules.data.utils.manual_data import load_manual_trajectories, load_manual_two_cubes


class TestAffinityWeight:
    """Test the affinity kernel."""

    def test_kernel(self):
        assert np.isclose(affinity_weight(1.0), np.exp(-1.0)), (
            "An error equal to tau should weigh exp(-1)."
        )
        assert affinity_weight(0.0) == 1.0
        assert affinity_weight(np.inf) == 0.0
        weights = affinity_weight(np.linspace(0.0, 3.0, 7))
        assert np.all(np.diff(weights) < 0)

    def test_params(self):
        with pytest.raises(ValueError):
            AffinityParams(tau=0.0)
        with pytest.raises(ValueError):
            AffinityParams(dropout=1.0)
        with pytest.raises(ValueError):
            AffinityParams(error_mode="window")


class TestAffinityGraph:
    """Test the AffinityGraph container."""

    def setup_method(self):
        self.graph = AffinityGraph(4, [2, 0, 1], [0, 1, 3], [0.5, 1.0, 0.25])

    def test_canonical_order(self):
        assert self.graph.rows.tolist() == [0, 0, 1]
        assert self.graph.cols.tolist() == [1, 2, 3]
        assert self.graph.weight(2, 0) == self.graph.weight(0, 2) == 0.5
        assert self.graph.weight(1, 2) == 0.0
        assert self.graph.neighbors(0).tolist() == [1, 2]

    def test_invalid(self):
        with pytest.raises(ValueError):
            AffinityGraph(3, [1], [1], [0.5])
        with pytest.raises(ValueError):
            AffinityGraph(3, [0], [1], [0.0])
        with pytest.raises(ValueError):
            AffinityGraph(3, [0, 1], [1, 0], [0.5, 0.5])
        with pytest.raises(ValueError):
            AffinityGraph(3, [0], [3], [0.5])

    def test_to_networkx(self):
        graph = self.graph.to_networkx()
        assert graph.number_of_nodes() == 4
        assert graph.number_of_edges() == 3
        assert graph[1][3]["weight"] == 0.25

    def test_save_load(self, tmp_path):
        path = tmp_path / "affinity.bin"
        self.graph.save(path)
        loaded = AffinityGraph.load(path)
        assert loaded.n_nodes == 4
        assert loaded.rows.tolist() == self.graph.rows.tolist()
        assert np.allclose(loaded.weights, self.graph.weights)


class TestBuildAffinity:
    """Test build_affinity."""

    def setup_method(self):
        self.trajset, self.groups = load_manual_two_cubes()
        self.params = AffinityParams(
            tau=0.001, eps=0.08, eps_a=0.3, dropout=0.0, inlier_tol=0.002
        )

    def test_two_cubes(self):
        graph = build_affinity(self.trajset, self.params)
        assert len(graph) == 16 * 15 // 2, "Without dropout every close pair is scored."
        for i, j, w in graph:
            if self.groups[i] == self.groups[j]:
                assert w > 0.999, f"Edge ({i}, {j}) inside a cube is not rigid."
            else:
                assert w < 1e-3, f"Edge ({i}, {j}) across cubes is too strong."
        assert graph.params["tau"] == 0.001

    def test_dropout_is_deterministic(self):
        params = AffinityParams(
            tau=0.001, eps=0.08, eps_a=0.3, dropout=0.5, inlier_tol=0.002, seed=3
        )
        first = build_affinity(self.trajset, params)
        second = build_affinity(self.trajset, params)
        assert np.array_equal(first.rows, second.rows)
        assert np.array_equal(first.cols, second.cols)
        assert np.array_equal(first.weights, second.weights)
        assert 0 < len(first) < 120
        full = build_affinity(self.trajset, self.params)
        kept = set(zip(first.rows.tolist(), first.cols.tolist(), strict=True))
        assert kept <= set(zip(full.rows.tolist(), full.cols.tolist(), strict=True))

    def test_larger_directed_weight(self):
        trajset, _ = load_manual_trajectories()
        transforms = TransformField.empty(len(trajset), trajset.n_frames)
        transforms.valid[0, 1:] = True
        transforms.translations[0, 1:] = [0.01, 0.0, 0.0]
        params = AffinityParams(tau=0.02, eps_a=0.3, dropout=0.0)
        graph = build_affinity(trajset, params, transforms=transforms)
        assert graph.rows.tolist() == [0] * 11, (
            "Pairs without a prediction in either direction get no edge."
        )
        for j in range(1, 12):
            expected = affinity_weight(
                reconstruction_error(trajset, 0, j, transforms) / params.tau
            )
            assert np.isclose(graph.weight(0, j), expected)
