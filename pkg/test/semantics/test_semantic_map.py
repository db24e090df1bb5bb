"""Test the per-trajectory semantic maps."""

import numpy as np

from modules.data.synthesis.confidence import simulate_confidence
from modules.data.synthesis.scene import (
    build_rig,
    ground_truth_trajectories,
    render_observations,
)
from modules.data.utils.manual_data import load_manual_scene
from modules.semantics.pooling import AveragePooling
from modules.semantics.semantic_map import (
    SemanticMap,
    SemanticMapTable,
    argmax_label,
    build_semantic_map,
    build_semantic_maps,
    semantic_maps_from_pooled,
)


class TestSemanticMap:
    """Test SemanticMap helpers."""

    def test_argmax_label(self):
        assert argmax_label(np.array([0.5, 0.5])) == 1, "Ties go to the lowest label."
        assert argmax_label(SemanticMap(np.array([0.1, 0.2, 0.7]))) == 3

    def test_from_pooled(self):
        nan = [np.nan, np.nan]
        pooled = np.array(
            [
                [[0.8, 0.2], nan],
                [nan, nan],
                [[0.6, 0.4], nan],
            ]
        )
        table = semantic_maps_from_pooled(pooled)
        assert np.allclose(table.values[0], [0.7, 0.3]), (
            "No-view frames are left out of the average."
        )
        assert table.n_pooled.tolist() == [2, 0]
        assert table.valid.tolist() == [True, False]
        assert np.allclose(table.values[1], 0.0)

    def test_table_save_load(self, tmp_path):
        table = SemanticMapTable([[0.2, 0.8], [0.6, 0.4]], [True, True], [3, 1])
        table.save(tmp_path)
        loaded = SemanticMapTable.load(tmp_path)
        assert np.allclose(loaded.values, table.values)
        assert loaded.labels.tolist() == [2, 1]
        frame = loaded.to_frame()
        assert list(frame.columns) == [
            "trajectory_id",
            "conf_1",
            "conf_2",
            "label",
            "n_pooled",
            "valid",
        ]


class TestBuildSemanticMaps:
    """Test the semantic maps of ground-truth trajectories."""

    def setup_method(self):
        self.scene = load_manual_scene(frames=3)
        self.scene.noise.bleed_radius = 0.0
        self.rig = build_rig(self.scene)
        _, self.truth = render_observations(self.scene, self.rig)
        self.fields = simulate_confidence(self.scene, self.rig, self.truth)
        self.trajset = ground_truth_trajectories(self.truth)

    def test_noiseless_labels(self):
        table = build_semantic_maps(self.trajset, self.fields, self.rig)
        assert table.valid.all()
        assert np.array_equal(
            table.labels, self.truth.labels[self.trajset.source_ids]
        ), "A noiseless recognizer gives every trajectory its true label."

    def test_batch_matches_single(self):
        table = build_semantic_maps(self.trajset, self.fields, self.rig)
        for traj in list(self.trajset)[:10]:
            single = build_semantic_map(traj, self.fields, self.rig)
            assert np.allclose(single.values, table.values[traj.id])
            assert single.n_pooled == table.n_pooled[traj.id]

    def test_camera_subset(self):
        table = build_semantic_maps(
            self.trajset, self.fields, self.rig, camera_subset=[0]
        )
        traj = self.trajset[0]
        single = build_semantic_map(traj, self.fields, self.rig, camera_subset=[0])
        assert np.allclose(single.values, table.values[0])
        assert single.valid == bool(table.valid[0])

    def test_average_pooling(self):
        table = build_semantic_maps(
            self.trajset, self.fields, self.rig, pooling=AveragePooling()
        )
        assert table.valid.all()
        assert np.all(table.values <= 1.0 + 1e-9)
