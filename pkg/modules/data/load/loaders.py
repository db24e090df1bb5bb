import json
from dataclasses import dataclass

import numpy as np

from modules.affinity.graph import AffinityGraph
from modules.affinity.rigid import TransformField
from modules.data.load.base import AbstractLoader
from modules.data.synthesis.confidence import ConfidenceFieldSet
from modules.data.synthesis.scene import GroundTruth, ObservationSet
from modules.geometry.camera import Rig, load_rig
from modules.reconstruction.trajectory import TrajectorySet
from modules.semantics.semantic_map import SemanticMapTable


@dataclass
class SceneArtifacts:
    r"""Outputs of the synthesis stage."""

    rig: Rig
    truth: GroundTruth
    observations: ObservationSet
    fields: ConfidenceFieldSet


@dataclass
class LabelArtifacts:
    r"""Outputs of the inference stage."""

    argmax_labels: np.ndarray
    final_labels: np.ndarray
    summary: dict


class SceneLoader(AbstractLoader):
    r"""Loader for the synthesised scene, observations and fields.

    Parameters
    ----------
    directory : str or Path
        Synthesis stage directory.
    """

    def load(self) -> SceneArtifacts:
        r"""Load the synthesised scene.

        Returns
        -------
        SceneArtifacts
            Rig, ground truth, observations and confidence fields.
        """
        return SceneArtifacts(
            rig=load_rig(self.path("rig.json")),
            truth=GroundTruth.load(self.directory),
            observations=ObservationSet.load(self.path("observations.bin")),
            fields=ConfidenceFieldSet.load(self.directory),
        )


class TrajectoryLoader(AbstractLoader):
    r"""Loader for the reconstructed trajectory stream."""

    def load(self) -> TrajectorySet:
        return TrajectorySet.load(self.path("trajectories.bin"))


class SemanticMapLoader(AbstractLoader):
    r"""Loader for the semantic maps of a trajectory stream."""

    def load(self) -> SemanticMapTable:
        return SemanticMapTable.load(self.directory)


class AffinityLoader(AbstractLoader):
    r"""Loader for the affinity graph and the local transforms."""

    def load(self) -> tuple[AffinityGraph, TransformField]:
        r"""Load the affinity stage outputs.

        Returns
        -------
        AffinityGraph
            The graph.
        TransformField
            Local transforms it was scored with.
        """
        return (
            AffinityGraph.load(self.path("affinity.bin")),
            TransformField.load(self.directory),
        )


class LabelLoader(AbstractLoader):
    r"""Loader for the inferred labels."""

    def load(self) -> LabelArtifacts:
        labels = np.load(self.path("labels.npy"))
        with open(self.path("summary.json")) as f:
            summary = json.load(f)
        return LabelArtifacts(
            argmax_labels=labels[0], final_labels=labels[1], summary=summary
        )


LOADERS = {
    "synth": SceneLoader,
    "reconstruct": TrajectoryLoader,
    "semantics": SemanticMapLoader,
    "affinity": AffinityLoader,
    "infer": LabelLoader,
}
