import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from modules.data.synthesis.confidence import ConfidenceFieldSet
from modules.geometry.camera import Rig
from modules.reconstruction.trajectory import Trajectory, TrajectorySet
from modules.semantics.pooling import (
    AbstractPooling,
    PoolParams,
    ViewPooling,
    collect_views,
    pool_sequence,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SemanticMap:
    r"""3D semantic map of one trajectory.

    Parameters
    ----------
    values : np.ndarray
        Class confidences (N,) in [0, 1].
    valid : bool
        False when no frame of the lifespan could be pooled; ``values`` is
        then the zero vector.
    n_pooled : int
        Number of frames that contributed to the average.
    """

    values: np.ndarray
    valid: bool = True
    n_pooled: int = 1

    @property
    def n_classes(self) -> int:
        return len(self.values)


def argmax_label(semantic_map: SemanticMap | np.ndarray) -> int:
    r"""Label of the largest entry, 1-based; ties go to the lowest label."""
    values = getattr(semantic_map, "values", semantic_map)
    return int(np.argmax(values)) + 1


def _as_set(traj: Trajectory, n_frames: int, n_cameras: int) -> TrajectorySet:
    single = Trajectory(
        id=0,
        source_id=traj.source_id,
        emerge=traj.emerge,
        points=traj.points,
        visibility=traj.visibility,
        reprojection=traj.reprojection,
    )
    return TrajectorySet([single], n_frames=n_frames, n_cameras=n_cameras)


def build_semantic_map(
    traj: Trajectory,
    fields: ConfidenceFieldSet,
    rig: Rig,
    params: PoolParams | None = None,
    pooling: AbstractPooling | None = None,
    camera_subset=None,
) -> SemanticMap:
    r"""Averages the pooled view confidences of a trajectory over its life.

    Frames where pooling finds no view are left out; the average divides
    by the number of pooled frames.

    Parameters
    ----------
    traj : Trajectory
        Trajectory.
    fields : ConfidenceFieldSet
        Confidence fields covering the lifespan.
    rig : Rig
        Camera rig.
    params : PoolParams, optional
        Pooling parameters, used when ``pooling`` is not given.
    pooling : AbstractPooling, optional
        Pooling strategy; view pooling by default.
    camera_subset : array-like, optional
        Cameras allowed to contribute.

    Returns
    -------
    SemanticMap
        The map; flagged invalid when every frame has no view.
    """
    pooling = pooling or ViewPooling(params)
    single = _as_set(traj, fields.n_frames, len(rig))
    total = np.zeros(fields.n_classes)
    n_pooled = 0
    for t in traj.frames:
        _, vectors, visibility = collect_views(
            single, fields, rig, int(t), camera_subset
        )
        pooled, _ = pooling.pool_batch(vectors, visibility)
        if np.isnan(pooled[0]).any():
            continue
        total += pooled[0]
        n_pooled += 1
    if n_pooled == 0:
        return SemanticMap(np.zeros(fields.n_classes), valid=False, n_pooled=0)
    return SemanticMap(total / n_pooled, valid=True, n_pooled=n_pooled)


class SemanticMapTable:
    r"""Semantic maps of a whole trajectory set.

    Parameters
    ----------
    values : np.ndarray
        Maps (M, N).
    valid : np.ndarray
        Validity flags (M,).
    n_pooled : np.ndarray
        Pooled-frame counts (M,).
    """

    def __init__(self, values, valid, n_pooled):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(valid), -1)
        self.values = values
        self.valid = np.asarray(valid, dtype=bool)
        self.n_pooled = np.asarray(n_pooled, dtype=int)

    def __len__(self) -> int:
        return len(self.valid)

    def __getitem__(self, index: int) -> SemanticMap:
        return SemanticMap(
            self.values[index],
            valid=bool(self.valid[index]),
            n_pooled=int(self.n_pooled[index]),
        )

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    @property
    def labels(self) -> np.ndarray:
        r"""Argmax labels :math:`l_i`, 1-based."""
        if len(self) == 0:
            return np.zeros(0, dtype=int)
        return np.argmax(self.values, axis=1) + 1

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.values,
            columns=[f"conf_{k + 1}" for k in range(self.n_classes)],
        )
        frame.insert(0, "trajectory_id", np.arange(len(self)))
        frame["label"] = self.labels
        frame["n_pooled"] = self.n_pooled
        frame["valid"] = self.valid
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    def save(self, directory) -> list[str]:
        paths = []
        for name, array in (
            ("values", self.values.astype("<f8")),
            ("valid", self.valid),
            ("n_pooled", self.n_pooled.astype("<i8")),
        ):
            path = f"{directory}/semantic_{name}.npy"
            np.save(path, array)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory) -> "SemanticMapTable":
        return cls(
            np.load(f"{directory}/semantic_values.npy"),
            np.load(f"{directory}/semantic_valid.npy"),
            np.load(f"{directory}/semantic_n_pooled.npy"),
        )


def semantic_maps_from_pooled(pooled: np.ndarray) -> SemanticMapTable:
    r"""Averages a (T, M, N) pooled tensor over time, ignoring NaN frames."""
    ok = ~np.isnan(pooled).any(axis=2)
    n_pooled = ok.sum(axis=0)
    total = np.where(ok[..., None], pooled, 0.0).sum(axis=0)
    values = total / np.maximum(n_pooled, 1)[:, None]
    return SemanticMapTable(values, n_pooled > 0, n_pooled)


def build_semantic_maps(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    pooling: AbstractPooling | None = None,
    camera_subset=None,
    progress: bool = False,
) -> SemanticMapTable:
    r"""Semantic maps of every trajectory of a stream.

    Equivalent to :func:`build_semantic_map` per trajectory, with the
    view confidences of each frame collected in one pass.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    fields : ConfidenceFieldSet
        Confidence fields.
    rig : Rig
        Camera rig.
    pooling : AbstractPooling, optional
        Pooling strategy; view pooling by default.
    camera_subset : array-like, optional
        Cameras allowed to contribute.
    progress : bool, optional
        Show a progress bar over frames.

    Returns
    -------
    SemanticMapTable
        One map per trajectory.
    """
    pooling = pooling or ViewPooling()
    pooled, _ = pool_sequence(
        trajectories, fields, rig, pooling, camera_subset, progress
    )
    table = semantic_maps_from_pooled(pooled)
    n_invalid = int((~table.valid).sum())
    if n_invalid:
        logger.warning("%d trajectories have no pooled frame", n_invalid)
    return table
