import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from modules.data.synthesis.confidence import ConfidenceFieldSet
from modules.geometry.camera import Rig
from modules.reconstruction.trajectory import TrajectorySet
from modules.utils.exceptions import NoViewError

logger = logging.getLogger(__name__)

# Trajectories pooled together when costs are evaluated in batch.
BATCH = 64


@dataclass(frozen=True)
class PoolParams:
    r"""Pooling parameters.

    Parameters
    ----------
    eps_v : float
        Minimum visibility for a camera to be a pooling candidate.
    min_candidates : int
        Minimum number of candidates; fewer yields no view.
    """

    eps_v: float = 0.3
    min_candidates: int = 1

    def __post_init__(self):
        if not 0 < self.eps_v < 1:
            raise ValueError("eps_v must be in (0, 1)")
        if self.min_candidates < 1:
            raise ValueError("min_candidates must be at least 1")


def pooling_costs(vectors: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    r"""Weighted disagreement of every view with all the others.

    :math:`\mathrm{cost}_c = \sum_j V_j \|L_c - L_j\|^2`.

    Parameters
    ----------
    vectors : np.ndarray
        Confidence vectors (B, K, N).
    visibility : np.ndarray
        Visibilities (B, K); zero for absent views.

    Returns
    -------
    np.ndarray
        Costs (B, K).
    """
    diff = vectors[:, :, None, :] - vectors[:, None, :, :]
    return np.einsum("bcjn,bcjn,bj->bc", diff, diff, visibility)


class AbstractPooling(ABC):
    r"""Abstract class for the per-frame pooling of view confidences.

    Parameters
    ----------
    params : PoolParams
        Pooling parameters.
    """

    def __init__(self, params: PoolParams | None = None):
        self.params = params or PoolParams()

    @abstractmethod
    def pool_batch(
        self, vectors: np.ndarray, visibility: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        r"""Pools many view sets at once.

        Parameters
        ----------
        vectors : np.ndarray
            Confidence vectors (B, K, N), views ordered by camera id.
        visibility : np.ndarray
            Visibilities (B, K); zero for absent views.

        Returns
        -------
        pooled : np.ndarray
            Pooled vectors (B, N), NaN where no view qualifies.
        chosen : np.ndarray
            Index of the selected view (B,), -1 when not a selection.
        """
        raise NotImplementedError

    def pool(self, confidences) -> tuple[np.ndarray, int | None]:
        r"""Pools one list of ``(camera, vector, visibility)`` entries.

        Raises
        ------
        NoViewError
            When no entry qualifies.
        """
        entries = sorted(confidences, key=lambda entry: entry[0])
        if not entries:
            raise NoViewError("no confidences to pool")
        cameras = [int(entry[0]) for entry in entries]
        vectors = np.array([entry[1] for entry in entries], dtype=float)[None]
        visibility = np.array([entry[2] for entry in entries], dtype=float)[None]
        pooled, chosen = self.pool_batch(vectors, visibility)
        if np.isnan(pooled[0]).any():
            raise NoViewError(
                f"no camera above visibility {self.params.eps_v} "
                f"among {len(entries)}"
            )
        return pooled[0], (cameras[chosen[0]] if chosen[0] >= 0 else None)


class ViewPooling(AbstractPooling):
    r"""Selects the candidate view that best agrees with all the others.

    Candidates are the views with :math:`V_c > \epsilon_v`; the selected
    view minimises :math:`\sum_j V_j \|L_c - L_j\|^2` over the full list,
    ties going to the lowest camera id.
    """

    def pool_batch(self, vectors, visibility):
        candidates = visibility > self.params.eps_v
        costs = np.where(candidates, pooling_costs(vectors, visibility), np.inf)
        chosen = np.argmin(costs, axis=1)
        ok = candidates.sum(axis=1) >= self.params.min_candidates
        pooled = vectors[np.arange(len(vectors)), chosen]
        pooled = np.where(ok[:, None], pooled, np.nan)
        return pooled, np.where(ok, chosen, -1)


class AveragePooling(AbstractPooling):
    r"""Visibility-weighted mean of every view's confidences."""

    def pool_batch(self, vectors, visibility):
        total = visibility.sum(axis=1)
        ok = total > 0
        safe = np.where(ok, total, 1.0)
        pooled = np.einsum("bk,bkn->bn", visibility, vectors) / safe[:, None]
        pooled = np.where(ok[:, None], pooled, np.nan)
        return pooled, np.full(len(vectors), -1)


POOLINGS = {
    "view_pool": ViewPooling,
    "average_pool": AveragePooling,
}


def get_pooling(method: str, params: PoolParams | None = None) -> AbstractPooling:
    if method not in POOLINGS:
        raise ValueError(
            f"Unknown pooling {method}, expected one of {sorted(POOLINGS)}"
        )
    return POOLINGS[method](params)


def view_pool(confidences, params: PoolParams | None = None):
    r"""View-pooling of one frame.

    Parameters
    ----------
    confidences : list of tuple
        ``(camera id, confidence vector (N,), visibility)`` entries, possibly
        empty, in any order.
    params : PoolParams, optional
        Pooling parameters.

    Returns
    -------
    vector : np.ndarray
        The selected camera's vector, one of the inputs.
    camera : int
        The selected camera.

    Raises
    ------
    NoViewError
        When no camera passes the visibility gate.
    """
    return ViewPooling(params).pool(confidences)


def collect_views(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    frame: int,
    camera_subset=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r"""Gathers the view confidences of every trajectory alive at a frame.

    Each field is queried once, at the projections of all the trajectories
    the camera sees.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    fields : ConfidenceFieldSet
        Confidence fields.
    rig : Rig
        Camera rig.
    frame : int
        Frame index.
    camera_subset : array-like, optional
        Cameras allowed to contribute; all by default.

    Returns
    -------
    alive : np.ndarray
        Trajectory ids alive at the frame (B,).
    vectors : np.ndarray
        Confidences (B, K, N) for the K cameras of the subset, ascending.
    visibility : np.ndarray
        Visibilities (B, K), zero where the camera does not see the point.
    """
    cameras = (
        np.arange(len(rig))
        if camera_subset is None
        else np.unique(np.asarray(camera_subset, dtype=int))
    )
    alive = trajectories.alive_at(frame)
    vectors = np.zeros((len(alive), len(cameras), fields.n_classes))
    visibility = np.zeros((len(alive), len(cameras)))
    if len(alive) == 0:
        return alive, vectors, visibility
    rows = np.stack(
        [trajectories[i].visibility_at(frame)[cameras] for i in alive]
    )
    points = trajectories.positions[frame, alive]
    pixels, depth = rig.project_all(points)
    for k, camera in enumerate(cameras):
        seen = rows[:, k] > 0
        seen &= depth[camera] > 0
        seen &= rig[camera].in_image(np.nan_to_num(pixels[camera], nan=-1.0))
        if not seen.any():
            continue
        vectors[seen, k] = fields.query(frame, camera, pixels[camera, seen])
        visibility[seen, k] = rows[seen, k]
    return alive, vectors, visibility


def pool_sequence(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    pooling: AbstractPooling,
    camera_subset=None,
    progress: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    r"""Pooled vector of every trajectory at every frame.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    fields : ConfidenceFieldSet
        Confidence fields.
    rig : Rig
        Camera rig.
    pooling : AbstractPooling
        Pooling strategy.
    camera_subset : array-like, optional
        Cameras allowed to contribute.
    progress : bool, optional
        Show a progress bar over frames.

    Returns
    -------
    pooled : np.ndarray
        Pooled vectors (T, M, N); NaN outside lifespans and on no-view
        frames.
    chosen : np.ndarray
        Selected camera id (T, M), -1 when none.
    """
    cameras = (
        np.arange(len(rig))
        if camera_subset is None
        else np.unique(np.asarray(camera_subset, dtype=int))
    )
    n_frames, n_traj = trajectories.n_frames, len(trajectories)
    pooled = np.full((n_frames, n_traj, fields.n_classes), np.nan)
    chosen = np.full((n_frames, n_traj), -1)
    for t in tqdm(range(n_frames), desc="pool", disable=not progress):
        alive, vectors, visibility = collect_views(
            trajectories, fields, rig, t, cameras
        )
        for start in range(0, len(alive), BATCH):
            part = slice(start, start + BATCH)
            vec, pick = pooling.pool_batch(vectors[part], visibility[part])
            pooled[t, alive[part]] = vec
            chosen[t, alive[part]] = np.where(pick >= 0, cameras[pick], -1)
    return pooled, chosen
