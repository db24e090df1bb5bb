import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from modules.data.synthesis.scene import ObservationSet
from modules.geometry.camera import Observation, Rig
from modules.geometry.triangulation import (
    RansacParams,
    TriangulationResult,
    triangulate,
    triangulate_many,
)
from modules.reconstruction.trajectory import Trajectory, TrajectorySet
from modules.utils.exceptions import DegenerateTriangulationError

logger = logging.getLogger(__name__)

DISSOLVE_CAUSES = ("occluded", "few_views", "degenerate", "reprojection", "consensus")


@dataclass(frozen=True)
class TrackerParams:
    r"""Tracking and termination parameters.

    Parameters
    ----------
    sigma : float
        Visibility kernel width in pixels.
    eps_s : float
        Visibility above which a camera is usable for tracking.
    max_reproj : float
        Average reprojection (pixels) over the usable views above which a
        track dissolves.
    min_views : int
        Minimum number of cameras above ``eps_s``.
    min_inlier_ratio : float
        Minimum share of the usable views that must agree with the
        triangulated point.
    """

    sigma: float = 1.0
    eps_s: float = 0.3
    max_reproj: float = 2.0
    min_views: int = 2
    min_inlier_ratio: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0 or self.max_reproj <= 0:
            raise ValueError("sigma and max_reproj must be positive")
        if not 0 < self.eps_s < 1:
            raise ValueError("eps_s must be in (0, 1)")
        if self.min_views < 2:
            raise ValueError("min_views must be at least 2")
        if not 0 <= self.min_inlier_ratio <= 1:
            raise ValueError("min_inlier_ratio must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class Seed:
    r"""Triangulated point that starts a trajectory."""

    source_id: int
    point: np.ndarray
    visibility: np.ndarray
    reprojection: float


@dataclass(frozen=True, eq=False)
class Extended:
    r"""Outcome of a successful tracking step."""

    trajectory: Trajectory


@dataclass(frozen=True, eq=False)
class Dissolved:
    r"""Outcome of a terminated track; ``trajectory`` ends at :math:`T_d`."""

    trajectory: Trajectory
    cause: str


@dataclass
class ReconstructionReport:
    r"""Counters of one stream reconstruction."""

    seeds: int = 0
    reseeds: int = 0
    skipped_groups: Counter = field(default_factory=Counter)
    dissolved: Counter = field(default_factory=Counter)
    short_tracks: int = 0
    trajectories: int = 0

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "reseeds": self.reseeds,
            "skipped_groups": dict(sorted(self.skipped_groups.items())),
            "dissolved": dict(sorted(self.dissolved.items())),
            "short_tracks": self.short_tracks,
            "trajectories": self.trajectories,
        }


def _visibility_row(
    rig: Rig,
    camera_ids: np.ndarray,
    pixels: np.ndarray,
    point: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Visibility of ``point`` in every rig camera given its observations."""
    row = np.zeros(len(rig))
    if len(camera_ids) == 0:
        return row
    projections = rig.projection_matrices[camera_ids]
    projected = projections[:, :, :3] @ point + projections[:, :, 3]
    depth = projected[:, 2]
    front = depth > 0
    uv = projected[:, :2] / np.where(front, depth, 1.0)[:, None]
    inside = front & np.all(
        (uv >= 0) & (uv < rig.image_sizes[camera_ids]), axis=1
    )
    residual = np.linalg.norm(uv - pixels, axis=1)
    row[camera_ids] = np.where(inside, np.exp(-((residual / sigma) ** 2)), 0.0)
    return row


def _average_reprojection(result: TriangulationResult) -> float:
    """Mean residual over every view handed to triangulation, inliers or not."""
    return float(np.mean(result.residuals))


def _judge(
    result: TriangulationResult | None,
    n_candidates: int,
    rig: Rig,
    camera_ids: np.ndarray,
    pixels: np.ndarray,
    params: TrackerParams,
) -> tuple[str | None, np.ndarray | None]:
    """Applies the termination rules; returns ``(cause, visibility)``."""
    if result is None:
        return "degenerate", None
    if _average_reprojection(result) > params.max_reproj:
        return "reprojection", None
    if result.inliers.sum() < params.min_inlier_ratio * n_candidates:
        return "consensus", None
    visibility = _visibility_row(rig, camera_ids, pixels, result.point, params.sigma)
    if np.count_nonzero(visibility > params.eps_s) < params.min_views:
        return "few_views", None
    return None, visibility


def _as_observations(camera_ids, pixels, frame=0) -> list[Observation]:
    return [
        Observation(camera_id=int(c), pixel=p, frame=frame)
        for c, p in zip(camera_ids, pixels, strict=True)
    ]


def seed_points(
    groups: dict[int, tuple[np.ndarray, np.ndarray]],
    rig: Rig,
    ransac: RansacParams | None = None,
    params: TrackerParams | None = None,
) -> tuple[list[Seed], Counter]:
    r"""Triangulates one point per correspondence group of a frame.

    Groups with fewer than two observations, degenerate groups and groups
    that fail the termination rules are skipped and counted by cause.

    Parameters
    ----------
    groups : dict
        ``correspondence id -> (camera ids, pixels)`` of one frame.
    rig : Rig
        Camera rig.
    ransac : RansacParams, optional
        Triangulation parameters.
    params : TrackerParams, optional
        Visibility and termination parameters.

    Returns
    -------
    seeds : list of Seed
        One seed per accepted group, ordered by correspondence id.
    skipped : collections.Counter
        Skipped groups by cause.
    """
    ransac = ransac or RansacParams()
    params = params or TrackerParams()
    skipped = Counter()
    ids = sorted(groups)
    usable = [i for i in ids if len(groups[i][0]) >= 2]
    skipped["few_observations"] += len(ids) - len(usable)
    results = triangulate_many(rig, [groups[i] for i in usable], ransac)
    seeds = []
    for source_id, result in zip(usable, results, strict=True):
        camera_ids, pixels = groups[source_id]
        cause, visibility = _judge(
            result, len(camera_ids), rig, camera_ids, pixels, params
        )
        if cause is not None:
            skipped[cause] += 1
            continue
        seeds.append(
            Seed(
                source_id=source_id,
                point=result.point,
                visibility=visibility,
                reprojection=_average_reprojection(result),
            )
        )
    return seeds, skipped


def _usable_views(
    visibility: np.ndarray,
    observed: tuple[np.ndarray, np.ndarray] | None,
    eps_s: float,
) -> tuple[np.ndarray, np.ndarray]:
    if observed is None:
        return np.zeros(0, dtype=int), np.zeros((0, 2))
    camera_ids, pixels = observed
    keep = visibility[camera_ids] > eps_s
    return camera_ids[keep], pixels[keep]


def _extend(traj: Trajectory, point, visibility, reprojection) -> Trajectory:
    return Trajectory(
        id=traj.id,
        source_id=traj.source_id,
        emerge=traj.emerge,
        points=np.vstack([traj.points, point]),
        visibility=np.vstack([traj.visibility, visibility]),
        reprojection=np.append(traj.reprojection, reprojection),
    )


def track_step(
    traj: Trajectory,
    observed: tuple[np.ndarray, np.ndarray] | None,
    rig: Rig,
    params: TrackerParams | None = None,
    ransac: RansacParams | None = None,
) -> Extended | Dissolved:
    r"""Extends a trajectory by one frame.

    The observations of the trajectory's correspondence at :math:`t+1` are
    restricted to the cameras with :math:`V(X_t, c) > \epsilon_s`, the point
    is triangulated with RANSAC and the visibility of every observing camera
    is recomputed from the new point.

    Parameters
    ----------
    traj : Trajectory
        Trajectory alive at frame :math:`t = T_d`.
    observed : tuple or None
        ``(camera ids, pixels)`` of the correspondence at :math:`t+1`.
    rig : Rig
        Camera rig.
    params : TrackerParams, optional
        Tracking parameters.
    ransac : RansacParams, optional
        Triangulation parameters.

    Returns
    -------
    Extended or Dissolved
        ``Extended`` with :math:`X_{t+1}` appended, or ``Dissolved`` with the
        unchanged trajectory (:math:`T_d = t`) and the cause.
    """
    params = params or TrackerParams()
    ransac = ransac or RansacParams()
    camera_ids, pixels = _usable_views(traj.visibility[-1], observed, params.eps_s)
    if len(camera_ids) == 0:
        return Dissolved(traj, "occluded")
    if len(camera_ids) < params.min_views:
        return Dissolved(traj, "few_views")
    try:
        result = triangulate(rig, _as_observations(camera_ids, pixels), ransac)
    except DegenerateTriangulationError:
        result = None
    all_ids, all_pixels = observed
    cause, visibility = _judge(
        result, len(camera_ids), rig, all_ids, all_pixels, params
    )
    if cause is not None:
        return Dissolved(traj, cause)
    return Extended(
        _extend(traj, result.point, visibility, _average_reprojection(result))
    )


class _Track:
    """Mutable state of a live track."""

    __slots__ = ("emerge", "points", "reprojection", "source_id", "visibility")

    def __init__(self, seed: Seed, frame: int):
        self.source_id = seed.source_id
        self.emerge = frame
        self.points = [seed.point]
        self.visibility = [seed.visibility]
        self.reprojection = [seed.reprojection]

    def freeze(self, traj_id: int) -> Trajectory:
        return Trajectory(
            id=traj_id,
            source_id=self.source_id,
            emerge=self.emerge,
            points=np.array(self.points),
            visibility=np.array(self.visibility),
            reprojection=np.array(self.reprojection),
        )


def build_stream(
    observations: ObservationSet,
    rig: Rig,
    params: TrackerParams | None = None,
    ransac: RansacParams | None = None,
    progress: bool = False,
) -> tuple[TrajectorySet, ReconstructionReport]:
    r"""Reconstructs the trajectory stream of a sequence.

    Points are seeded at frame 0; every later frame first extends the live
    tracks (all tracks of a frame are triangulated in one batch) and then
    seeds the correspondence ids no live track covers, including ids whose
    track has just dissolved. Trajectories shorter than two frames are
    discarded.

    Parameters
    ----------
    observations : ObservationSet
        All observations of the sequence.
    rig : Rig
        Camera rig.
    params : TrackerParams, optional
        Tracking parameters.
    ransac : RansacParams, optional
        Triangulation parameters.
    progress : bool, optional
        Show a progress bar over frames.

    Returns
    -------
    TrajectorySet
        Trajectories ordered by emergence frame then correspondence id.
    ReconstructionReport
        Seeding and termination counters.
    """
    params = params or TrackerParams()
    ransac = ransac or RansacParams()
    report = ReconstructionReport()
    live: dict[int, _Track] = {}
    finished: list[_Track] = []
    ever_seeded: set[int] = set()

    for t in tqdm(range(observations.n_frames), desc="track", disable=not progress):
        groups = observations.groups(t)

        pending = []
        for source_id in sorted(live):
            track = live[source_id]
            camera_ids, pixels = _usable_views(
                track.visibility[-1], groups.get(source_id), params.eps_s
            )
            if len(camera_ids) < params.min_views:
                cause = "occluded" if len(camera_ids) == 0 else "few_views"
                report.dissolved[cause] += 1
                finished.append(live.pop(source_id))
                continue
            pending.append((source_id, camera_ids, pixels))

        results = triangulate_many(
            rig, [(ids, pix) for _, ids, pix in pending], ransac
        )
        for (source_id, camera_ids, _), result in zip(pending, results, strict=True):
            all_ids, all_pixels = groups[source_id]
            cause, visibility = _judge(
                result, len(camera_ids), rig, all_ids, all_pixels, params
            )
            track = live[source_id]
            if cause is not None:
                report.dissolved[cause] += 1
                finished.append(live.pop(source_id))
                continue
            track.points.append(result.point)
            track.visibility.append(visibility)
            track.reprojection.append(_average_reprojection(result))

        uncovered = {i: groups[i] for i in groups if i not in live}
        seeds, skipped = seed_points(uncovered, rig, ransac, params)
        report.skipped_groups.update(skipped)
        for seed in seeds:
            if seed.source_id in ever_seeded:
                report.reseeds += 1
            else:
                report.seeds += 1
                ever_seeded.add(seed.source_id)
            live[seed.source_id] = _Track(seed, t)

    finished.extend(live.values())
    kept = sorted(
        (track for track in finished if len(track.points) >= 2),
        key=lambda track: (track.emerge, track.source_id),
    )
    report.short_tracks = len(finished) - len(kept)
    report.trajectories = len(kept)
    trajectories = [track.freeze(k) for k, track in enumerate(kept)]
    logger.info(
        "Reconstructed %d trajectories (%d seeds, %d re-seeds, %d short)",
        report.trajectories,
        report.seeds,
        report.reseeds,
        report.short_tracks,
    )
    return (
        TrajectorySet(
            trajectories, n_frames=observations.n_frames, n_cameras=len(rig)
        ),
        report,
    )
