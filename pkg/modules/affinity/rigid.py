import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from modules.data.utils.utils import stage_rng
from modules.geometry.camera import is_rotation
from modules.reconstruction.trajectory import TrajectorySet
from modules.utils.exceptions import UnderdeterminedTransformError

logger = logging.getLogger(__name__)

ERROR_MODES = ("frame", "emergence")
# Smallest second-to-first singular value ratio of a usable sample.
MIN_SPREAD = 1e-3
PAIR_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class RigidTransform:
    r"""Rigid motion :math:`x \mapsto R x + t`.

    Parameters
    ----------
    rotation : np.ndarray
        Rotation matrix (3, 3) in SO(3).
    translation : np.ndarray
        Translation (3,) in meters.
    inliers : np.ndarray, optional
        Neighbouring trajectories that support the estimate.
    """

    rotation: np.ndarray
    translation: np.ndarray
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        if not is_rotation(self.rotation):
            raise ValueError("rotation must be orthonormal with det +1")
        if np.shape(self.translation) != (3,):
            raise ValueError("translation must be a 3-vector")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        r"""Transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def angle_to(self, other: "RigidTransform") -> float:
        r"""Rotation angle in radians between the two rotations."""
        delta = self.rotation @ other.rotation.T
        return float(Rotation.from_matrix(delta).magnitude())


@dataclass(frozen=True)
class RigidRansacParams:
    r"""RANSAC parameters of the local transform estimation.

    Parameters
    ----------
    inlier_tol : float
        Prediction error (meters) below which a neighbour is an inlier.
    max_iter : int
        Number of sampled triples; all triples are tried when there are
        fewer.
    max_neighbors : int
        Neighbours kept per estimate, nearest first.
    seed : int
        Master seed of the sampling streams.
    """

    inlier_tol: float = 0.01
    max_iter: int = 200
    max_neighbors: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.inlier_tol <= 0:
            raise ValueError("inlier_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.max_neighbors < 3:
            raise ValueError("max_neighbors must be at least 3")


def kabsch(source: np.ndarray, target: np.ndarray):
    r"""Rotations best mapping ``source`` vectors onto ``target`` vectors.

    Solves :math:`\min_R \sum_k \|y_k - R x_k\|^2` over SO(3) without
    centring, for a batch of vector sets.

    Parameters
    ----------
    source : np.ndarray
        Vectors (..., k, 3).
    target : np.ndarray
        Vectors (..., k, 3).

    Returns
    -------
    rotations : np.ndarray
        Rotations (..., 3, 3).
    spread : np.ndarray
        Ratio of the second to the first singular value of the
        cross-covariance (...,); near zero for collinear samples.
    """
    cov = np.einsum("...ki,...kj->...ij", target, source)
    u, s, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    sign = np.where(sign == 0, 1.0, sign)
    u = u.copy()
    u[..., :, 2] *= sign[..., None]
    spread = s[..., 1] / np.where(s[..., 0] > 0, s[..., 0], np.inf)
    return u @ vt, spread


def neighbors(
    trajectories: TrajectorySet, i: int, radius: float, overlap_min: int = 2
) -> np.ndarray:
    r"""Trajectories that stay within ``radius`` of trajectory ``i``.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    i : int
        Query trajectory.
    radius : float
        Exclusive distance bound in meters over the shared lifetime.
    overlap_min : int, optional
        Minimum number of shared frames.

    Returns
    -------
    np.ndarray
        Sorted neighbour ids, ``i`` excluded.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    traj = trajectories[i]
    block = trajectories.positions[traj.emerge : traj.dissolve + 1]
    dist = np.linalg.norm(block - traj.points[:, None, :], axis=2)
    alive = ~np.isnan(dist)
    shared = alive.sum(axis=0)
    worst = np.where(alive, dist, -np.inf).max(axis=0)
    mask = (shared >= max(overlap_min, 1)) & (worst < radius)
    mask[i] = False
    return np.flatnonzero(mask)


def neighbor_pairs(
    trajectories: TrajectorySet, radius: float, overlap_min: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    r"""All neighbour pairs of a trajectory set.

    A pair is kept when the trajectories are closer than ``radius`` at
    every one of at least ``overlap_min`` shared frames; the same rule as
    :func:`neighbors`, evaluated with one KD-tree per frame.

    Returns
    -------
    pairs : np.ndarray
        Pairs (K, 2) with ``i < j``, sorted.
    worst : np.ndarray
        Largest distance over the shared lifetime (K,).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(trajectories)
    codes, dists = [], []
    for t in range(trajectories.n_frames):
        alive = trajectories.alive_at(t)
        if len(alive) < 2:
            continue
        points = trajectories.positions[t, alive]
        found = cKDTree(points).query_pairs(radius * (1 + 1e-9), output_type="ndarray")
        if len(found) == 0:
            continue
        a, b = alive[found[:, 0]], alive[found[:, 1]]
        d = np.linalg.norm(points[found[:, 0]] - points[found[:, 1]], axis=1)
        i, j = np.minimum(a, b), np.maximum(a, b)
        close = d < radius
        codes.append(i[close].astype(np.int64) * n + j[close])
        dists.append(d[close])
    if not codes:
        return np.zeros((0, 2), dtype=int), np.zeros(0)
    unique, inverse, counts = np.unique(
        np.concatenate(codes), return_inverse=True, return_counts=True
    )
    worst = np.zeros(len(unique))
    np.maximum.at(worst, inverse, np.concatenate(dists))
    i, j = unique // n, unique % n
    shared = (
        np.minimum(trajectories.dissolve[i], trajectories.dissolve[j])
        - np.maximum(trajectories.emerge[i], trajectories.emerge[j])
        + 1
    )
    keep = (counts == shared) & (shared >= max(overlap_min, 1))
    return np.column_stack([i[keep], j[keep]]).astype(int), worst[keep]


def _triples(n: int, params: RigidRansacParams, rng: np.random.Generator) -> np.ndarray:
    if math.comb(n, 3) <= params.max_iter:
        return np.array(list(itertools.combinations(range(n), 3)), dtype=int)
    return np.argsort(rng.random((params.max_iter, n)), axis=1)[:, :3]


def local_transform(
    trajectories: TrajectorySet,
    i: int,
    t: int,
    eps: float = 0.05,
    ransac: RigidRansacParams | None = None,
    candidates: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> RigidTransform:
    r"""Rigid motion of the neighbourhood of trajectory ``i`` from t-1 to t.

    Triples of neighbours give candidate rotations from their displacement
    vectors relative to the anchor; the translation keeps the anchor
    exactly predicted, :math:`t = X_t^i - R X_{t-1}^i`. The triple with
    most inliers is refined on all its inliers.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    i : int
        Anchor trajectory, alive at ``t - 1`` and ``t``.
    t : int
        Frame.
    eps : float, optional
        Neighbourhood radius in meters.
    ransac : RigidRansacParams, optional
        Sampling parameters.
    candidates : np.ndarray, optional
        Precomputed neighbours of ``i`` within ``eps``.
    rng : np.random.Generator, optional
        Sampling stream; derived from ``ransac.seed``, ``i`` and ``t`` when
        omitted.

    Returns
    -------
    RigidTransform
        The estimate with its inlier neighbours.

    Raises
    ------
    UnderdeterminedTransformError
        With fewer than three usable neighbours, or when every triple is
        degenerate.
    """
    ransac = ransac or RigidRansacParams()
    traj = trajectories[i]
    if not (traj.alive(t - 1) and traj.alive(t)):
        raise ValueError(f"Trajectory {i} is not alive at frames {t - 1} and {t}")
    if candidates is None:
        candidates = neighbors(trajectories, i, eps)
    candidates = np.asarray(candidates, dtype=int)
    alive = trajectories.alive
    candidates = candidates[alive[t - 1, candidates] & alive[t, candidates]]
    if len(candidates) < 3:
        raise UnderdeterminedTransformError(
            f"trajectory {i} has {len(candidates)} neighbours at frame {t}"
        )
    anchor_prev, anchor_now = traj.point_at(t - 1), traj.point_at(t)
    before = trajectories.positions[t - 1, candidates] - anchor_prev
    after = trajectories.positions[t, candidates] - anchor_now
    if len(candidates) > ransac.max_neighbors:
        nearest = np.argsort(np.linalg.norm(before, axis=1), kind="stable")
        keep = np.sort(nearest[: ransac.max_neighbors])
        candidates, before, after = candidates[keep], before[keep], after[keep]

    if rng is None:
        rng = stage_rng(ransac.seed, "affinity.transform", i * trajectories.n_frames + t)
    triples = _triples(len(candidates), ransac, rng)
    rotations, spread = kabsch(before[triples], after[triples])
    usable = spread > MIN_SPREAD
    if not usable.any():
        raise UnderdeterminedTransformError(
            f"every neighbour sample of trajectory {i} at frame {t} is degenerate"
        )
    rotations = rotations[usable]
    residuals = np.linalg.norm(
        after[None] - np.einsum("sij,kj->ski", rotations, before), axis=2
    )
    inliers = residuals < ransac.inlier_tol
    best = int(np.argmax(inliers.sum(axis=1)))
    rotation, support = rotations[best], inliers[best]

    if support.sum() >= 3:
        refined, refined_spread = kabsch(before[support], after[support])
        if refined_spread > MIN_SPREAD:
            refined_support = (
                np.linalg.norm(after - before @ refined.T, axis=1) < ransac.inlier_tol
            )
            if refined_support.sum() >= support.sum():
                rotation, support = refined, refined_support
    return RigidTransform(
        rotation=rotation,
        translation=anchor_now - rotation @ anchor_prev,
        inliers=candidates[support],
    )


class TransformField:
    r"""Local transforms of every trajectory at every frame.

    Entry ``(i, t)`` maps frame ``t - 1`` to frame ``t`` around trajectory
    ``i``; ``valid`` is False where the estimate is underdetermined or the
    trajectory is not alive at both frames.

    Parameters
    ----------
    rotations : np.ndarray
        Rotations (M, T, 3, 3).
    translations : np.ndarray
        Translations (M, T, 3).
    valid : np.ndarray
        Availability flags (M, T).
    """

    def __init__(self, rotations, translations, valid):
        self.rotations = np.asarray(rotations, dtype=float)
        self.translations = np.asarray(translations, dtype=float)
        self.valid = np.asarray(valid, dtype=bool)

    @classmethod
    def empty(cls, n_traj: int, n_frames: int) -> "TransformField":
        rotations = np.tile(np.eye(3), (n_traj, n_frames, 1, 1))
        return cls(
            rotations,
            np.zeros((n_traj, n_frames, 3)),
            np.zeros((n_traj, n_frames), dtype=bool),
        )

    def __getitem__(self, key: tuple[int, int]) -> RigidTransform | None:
        i, t = key
        if not self.valid[i, t]:
            return None
        return RigidTransform(self.rotations[i, t], self.translations[i, t])

    @property
    def coverage(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0

    def save(self, directory) -> list[str]:
        paths = []
        for name in ("rotations", "translations", "valid"):
            path = f"{directory}/transforms_{name}.npy"
            array = getattr(self, name)
            np.save(path, array if array.dtype == bool else array.astype("<f8"))
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory) -> "TransformField":
        return cls(
            *(
                np.load(f"{directory}/transforms_{name}.npy")
                for name in ("rotations", "translations", "valid")
            )
        )


def estimate_transforms(
    trajectories: TrajectorySet,
    eps: float = 0.05,
    ransac: RigidRansacParams | None = None,
    overlap_min: int = 2,
    progress: bool = False,
) -> TransformField:
    r"""Estimates the local transform of every trajectory at every frame.

    Every estimate samples from its own stream, the same one
    :func:`local_transform` uses on its own.
    """
    ransac = ransac or RigidRansacParams()
    n_traj, n_frames = len(trajectories), trajectories.n_frames
    field_ = TransformField.empty(n_traj, n_frames)
    pairs, _ = neighbor_pairs(trajectories, eps, overlap_min)
    adjacency = [[] for _ in range(n_traj)]
    for a, b in pairs:
        adjacency[a].append(b)
        adjacency[b].append(a)
    underdetermined = 0
    for i in tqdm(range(n_traj), desc="transforms", disable=not progress):
        candidates = np.array(sorted(adjacency[i]), dtype=int)
        traj = trajectories[i]
        for t in range(traj.emerge + 1, traj.dissolve + 1):
            try:
                estimate = local_transform(
                    trajectories, i, t, eps, ransac, candidates=candidates
                )
            except UnderdeterminedTransformError:
                underdetermined += 1
                continue
            field_.rotations[i, t] = estimate.rotation
            field_.translations[i, t] = estimate.translation
            field_.valid[i, t] = True
    logger.info(
        "Estimated local transforms for %.1f%% of trajectory frames "
        "(%d underdetermined)",
        100 * field_.coverage,
        underdetermined,
    )
    return field_


def directed_errors(
    trajectories: TrajectorySet,
    transforms: TransformField,
    sources: np.ndarray,
    targets: np.ndarray,
    mode: str = "frame",
) -> np.ndarray:
    r"""Rigid-prediction errors :math:`e_i^j` for many ordered pairs.

    In ``frame`` mode each step predicts :math:`X_t^j` from
    :math:`X_{t-1}^j`; in ``emergence`` mode the prediction is carried from
    the first shared frame through the composed transforms and restarts
    after a missing transform.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    transforms : TransformField
        Local transforms of the sources.
    sources, targets : np.ndarray
        Pair members ``i`` and ``j`` (K,).
    mode : str, optional
        ``"frame"`` or ``"emergence"``.

    Returns
    -------
    np.ndarray
        Largest prediction error (K,); ``inf`` where no step is available.
    """
    if mode not in ERROR_MODES:
        raise ValueError(f"Unknown error mode {mode}, expected one of {ERROR_MODES}")
    sources = np.asarray(sources, dtype=int)
    targets = np.asarray(targets, dtype=int)
    errors = np.full(len(sources), -np.inf)
    alive = trajectories.alive
    positions = trajectories.positions
    for start in range(0, len(sources), PAIR_CHUNK):
        i = sources[start : start + PAIR_CHUNK]
        j = targets[start : start + PAIR_CHUNK]
        worst = np.full(len(i), -np.inf)
        predicted = positions[0, j].copy()
        for t in range(1, trajectories.n_frames):
            step = alive[t - 1, j] & alive[t, j] & alive[t - 1, i] & alive[t, i]
            step &= transforms.valid[i, t]
            origin = positions[t - 1, j] if mode == "frame" else predicted
            moved = (
                np.einsum("kab,kb->ka", transforms.rotations[i, t], np.nan_to_num(origin))
                + transforms.translations[i, t]
            )
            residual = np.linalg.norm(positions[t, j] - moved, axis=1)
            worst = np.where(step, np.maximum(worst, residual), worst)
            predicted = np.where(step[:, None], moved, positions[t, j])
        errors[start : start + PAIR_CHUNK] = worst
    return np.where(np.isfinite(errors), errors, np.inf)


def reconstruction_error(
    trajectories: TrajectorySet,
    i: int,
    j: int,
    transforms: TransformField,
    mode: str = "frame",
) -> float:
    r"""Largest error of predicting trajectory ``j`` with the motion of ``i``.

    :math:`e_i^j = \max_t \|X_t^j - R_t^i X_{t-1}^j - t_t^i\|` over the
    consecutive shared frames with an available transform; ``inf`` when
    there is none.
    """
    return float(directed_errors(trajectories, transforms, [i], [j], mode)[0])
