import logging
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from modules.geometry.camera import Observation, Rig
from modules.utils.exceptions import DegenerateTriangulationError

logger = logging.getLogger(__name__)

GN_MAX_ITER = 20
GN_STEP_TOL = 1e-10
HOMOGENEOUS_EPS = 1e-12


@dataclass(frozen=True)
class RansacParams:
    r"""Parameters of the RANSAC triangulation.

    Parameters
    ----------
    threshold_px : float
        Reprojection residual below which an observation is an inlier.
    min_angle : float
        Minimum triangulation angle between two observing rays, in degrees.
    confidence : float
        Target probability of drawing at least one all-inlier sample.
    max_iter : int
        Maximum number of sampled view pairs.
    seed : int
        Seed for pair sampling when pairs are not enumerated.
    """

    threshold_px: float = 2.0
    min_angle: float = 1.0
    confidence: float = 0.999
    max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.threshold_px <= 0:
            raise ValueError("threshold_px must be positive")
        if not 0 <= self.min_angle < 180:
            raise ValueError("min_angle must be in [0, 180) degrees")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True, eq=False)
class TriangulationResult:
    r"""Triangulated point with its consensus set.

    Parameters
    ----------
    point : np.ndarray
        World point (3,).
    camera_ids : np.ndarray
        Cameras of the input observations, in input order.
    residuals : np.ndarray
        Reprojection residual of every input observation in pixels;
        ``inf`` where the point is behind the camera.
    inliers : np.ndarray
        Boolean inlier mask over the input observations.
    """

    point: np.ndarray
    camera_ids: np.ndarray
    residuals: np.ndarray
    inliers: np.ndarray

    @property
    def inlier_ids(self) -> np.ndarray:
        return self.camera_ids[self.inliers]

    @property
    def mean_reprojection(self) -> float:
        r"""Average reprojection residual over the inliers."""
        return float(self.residuals[self.inliers].mean())


def reprojection_residuals(
    projections: np.ndarray, pixels: np.ndarray, point: np.ndarray
) -> np.ndarray:
    r"""Reprojection residual norms of one point in several cameras.

    Parameters
    ----------
    projections : np.ndarray
        Projection matrices (k, 3, 4).
    pixels : np.ndarray
        Observed pixels (k, 2).
    point : np.ndarray
        World point (3,).

    Returns
    -------
    np.ndarray
        Residuals (k,), ``inf`` where the depth is not positive.
    """
    projected = projections[:, :, :3] @ point + projections[:, :, 3]
    depth = projected[:, 2]
    in_front = depth > 0
    residuals = np.full(len(pixels), np.inf)
    residuals[in_front] = np.linalg.norm(
        projected[in_front, :2] / depth[in_front, None] - pixels[in_front],
        axis=1,
    )
    return residuals


def max_ray_angle(rays: np.ndarray) -> float:
    r"""Largest pairwise angle in degrees between unit rays (k, 3)."""
    if len(rays) < 2:
        return 0.0
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosines.min())))


def linear_triangulation(
    projections: np.ndarray, pixels: np.ndarray
) -> np.ndarray | None:
    r"""Direct linear transform triangulation.

    Each view contributes the rows :math:`u P^3 - P^1` and
    :math:`v P^3 - P^2`, normalised to unit length; the point is the right
    singular vector of the smallest singular value.

    Parameters
    ----------
    projections : np.ndarray
        Projection matrices (k, 3, 4), k >= 2.
    pixels : np.ndarray
        Observed pixels (k, 2).

    Returns
    -------
    np.ndarray or None
        World point (3,), or None when the solution lies at infinity.
    """
    rows = np.concatenate(
        [
            pixels[:, 0, None] * projections[:, 2] - projections[:, 0],
            pixels[:, 1, None] * projections[:, 2] - projections[:, 1],
        ]
    )
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(rows)
    homogeneous = vt[-1]
    if abs(homogeneous[3]) < HOMOGENEOUS_EPS * np.linalg.norm(homogeneous):
        return None
    return homogeneous[:3] / homogeneous[3]


def refine_point(
    projections: np.ndarray,
    pixels: np.ndarray,
    point: np.ndarray,
    max_iter: int = GN_MAX_ITER,
    step_tol: float = GN_STEP_TOL,
) -> np.ndarray:
    r"""Gauss-Newton refinement of the reprojection error of one point.

    Steps that increase the squared reprojection error, or move the point
    behind any of the cameras, are rejected and end the refinement.

    Parameters
    ----------
    projections : np.ndarray
        Projection matrices (k, 3, 4).
    pixels : np.ndarray
        Observed pixels (k, 2).
    point : np.ndarray
        Initial point (3,).
    max_iter : int, optional
        Iteration cap. Default is 20.
    step_tol : float, optional
        Stop when the step norm (meters) falls below this value.

    Returns
    -------
    np.ndarray
        Refined point (3,).
    """
    point = np.asarray(point, dtype=float).copy()
    rotations, offsets = projections[:, :, :3], projections[:, :, 3]

    def cost(x):
        return float(np.sum(reprojection_residuals(projections, pixels, x) ** 2))

    current = cost(point)
    for _ in range(max_iter):
        projected = rotations @ point + offsets
        depth = projected[:, 2]
        if np.any(depth <= 0):
            break
        uv = projected[:, :2] / depth[:, None]
        residual = (uv - pixels).ravel()
        jacobian = (
            (rotations[:, :2] - uv[:, :, None] * rotations[:, 2:3])
            / depth[:, None, None]
        ).reshape(-1, 3)
        step, *_ = np.linalg.lstsq(jacobian, -residual, rcond=None)
        candidate = point + step
        candidate_cost = cost(candidate)
        if not candidate_cost <= current:
            break
        point, current = candidate, candidate_cost
        if np.linalg.norm(step) < step_tol:
            break
    return point


def _pair_schedule(n_views: int, ransac: RansacParams):
    """Yields view pairs: all of them when few, else seeded random draws."""
    n_pairs = n_views * (n_views - 1) // 2
    if n_pairs <= ransac.max_iter:
        yield from combinations(range(n_views), 2)
        return
    rng = np.random.default_rng(ransac.seed)
    for _ in range(ransac.max_iter):
        i, j = rng.choice(n_views, size=2, replace=False)
        yield (min(i, j), max(i, j))


def _required_iterations(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 0.0
    p_good = inlier_ratio**2
    if p_good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def triangulate(
    rig: Rig,
    observations: list[Observation],
    ransac: RansacParams | None = None,
) -> TriangulationResult:
    r"""Triangulates one point from its observations with RANSAC.

    View pairs are hypothesised with the DLT, scored by their inlier count
    (ties broken by the smaller inlier residual sum), and the winning
    consensus set is re-triangulated and refined with Gauss-Newton. When
    refinement would lose inliers, the sampled hypothesis is kept.

    Parameters
    ----------
    rig : Rig
        The camera rig.
    observations : list of Observation
        At least two observations from distinct cameras.
    ransac : RansacParams, optional
        RANSAC parameters. Defaults to ``RansacParams()``.

    Returns
    -------
    TriangulationResult
        The point, per-observation residuals and the inlier mask.

    Raises
    ------
    DegenerateTriangulationError
        When fewer than two inliers remain or all rays are closer to
        parallel than ``ransac.min_angle``.
    """
    ransac = ransac or RansacParams()
    camera_ids = np.array([o.camera_id for o in observations], dtype=int)
    if len(camera_ids) < 2:
        raise ValueError("triangulate needs at least 2 observations")
    if len(np.unique(camera_ids)) != len(camera_ids):
        raise ValueError("observations must come from distinct cameras")
    pixels = np.stack([o.pixel for o in observations])
    projections = rig.projection_matrices[camera_ids]
    rays = rig.backproject(camera_ids, pixels)
    n_views = len(camera_ids)
    min_cos = math.cos(math.radians(ransac.min_angle))

    best_point, best_inliers, best_score = None, None, (0, -math.inf)
    required = math.inf
    for iteration, (i, j) in enumerate(_pair_schedule(n_views, ransac)):
        if iteration >= required:
            break
        if rays[i] @ rays[j] > min_cos:
            continue
        hypothesis = linear_triangulation(projections[[i, j]], pixels[[i, j]])
        if hypothesis is None:
            continue
        residuals = reprojection_residuals(projections, pixels, hypothesis)
        inliers = residuals < ransac.threshold_px
        score = (int(inliers.sum()), -float(residuals[inliers].sum()))
        if score > best_score:
            best_point, best_inliers, best_score = hypothesis, inliers, score
            required = _required_iterations(
                score[0] / n_views, ransac.confidence
            )
            if score[0] == n_views and required == 0.0:
                break

    if best_point is None or best_score[0] < 2:
        raise DegenerateTriangulationError(
            f"no consensus among {n_views} views"
        )

    point, inliers = best_point, best_inliers
    linear = linear_triangulation(projections[inliers], pixels[inliers])
    if linear is not None:
        refined = refine_point(projections[inliers], pixels[inliers], linear)
        refined_inliers = (
            reprojection_residuals(projections, pixels, refined)
            < ransac.threshold_px
        )
        if refined_inliers.sum() >= inliers.sum():
            point, inliers = refined, refined_inliers

    if max_ray_angle(rays[inliers]) < ransac.min_angle:
        raise DegenerateTriangulationError(
            f"inlier rays span less than {ransac.min_angle} degrees"
        )
    residuals = reprojection_residuals(projections, pixels, point)
    return TriangulationResult(
        point=point, camera_ids=camera_ids, residuals=residuals, inliers=inliers
    )


def triangulate_many(
    rig: Rig,
    groups: list[tuple[np.ndarray, np.ndarray]],
    ransac: RansacParams | None = None,
) -> list[TriangulationResult | None]:
    r"""Triangulates many correspondence groups at once.

    All groups are solved together with a padded DLT and a batched
    Gauss-Newton refinement. A group whose every residual is below the
    threshold and whose rays span at least ``min_angle`` is accepted with
    all its observations as inliers; the others go through
    :func:`triangulate`.

    Parameters
    ----------
    rig : Rig
        The camera rig.
    groups : list of tuple
        Per group, camera ids (k,) and pixels (k, 2) with k >= 2.
    ransac : RansacParams, optional
        RANSAC parameters.

    Returns
    -------
    list
        One :class:`TriangulationResult` per group, or None for a
        degenerate group.
    """
    ransac = ransac or RansacParams()
    if not groups:
        return []
    sizes = np.array([len(ids) for ids, _ in groups])
    if np.any(sizes < 2):
        raise ValueError("every group needs at least 2 observations")
    n_groups, width = len(groups), int(sizes.max())
    mask = np.arange(width)[None, :] < sizes[:, None]
    camera_ids = np.zeros((n_groups, width), dtype=int)
    pixels = np.zeros((n_groups, width, 2))
    for g, (ids, pix) in enumerate(groups):
        camera_ids[g, : sizes[g]] = ids
        pixels[g, : sizes[g]] = pix
    projections = rig.projection_matrices[camera_ids]

    # Padded rows are zero and leave the null space untouched.
    rows = np.concatenate(
        [
            pixels[..., 0, None] * projections[:, :, 2] - projections[:, :, 0],
            pixels[..., 1, None] * projections[:, :, 2] - projections[:, :, 1],
        ],
        axis=1,
    )
    norms = np.linalg.norm(rows, axis=2, keepdims=True)
    rows = np.where(norms > 0, rows / np.where(norms > 0, norms, 1.0), 0.0)
    _, _, vt = np.linalg.svd(rows)
    homogeneous = vt[:, -1]
    finite = np.abs(homogeneous[:, 3]) >= HOMOGENEOUS_EPS * np.linalg.norm(
        homogeneous, axis=1
    )
    points = homogeneous[:, :3] / np.where(finite, homogeneous[:, 3], 1.0)[:, None]
    points = _refine_batch(projections, pixels, mask, points)

    residuals = _batch_residuals(projections, pixels, points)
    rays = rig.backproject(camera_ids, pixels) * mask[..., None]
    cosines = np.einsum("gid,gjd->gij", rays, rays)
    pair_mask = mask[:, :, None] & mask[:, None, :]
    min_cos = np.where(pair_mask, cosines, 1.0).min(axis=(1, 2))
    wide = np.degrees(np.arccos(np.clip(min_cos, -1, 1))) >= ransac.min_angle
    clean = finite & wide & np.all(
        (residuals < ransac.threshold_px) | ~mask, axis=1
    )

    results: list[TriangulationResult | None] = []
    n_fallback = 0
    for g, (ids, pix) in enumerate(groups):
        if clean[g]:
            k = sizes[g]
            results.append(
                TriangulationResult(
                    point=points[g],
                    camera_ids=np.asarray(ids, dtype=int),
                    residuals=residuals[g, :k].copy(),
                    inliers=np.ones(k, dtype=bool),
                )
            )
            continue
        n_fallback += 1
        observations = [
            Observation(camera_id=int(c), pixel=p)
            for c, p in zip(ids, pix, strict=True)
        ]
        try:
            results.append(triangulate(rig, observations, ransac))
        except DegenerateTriangulationError:
            results.append(None)
    logger.debug(
        "Triangulated %d groups, %d through RANSAC", n_groups, n_fallback
    )
    return results


def _batch_residuals(projections, pixels, points) -> np.ndarray:
    projected = (
        np.einsum("gkij,gj->gki", projections[..., :3], points)
        + projections[..., 3]
    )
    depth = projected[..., 2]
    safe = np.where(depth > 0, depth, 1.0)
    residuals = np.linalg.norm(projected[..., :2] / safe[..., None] - pixels, axis=2)
    return np.where(depth > 0, residuals, np.inf)


def _refine_batch(projections, pixels, mask, points) -> np.ndarray:
    """Batched Gauss-Newton over padded groups; rejected steps are dropped."""
    rotations, offsets = projections[..., :3], projections[..., 3]
    weights = mask.astype(float)

    def cost(x):
        residuals = _batch_residuals(projections, pixels, x)
        residuals = np.where(mask, residuals, 0.0)
        return np.sum(residuals**2, axis=1)

    current = cost(points)
    active = np.isfinite(current)
    for _ in range(GN_MAX_ITER):
        if not active.any():
            break
        projected = np.einsum("gkij,gj->gki", rotations, points) + offsets
        depth = np.where(mask, projected[..., 2], 1.0)
        depth = np.where(depth > 0, depth, 1.0)
        uv = projected[..., :2] / depth[..., None]
        residual = (uv - pixels) * weights[..., None]
        jacobian = (
            (rotations[:, :, :2] - uv[..., None] * rotations[:, :, 2:3])
            / depth[..., None, None]
        ) * weights[..., None, None]
        jacobian = jacobian.reshape(len(points), -1, 3)
        residual = residual.reshape(len(points), -1)
        normal = np.einsum("gki,gkj->gij", jacobian, jacobian)
        gradient = np.einsum("gki,gk->gi", jacobian, residual)
        step = -np.einsum("gij,gj->gi", np.linalg.pinv(normal), gradient)
        candidate = points + step
        candidate_cost = cost(candidate)
        accept = active & (candidate_cost <= current)
        points = np.where(accept[:, None], candidate, points)
        current = np.where(accept, candidate_cost, current)
        active = accept & (np.linalg.norm(step, axis=1) >= GN_STEP_TOL)
    return points
