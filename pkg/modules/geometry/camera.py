import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

RIG_FORMAT_VERSION = 1
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Camera:
    r"""Pinhole camera with projection matrix :math:`P = K R [I | -C]`.

    Parameters
    ----------
    id : int
        Camera index.
    fx, fy : float
        Focal lengths in pixels.
    cx, cy : float
        Principal point in pixels.
    rotation : np.ndarray
        World-to-camera rotation (3, 3), orthonormal with determinant +1.
    center : np.ndarray
        Camera centre in world coordinates (meters).
    width, height : int
        Image size in pixels.
    """

    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    center: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        center = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "center", center)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(
                f"Camera {self.id}: focal lengths must be positive, "
                f"got ({self.fx}, {self.fy})"
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Camera {self.id}: principal point ({self.cx}, {self.cy}) "
                f"outside image {self.width}x{self.height}"
            )
        if not is_rotation(rotation):
            raise ValueError(
                f"Camera {self.id}: rotation is not orthonormal with det +1"
            )
        if not np.all(np.isfinite(center)):
            raise ValueError(f"Camera {self.id}: center must be finite")

    @cached_property
    def intrinsics(self) -> np.ndarray:
        r"""Intrinsic matrix :math:`K` (3, 3)."""
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    @cached_property
    def projection_matrix(self) -> np.ndarray:
        r"""Projection matrix :math:`P = K R [I | -C]` (3, 4)."""
        extrinsic = np.hstack(
            [self.rotation, (-self.rotation @ self.center)[:, None]]
        )
        return self.intrinsics @ extrinsic

    @property
    def optical_axis(self) -> np.ndarray:
        r"""Unit viewing direction in world coordinates."""
        return self.rotation[2]

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        r"""Checks which pixels fall inside the image bounds.

        Parameters
        ----------
        pixels : np.ndarray
            Pixel coordinates (..., 2).

        Returns
        -------
        np.ndarray
            Boolean mask (...).
        """
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def backproject(self, pixel: np.ndarray) -> np.ndarray:
        r"""Returns the unit world-frame direction of the ray through pixels.

        Parameters
        ----------
        pixel : np.ndarray
            Pixel coordinates (2,) or (n, 2).

        Returns
        -------
        np.ndarray
            Unit ray directions (3,) or (n, 3).
        """
        pixel = np.asarray(pixel, dtype=float)
        x = (pixel[..., 0] - self.cx) / self.fx
        y = (pixel[..., 1] - self.cy) / self.fy
        rays_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        rays = rays_cam @ self.rotation
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": [float(v) for v in self.rotation.ravel()],
            "center": [float(v) for v in self.center],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Camera":
        return cls(
            id=int(record["id"]),
            fx=float(record["fx"]),
            fy=float(record["fy"]),
            cx=float(record["cx"]),
            cy=float(record["cy"]),
            rotation=np.asarray(record["rotation"], dtype=float),
            center=np.asarray(record["center"], dtype=float),
            width=int(record["width"]),
            height=int(record["height"]),
        )


@dataclass(frozen=True, eq=False)
class Rig:
    r"""Ordered set of calibrated cameras sharing one clock.

    Parameters
    ----------
    cameras : tuple of Camera
        Cameras ordered by id; ids must be ``0 .. C-1``.
    frame_rate : float
        Capture rate in Hz.
    """

    cameras: tuple[Camera, ...]
    frame_rate: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 2:
            raise ValueError("A rig needs at least 2 cameras")
        ids = [camera.id for camera in self.cameras]
        if ids != list(range(len(ids))):
            raise ValueError(
                f"Camera ids must be contiguous from 0 in order, got {ids}"
            )
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, camera_id: int) -> Camera:
        return self.cameras[camera_id]

    def __iter__(self):
        return iter(self.cameras)

    @cached_property
    def projection_matrices(self) -> np.ndarray:
        r"""Stacked projection matrices (C, 3, 4)."""
        return np.stack([camera.projection_matrix for camera in self.cameras])

    @cached_property
    def image_sizes(self) -> np.ndarray:
        r"""Image (width, height) per camera (C, 2)."""
        return np.array(
            [[camera.width, camera.height] for camera in self.cameras],
            dtype=float,
        )

    def project_all(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r"""Projects points into every camera.

        Parameters
        ----------
        points : np.ndarray
            World points (n, 3).

        Returns
        -------
        pixels : np.ndarray
            Pixel coordinates (C, n, 2); undefined where depth <= 0.
        depth : np.ndarray
            Homogeneous depth :math:`P^3 \tilde{X}` (C, n).
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        homogeneous = np.hstack([points, np.ones((len(points), 1))])
        projected = np.einsum("cij,nj->cni", self.projection_matrices, homogeneous)
        depth = projected[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            pixels = projected[..., :2] / depth[..., None]
        return pixels, depth

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        r"""Per-camera image bounds check for (C, n, 2) pixels."""
        sizes = self.image_sizes[:, None, :]
        return np.all((pixels >= 0) & (pixels < sizes), axis=-1)

    @cached_property
    def _ray_matrices(self) -> np.ndarray:
        # Maps homogeneous pixels to world-frame rays: R^T K^-1.
        return np.stack(
            [c.rotation.T @ np.linalg.inv(c.intrinsics) for c in self.cameras]
        )

    def backproject(
        self, camera_ids: np.ndarray, pixels: np.ndarray
    ) -> np.ndarray:
        r"""Vectorised :meth:`Camera.backproject` over any batch shape.

        Parameters
        ----------
        camera_ids : np.ndarray
            Camera ids (...).
        pixels : np.ndarray
            Pixels (..., 2).

        Returns
        -------
        np.ndarray
            Unit world-frame rays (..., 3).
        """
        pixels = np.asarray(pixels, dtype=float)
        homogeneous = np.concatenate(
            [pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1
        )
        rays = np.einsum(
            "...ij,...j->...i", self._ray_matrices[camera_ids], homogeneous
        )
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "format_version": RIG_FORMAT_VERSION,
            "frame_rate": float(self.frame_rate),
            "cameras": [camera.to_dict() for camera in self.cameras],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Rig":
        version = record.get("format_version")
        if version != RIG_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported rig format_version {version}, "
                f"expected {RIG_FORMAT_VERSION}"
            )
        cameras = sorted(
            (Camera.from_dict(c) for c in record["cameras"]),
            key=lambda camera: camera.id,
        )
        return cls(cameras=tuple(cameras), frame_rate=float(record["frame_rate"]))


@dataclass(frozen=True, eq=False)
class Observation:
    r"""One measured 2D projection.

    Parameters
    ----------
    camera_id : int
        Observing camera.
    pixel : np.ndarray
        Measured pixel (2,).
    frame : int
        Time index.
    """

    camera_id: int
    pixel: np.ndarray = field(repr=False)
    frame: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2)
        )

    def is_inside(self, rig: Rig) -> bool:
        return bool(rig[self.camera_id].in_image(self.pixel))


def is_rotation(matrix: np.ndarray, tol: float = ORTHONORMAL_TOL) -> bool:
    r"""Checks orthonormality and unit determinant of a 3x3 matrix.

    Parameters
    ----------
    matrix : np.ndarray
        Candidate rotation (3, 3).
    tol : float
        Tolerance on :math:`\|RR^T - I\|` and :math:`|\det R - 1|`.

    Returns
    -------
    bool
        Whether the matrix is a proper rotation.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        return False
    return bool(
        np.abs(matrix @ matrix.T - np.eye(3)).max() <= tol
        and abs(np.linalg.det(matrix) - 1.0) <= tol
    )


def project(camera: Camera, point: np.ndarray) -> np.ndarray | None:
    r"""Projects a 3D point into a camera.

    Parameters
    ----------
    camera : Camera
        The camera.
    point : np.ndarray
        World point (3,), finite.

    Returns
    -------
    np.ndarray or None
        Dehomogenised pixel (2,), or None when the point is at or behind the
        camera plane (depth :math:`P^3 \tilde{X} \leq 0`).
    """
    point = np.asarray(point, dtype=float).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    projected = camera.projection_matrix @ np.append(point, 1.0)
    if projected[2] <= 0:
        return None
    return projected[:2] / projected[2]


def project_points(
    camera: Camera, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    r"""Vectorised projection of many points into one camera.

    Parameters
    ----------
    camera : Camera
        The camera.
    points : np.ndarray
        World points (n, 3).

    Returns
    -------
    pixels : np.ndarray
        Pixels (n, 2); NaN where the point is behind the camera.
    in_front : np.ndarray
        Boolean mask of points with positive depth (n,).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    homogeneous = np.hstack([points, np.ones((len(points), 1))])
    projected = homogeneous @ camera.projection_matrix.T
    in_front = projected[:, 2] > 0
    pixels = np.full((len(points), 2), np.nan)
    pixels[in_front] = projected[in_front, :2] / projected[in_front, 2:3]
    return pixels, in_front


def visibility(
    camera: Camera,
    point: np.ndarray,
    observation: Observation | np.ndarray,
    sigma: float,
) -> float:
    r"""Probability that a camera cleanly observes a point.

    :math:`V = \exp(-(r / \sigma)^2)` where :math:`r` is the norm of the
    reprojection residual between the projection of the point and the
    observed pixel.

    Parameters
    ----------
    camera : Camera
        The camera.
    point : np.ndarray
        World point (3,).
    observation : Observation or np.ndarray
        Observation in this camera, or its pixel (2,).
    sigma : float
        Reprojection tolerance in pixels, > 0.

    Returns
    -------
    float
        Visibility in [0, 1]; 0 when the point is behind the camera or
        projects outside the image.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pixel = (
        observation.pixel
        if isinstance(observation, Observation)
        else np.asarray(observation, dtype=float)
    )
    projection = project(camera, point)
    if projection is None or not camera.in_image(projection):
        return 0.0
    residual = float(np.linalg.norm(projection - pixel))
    return float(np.exp(-((residual / sigma) ** 2)))


def visibility_scores(
    camera: Camera, points: np.ndarray, pixels: np.ndarray, sigma: float
) -> np.ndarray:
    r"""Vectorised :func:`visibility` for matched points and pixels.

    Parameters
    ----------
    camera : Camera
        The camera.
    points : np.ndarray
        World points (n, 3).
    pixels : np.ndarray
        Observed pixels (n, 2).
    sigma : float
        Reprojection tolerance in pixels.

    Returns
    -------
    np.ndarray
        Visibility per point (n,).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    projections, in_front = project_points(camera, points)
    valid = in_front & camera.in_image(np.nan_to_num(projections, nan=-1.0))
    residual = np.linalg.norm(projections - np.asarray(pixels, float), axis=1)
    scores = np.exp(-((np.nan_to_num(residual, nan=np.inf) / sigma) ** 2))
    return np.where(valid, scores, 0.0)


def pixel_density(
    rig: Rig, points: np.ndarray, cube_size: float = 0.01
) -> np.ndarray:
    r"""Counts the pixels that measure a small cube around each point.

    A cube of side :math:`s` at depth :math:`Z` covers roughly
    :math:`(f_x s / Z)(f_y s / Z)` pixels of a camera. Summing over the
    cameras that see the point gives the pixel density of the capture
    volume.

    Parameters
    ----------
    rig : Rig
        The camera rig.
    points : np.ndarray
        World points (n, 3).
    cube_size : float, optional
        Cube side in meters. Default is 1 cm.

    Returns
    -------
    np.ndarray
        Pixels per cube for each point (n,).
    """
    pixels, depth = rig.project_all(points)
    seen = (depth > 0) & rig.in_image(np.nan_to_num(pixels, nan=-1.0))
    focal = np.array([[c.fx * c.fy] for c in rig.cameras])
    with np.errstate(divide="ignore", invalid="ignore"):
        footprint = focal * cube_size**2 / depth**2
    return np.where(seen, footprint, 0.0).sum(axis=0)


def load_rig(path) -> Rig:
    r"""Loads a rig from its JSON document.

    Parameters
    ----------
    path : str or Path
        Path to the rig file.

    Returns
    -------
    Rig
        The rig.
    """
    with open(path) as f:
        return Rig.from_dict(json.load(f))


def save_rig(rig: Rig, path) -> None:
    r"""Writes a rig as a JSON document with a ``format_version`` field."""
    with open(path, "w") as f:
        json.dump(rig.to_dict(), f, indent=2, sort_keys=True)
    logger.debug("Wrote rig with %d cameras to %s", len(rig), path)
