import json
import logging
from dataclasses import dataclass, field

import matplotlib
import numpy as np
import pandas as pd
from omegaconf import MISSING
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from modules.data.utils.utils import stage_rng
from modules.geometry.camera import Camera, Observation, Rig, is_rotation
from modules.reconstruction.trajectory import Trajectory, TrajectorySet

logger = logging.getLogger(__name__)

OBSERVATION_FORMAT_VERSION = 1
OBSERVATION_DTYPE = np.dtype(
    [
        ("frame", "<u4"),
        ("trajectory_id", "<u4"),
        ("camera", "<u2"),
        ("x", "<f4"),
        ("y", "<f4"),
    ]
)
BODY_SHAPES = ("ellipsoid", "box")
CONFUSION_MODES = ("pixel", "instance")


@dataclass
class BodySpec:
    r"""Declarative description of one rigid body and its motion.

    Parameters
    ----------
    label : int
        Class index in ``1 .. N``.
    shape : str
        ``"ellipsoid"`` or ``"box"``; points are sampled on the surface.
    extent : list of float
        Half-axes (ellipsoid) or half-sides (box) in meters.
    n_points : int
        Number of surface points.
    center : list of float
        Position of the body at frame 0 in meters.
    velocity : list of float
        Linear velocity in m/s.
    angular_velocity : list of float
        Rotation vector rate in rad/s.
    oscillation : list of float
        Amplitude in meters of a sinusoidal back-and-forth motion.
    period : float
        Period of the oscillation in seconds.
    """

    label: int = 1
    shape: str = "ellipsoid"
    extent: list[float] = field(default_factory=lambda: [0.15, 0.15, 0.3])
    n_points: int = 150
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.25])
    velocity: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    angular_velocity: list[float] = field(
        default_factory=lambda: [0.0, 0.0, 0.0]
    )
    oscillation: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    period: float = 2.0

    def __post_init__(self):
        if self.shape not in BODY_SHAPES:
            raise ValueError(
                f"Unknown body shape {self.shape}, expected one of {BODY_SHAPES}"
            )
        if self.n_points < 4:
            raise ValueError("A body needs at least 4 points")
        if any(e <= 0 for e in self.extent):
            raise ValueError("Body extents must be positive")
        if self.period <= 0:
            raise ValueError("Oscillation period must be positive")
        for name in ("extent", "center", "velocity", "angular_velocity", "oscillation"):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"BodySpec.{name} must have 3 entries")


@dataclass
class RigLayout:
    r"""Cylindrical camera layout.

    Parameters
    ----------
    radius : float
        Cylinder radius in meters.
    height : float
        Cylinder height in meters; cameras aim at the axis midpoint.
    row_heights : list of float
        Height of every camera row in meters.
    cameras_per_row : list of int
        Number of cameras in each row; odd rows are staggered by half a step.
    image_width, image_height : int
        Image size in pixels.
    focal : float
        Focal length in pixels.
    frame_rate : float
        Capture rate in Hz.
    """

    radius: float = 1.5
    height: float = 2.5
    row_heights: list[float] = field(default_factory=lambda: [0.6, 1.9])
    cameras_per_row: list[int] = field(default_factory=lambda: [35, 34])
    image_width: int = 1280
    image_height: int = 1024
    focal: float = 700.0
    frame_rate: float = 30.0

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("Cylinder radius and height must be positive")
        if len(self.row_heights) != len(self.cameras_per_row):
            raise ValueError("row_heights and cameras_per_row differ in length")
        if any(h <= 0 for h in self.row_heights):
            raise ValueError("Row heights must be positive")
        if any(n < 1 for n in self.cameras_per_row) or sum(self.cameras_per_row) < 2:
            raise ValueError("The layout needs at least 2 cameras")
        if self.focal <= 0 or self.frame_rate <= 0:
            raise ValueError("focal and frame_rate must be positive")


@dataclass
class NoiseSpec:
    r"""Observation and recognizer noise.

    Parameters
    ----------
    pixel_sigma : float
        Standard deviation of the Gaussian pixel noise.
    confusion_rate : float
        Probability :math:`\rho` that the high confidence goes to a wrong
        label.
    confusion_mode : str
        ``"pixel"`` draws the confusion per projection, ``"instance"`` once
        per camera, frame and body.
    false_detection_rate : float
        Expected number of spurious detections per image.
    false_detection_radius : float
        Radius of a spurious detection in pixels.
    bleed_radius : float
        Radius in pixels around a projection that carries its confidence.
    true_alpha, true_beta : float
        Beta distribution of high confidences.
    background_alpha, background_beta : float
        Beta distribution of background confidences.
    """

    pixel_sigma: float = 0.5
    confusion_rate: float = 0.0
    confusion_mode: str = "pixel"
    false_detection_rate: float = 0.0
    false_detection_radius: float = 20.0
    bleed_radius: float = 4.0
    true_alpha: float = 8.0
    true_beta: float = 2.0
    background_alpha: float = 1.0
    background_beta: float = 20.0

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be non-negative")
        if not 0 <= self.confusion_rate <= 1:
            raise ValueError("confusion_rate must be in [0, 1]")
        if self.confusion_mode not in CONFUSION_MODES:
            raise ValueError(
                f"Unknown confusion mode {self.confusion_mode}, "
                f"expected one of {CONFUSION_MODES}"
            )
        if self.false_detection_rate < 0:
            raise ValueError("false_detection_rate must be non-negative")
        if self.bleed_radius < 0 or self.false_detection_radius <= 0:
            raise ValueError("Detection radii must be positive")


@dataclass
class SceneSpec:
    r"""Synthetic scene: bodies, sequence length, rig layout and noise.

    Parameters
    ----------
    bodies : list of BodySpec
        Rigid bodies of the scene.
    frames : int
        Number of frames T, at least 2.
    n_classes : int
        Number of semantic classes N.
    rig : RigLayout
        Camera layout.
    noise : NoiseSpec
        Noise model.
    occlusion_radius : float
        Pixel radius of the point z-buffer.
    seed : int
        Seed of every random draw of the scene.
    """

    bodies: list[BodySpec] = MISSING
    frames: int = 90
    n_classes: int = 4
    rig: RigLayout = field(default_factory=RigLayout)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    occlusion_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.bodies is not MISSING and not self.bodies:
            raise ValueError("A scene needs at least one body")
        if self.frames < 2:
            raise ValueError("A scene needs at least 2 frames")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        for body in [] if self.bodies is MISSING else self.bodies:
            if not 1 <= body.label <= self.n_classes:
                raise ValueError(
                    f"Body label {body.label} outside 1..{self.n_classes}"
                )
        if self.occlusion_radius <= 0:
            raise ValueError("occlusion_radius must be positive")


@dataclass(frozen=True, eq=False)
class RigidBody:
    r"""Point cloud moving under one SE(3) pose per frame.

    Parameters
    ----------
    label : int
        Class index in ``1 .. N``.
    points : np.ndarray
        Body-frame points (P, 3).
    rotations : np.ndarray
        Per-frame rotations (T, 3, 3).
    translations : np.ndarray
        Per-frame translations (T, 3).
    """

    label: int
    points: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValueError("A rigid body needs at least 4 points")
        centered = self.points - self.points.mean(axis=0)
        singular = np.linalg.svd(centered, compute_uv=False)
        if singular[-1] <= 1e-9 * singular[0]:
            raise ValueError("Rigid body points are coplanar")
        if len(self.rotations) != len(self.translations):
            raise ValueError("rotations and translations differ in length")
        for rotation in self.rotations:
            if not is_rotation(rotation, tol=1e-9):
                raise ValueError("Body pose rotation is not in SO(3)")

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    def positions(self, frame: int) -> np.ndarray:
        r"""World positions (P, 3) at one frame."""
        return self.points @ self.rotations[frame].T + self.translations[frame]

    def trajectory(self) -> np.ndarray:
        r"""World positions (T, P, 3) over the sequence."""
        return (
            np.einsum("tij,pj->tpi", self.rotations, self.points)
            + self.translations[:, None, :]
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    r"""Ground truth of a rendered scene.

    Parameters
    ----------
    labels : np.ndarray
        Class of every point (P,), in ``1 .. N``.
    body_ids : np.ndarray
        Body of every point (P,).
    positions : np.ndarray
        World positions (T, P, 3).
    visible : np.ndarray
        Visibility flags (T, C, P): in front, inside the image and
        unoccluded.
    """

    labels: np.ndarray
    body_ids: np.ndarray
    positions: np.ndarray
    visible: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.labels)

    def visible_frames(self, point: int, min_views: int = 2) -> np.ndarray:
        r"""Frames where at least ``min_views`` cameras see the point."""
        return np.flatnonzero(self.visible[:, :, point].sum(axis=1) >= min_views)

    def visible_intervals(
        self, point: int, min_views: int = 2
    ) -> list[tuple[int, int]]:
        r"""Maximal runs ``(start, end)`` of frames seen by ``min_views``."""
        frames = self.visible_frames(point, min_views)
        if len(frames) == 0:
            return []
        breaks = np.flatnonzero(np.diff(frames) > 1)
        starts = np.concatenate([[frames[0]], frames[breaks + 1]])
        ends = np.concatenate([frames[breaks], [frames[-1]]])
        return [(int(s), int(e)) for s, e in zip(starts, ends, strict=True)]

    def save(self, directory) -> list[str]:
        names = []
        for name in ("labels", "body_ids", "positions", "visible"):
            path = f"{directory}/truth_{name}.npy"
            np.save(path, getattr(self, name))
            names.append(path)
        return names

    @classmethod
    def load(cls, directory) -> "GroundTruth":
        return cls(
            **{
                name: np.load(f"{directory}/truth_{name}.npy")
                for name in ("labels", "body_ids", "positions", "visible")
            }
        )


class ObservationSet:
    r"""Columnar store of the observations of a sequence.

    Records are sorted by frame, then trajectory id, then camera.

    Parameters
    ----------
    records : np.ndarray
        Structured array of dtype :data:`OBSERVATION_DTYPE`.
    n_frames : int
        Number of frames.
    n_cameras : int
        Number of cameras.
    """

    def __init__(self, records: np.ndarray, n_frames: int, n_cameras: int):
        records = np.asarray(records, dtype=OBSERVATION_DTYPE)
        order = np.lexsort(
            (records["camera"], records["trajectory_id"], records["frame"])
        )
        self.records = records[order]
        self.n_frames = int(n_frames)
        self.n_cameras = int(n_cameras)
        self._offsets = np.searchsorted(
            self.records["frame"], np.arange(self.n_frames + 1)
        )

    def __len__(self) -> int:
        return len(self.records)

    def frame(self, t: int) -> np.ndarray:
        return self.records[self._offsets[t] : self._offsets[t + 1]]

    def groups(self, t: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        r"""Observations of one frame grouped by correspondence id.

        Parameters
        ----------
        t : int
            Frame index.

        Returns
        -------
        dict
            ``trajectory_id -> (camera ids (k,), pixels (k, 2))``.
        """
        records = self.frame(t)
        if len(records) == 0:
            return {}
        ids, starts = np.unique(records["trajectory_id"], return_index=True)
        stops = np.append(starts[1:], len(records))
        cameras = records["camera"].astype(int)
        pixels = np.stack([records["x"], records["y"]], axis=1).astype(float)
        return {
            int(i): (cameras[a:b], pixels[a:b])
            for i, a, b in zip(ids, starts, stops, strict=True)
        }

    def iter_frame(self, t: int):
        r"""Yields ``(trajectory_id, Observation)`` for one frame."""
        for record in self.frame(t):
            yield (
                int(record["trajectory_id"]),
                Observation(
                    camera_id=int(record["camera"]),
                    pixel=np.array([record["x"], record["y"]], dtype=float),
                    frame=t,
                ),
            )

    def save(self, path) -> None:
        r"""Writes the binary record stream and its JSON sidecar header."""
        self.records.tofile(path)
        header = {
            "format_version": OBSERVATION_FORMAT_VERSION,
            "n_records": len(self),
            "n_frames": self.n_frames,
            "n_cameras": self.n_cameras,
            "fields": [
                [name, OBSERVATION_DTYPE[name].str]
                for name in OBSERVATION_DTYPE.names
            ],
        }
        with open(f"{path}.json", "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ObservationSet":
        with open(f"{path}.json") as f:
            header = json.load(f)
        if header["format_version"] != OBSERVATION_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported observation format {header['format_version']}"
            )
        records = np.fromfile(path, dtype=OBSERVATION_DTYPE)
        if len(records) != header["n_records"]:
            raise ValueError(
                f"Observation stream holds {len(records)} records, header "
                f"announces {header['n_records']}"
            )
        return cls(records, header["n_frames"], header["n_cameras"])

    def to_csv(self, path) -> None:
        r"""Debug CSV of every observation."""
        pd.DataFrame(self.records).to_csv(path, index=False)


def look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    r"""World-to-camera rotation of a camera at ``center`` aiming at ``target``.

    Rows are the camera right, down and forward axes; world ``+z`` is up.
    """
    forward = target - center
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 1 - 1e-12:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def build_rig(spec: SceneSpec) -> Rig:
    r"""Builds the cylindrical rig of a scene.

    Cameras of a row are evenly spaced on the circle of the cylinder at the
    row height, odd rows rotated by half a step; every camera aims at the
    midpoint of the cylinder axis.

    Parameters
    ----------
    spec : SceneSpec
        Scene specification.

    Returns
    -------
    Rig
        The camera rig.
    """
    layout = spec.rig
    target = np.array([0.0, 0.0, layout.height / 2])
    cameras = []
    for row, (z, count) in enumerate(
        zip(layout.row_heights, layout.cameras_per_row, strict=True)
    ):
        stagger = np.pi / count if row % 2 else 0.0
        for k in range(count):
            angle = 2 * np.pi * k / count + stagger
            center = np.array(
                [layout.radius * np.cos(angle), layout.radius * np.sin(angle), z]
            )
            cameras.append(
                Camera(
                    id=len(cameras),
                    fx=layout.focal,
                    fy=layout.focal,
                    cx=layout.image_width / 2,
                    cy=layout.image_height / 2,
                    rotation=look_at(center, target),
                    center=center,
                    width=layout.image_width,
                    height=layout.image_height,
                )
            )
    logger.debug("Built rig with %d cameras", len(cameras))
    return Rig(cameras=tuple(cameras), frame_rate=layout.frame_rate)


def _surface_points(spec: BodySpec, rng: np.random.Generator) -> np.ndarray:
    extent = np.asarray(spec.extent, dtype=float)
    if spec.shape == "ellipsoid":
        directions = rng.normal(size=(spec.n_points, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return directions * extent
    points = rng.uniform(-1.0, 1.0, size=(spec.n_points, 3))
    faces = rng.integers(0, 3, size=spec.n_points)
    signs = rng.choice([-1.0, 1.0], size=spec.n_points)
    points[np.arange(spec.n_points), faces] = signs
    return points * extent


def make_body(
    spec: BodySpec, frames: int, frame_rate: float, rng: np.random.Generator
) -> RigidBody:
    r"""Samples a body's surface points and integrates its motion.

    Parameters
    ----------
    spec : BodySpec
        Body description.
    frames : int
        Number of frames.
    frame_rate : float
        Capture rate in Hz.
    rng : np.random.Generator
        Generator for the surface samples.

    Returns
    -------
    RigidBody
        The body with one pose per frame.
    """
    times = np.arange(frames) / frame_rate
    rotations = Rotation.from_rotvec(
        times[:, None] * np.asarray(spec.angular_velocity, dtype=float)
    ).as_matrix()
    translations = (
        np.asarray(spec.center, dtype=float)
        + times[:, None] * np.asarray(spec.velocity, dtype=float)
        + np.sin(2 * np.pi * times / spec.period)[:, None]
        * np.asarray(spec.oscillation, dtype=float)
    )
    return RigidBody(
        label=spec.label,
        points=_surface_points(spec, rng),
        rotations=rotations,
        translations=translations,
    )


def make_bodies(spec: SceneSpec) -> list[RigidBody]:
    r"""Instantiates every body of a scene from its derived random stream."""
    return [
        make_body(
            body,
            spec.frames,
            spec.rig.frame_rate,
            stage_rng(spec.seed, "synth.body", k),
        )
        for k, body in enumerate(spec.bodies)
    ]


def occluded_points(
    pixels: np.ndarray,
    depth: np.ndarray,
    body_ids: np.ndarray,
    valid: np.ndarray,
    radius: float,
) -> np.ndarray:
    r"""Point z-buffer of one camera.

    A point is occluded when a point of another body projects within
    ``radius`` pixels at a smaller depth.

    Parameters
    ----------
    pixels : np.ndarray
        Projections (P, 2).
    depth : np.ndarray
        Depths (P,).
    body_ids : np.ndarray
        Body of every point (P,).
    valid : np.ndarray
        Points in front of the camera and inside the image (P,).
    radius : float
        Conflict radius in pixels.

    Returns
    -------
    np.ndarray
        Boolean occlusion mask (P,).
    """
    occluded = np.zeros(len(pixels), dtype=bool)
    index = np.flatnonzero(valid)
    if len(index) < 2:
        return occluded
    pairs = cKDTree(pixels[index]).query_pairs(r=radius, output_type="ndarray")
    if len(pairs) == 0:
        return occluded
    a, b = index[pairs[:, 0]], index[pairs[:, 1]]
    cross = body_ids[a] != body_ids[b]
    deeper = np.where(depth[a] > depth[b], a, b)[cross]
    occluded[deeper] = True
    return occluded


def render_observations(
    scene: SceneSpec, rig: Rig, progress: bool = False
) -> tuple[ObservationSet, GroundTruth]:
    r"""Renders the noisy, occlusion-aware observations of a scene.

    Every body point is projected into every camera at every frame. Points
    behind a camera, outside its image or occluded by another body are not
    observed; the others receive Gaussian pixel noise drawn from the frame's
    random stream, and are dropped when the noisy pixel leaves the image.

    Parameters
    ----------
    scene : SceneSpec
        Scene specification.
    rig : Rig
        Camera rig.
    progress : bool, optional
        Show a progress bar over frames.

    Returns
    -------
    ObservationSet
        Observations keyed by correspondence (point) id.
    GroundTruth
        Labels, body ids, positions and visibility flags.
    """
    bodies = make_bodies(scene)
    labels = np.concatenate(
        [np.full(len(b.points), b.label, dtype=int) for b in bodies]
    )
    body_ids = np.concatenate(
        [np.full(len(b.points), k, dtype=int) for k, b in enumerate(bodies)]
    )
    positions = np.concatenate([b.trajectory() for b in bodies], axis=1)
    n_frames, n_points = positions.shape[:2]
    visible = np.zeros((n_frames, len(rig), n_points), dtype=bool)
    chunks = []
    for t in tqdm(range(n_frames), desc="render", disable=not progress):
        rng = stage_rng(scene.seed, "synth.render", t)
        pixels, depth = rig.project_all(positions[t])
        valid = (depth > 0) & rig.in_image(np.nan_to_num(pixels, nan=-1.0))
        for c in range(len(rig)):
            visible[t, c] = valid[c] & ~occluded_points(
                pixels[c], depth[c], body_ids, valid[c], scene.occlusion_radius
            )
        noise = rng.normal(0.0, 1.0, size=pixels.shape) * scene.noise.pixel_sigma
        noisy = pixels + noise
        keep = visible[t] & rig.in_image(np.nan_to_num(noisy, nan=-1.0))
        point_idx, camera_idx = np.nonzero(keep.T)
        records = np.empty(len(point_idx), dtype=OBSERVATION_DTYPE)
        records["frame"] = t
        records["trajectory_id"] = point_idx
        records["camera"] = camera_idx
        records["x"] = noisy[camera_idx, point_idx, 0]
        records["y"] = noisy[camera_idx, point_idx, 1]
        chunks.append(records)
    observations = ObservationSet(
        np.concatenate(chunks), n_frames=n_frames, n_cameras=len(rig)
    )
    truth = GroundTruth(
        labels=labels, body_ids=body_ids, positions=positions, visible=visible
    )
    logger.info(
        "Rendered %d observations of %d points over %d frames",
        len(observations),
        n_points,
        n_frames,
    )
    return observations, truth


def ground_truth_trajectories(
    truth: GroundTruth, min_views: int = 2
) -> TrajectorySet:
    r"""Ground-truth trajectories: one per maximal run of well-seen frames.

    Runs shorter than two frames are dropped, so every trajectory satisfies
    :math:`T_e < T_d \leq T`. Visibility values are the 0/1 flags.

    Parameters
    ----------
    truth : GroundTruth
        Scene ground truth.
    min_views : int, optional
        Cameras needed for a frame to count as seen.

    Returns
    -------
    TrajectorySet
        The ground-truth trajectories, ordered by point then emergence.
    """
    trajectories = []
    for point in range(truth.n_points):
        for start, end in truth.visible_intervals(point, min_views):
            if end == start:
                continue
            trajectories.append(
                Trajectory(
                    id=len(trajectories),
                    source_id=point,
                    emerge=start,
                    points=truth.positions[start : end + 1, point],
                    visibility=truth.visible[start : end + 1, :, point].astype(float),
                )
            )
    n_frames, n_cameras = truth.visible.shape[:2]
    return TrajectorySet(trajectories, n_frames=n_frames, n_cameras=n_cameras)


def export_ply(path, points: np.ndarray, labels: np.ndarray) -> None:
    r"""Writes an ASCII PLY point list coloured by label.

    Parameters
    ----------
    path : str or Path
        Output file.
    points : np.ndarray
        Points (n, 3).
    labels : np.ndarray
        Class of every point (n,), in ``1 .. N``.
    """
    cmap = matplotlib.colormaps["tab10"]
    colors = (
        np.array([cmap((label - 1) % cmap.N)[:3] for label in labels]) * 255
    ).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(points, colors, strict=True)
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
