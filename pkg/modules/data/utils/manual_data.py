import numpy as np
from scipy.spatial.transform import Rotation

from modules.data.synthesis.scene import (
    BodySpec,
    NoiseSpec,
    RigLayout,
    SceneSpec,
    look_at,
)
from modules.geometry.camera import Camera, Rig
from modules.reconstruction.trajectory import Trajectory, TrajectorySet


def load_manual_camera():
    """Create a camera at the origin looking down +z, for testing purposes."""
    return Camera(
        id=0,
        fx=1000.0,
        fy=1000.0,
        cx=640.0,
        cy=512.0,
        rotation=np.eye(3),
        center=np.zeros(3),
        width=1280,
        height=1024,
    )


def load_manual_rig(n_cameras=8, radius=2.0, height=1.0, focal=800.0):
    """Create a ring of cameras aiming at the point (0, 0, height)."""
    target = np.array([0.0, 0.0, height])
    cameras = []
    for k in range(n_cameras):
        angle = 2 * np.pi * k / n_cameras
        center = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        cameras.append(
            Camera(
                id=k,
                fx=focal,
                fy=focal,
                cx=640.0,
                cy=512.0,
                rotation=look_at(center, target),
                center=center,
                width=1280,
                height=1024,
            )
        )
    return Rig(cameras=tuple(cameras), frame_rate=30.0)


def load_manual_scene(frames=6, confusion_rate=0.0, false_detection_rate=0.0):
    """Create a small two-body scene seen by 8 cameras."""
    return SceneSpec(
        bodies=[
            BodySpec(
                label=1,
                shape="ellipsoid",
                extent=[0.1, 0.1, 0.15],
                n_points=30,
                center=[-0.25, 0.0, 1.25],
                velocity=[0.15, 0.0, 0.0],
                angular_velocity=[0.0, 0.0, 0.5],
            ),
            BodySpec(
                label=2,
                shape="box",
                extent=[0.08, 0.08, 0.08],
                n_points=20,
                center=[0.3, 0.0, 1.1],
                velocity=[-0.05, 0.0, 0.0],
            ),
        ],
        frames=frames,
        n_classes=3,
        rig=RigLayout(
            row_heights=[0.6, 1.9],
            cameras_per_row=[4, 4],
            image_width=640,
            image_height=512,
            focal=400.0,
        ),
        noise=NoiseSpec(
            pixel_sigma=0.0,
            confusion_rate=confusion_rate,
            false_detection_rate=false_detection_rate,
        ),
        seed=0,
    )


def load_manual_trajectories(n_frames=5, n_cameras=4):
    """Create two interleaved rigid groups of trajectories.

    The first 8 trajectories are the corners of a 4 cm cube translating by
    1 cm per frame along x; the last 4 lie within 3 cm of the cube centre
    and spin about z by 0.2 rad per frame.

    Returns
    -------
    TrajectorySet
        The 12 trajectories, alive on every frame with full visibility.
    np.ndarray
        Group of every trajectory (12,).
    """
    center = np.array([0.0, 0.0, 1.0])
    corners = np.array(
        [[x, y, z] for x in (-0.02, 0.02) for y in (-0.02, 0.02) for z in (-0.02, 0.02)]
    )
    spinners = np.array(
        [[0.03, 0.0, 0.0], [0.0, 0.03, 0.005], [-0.03, 0.0, -0.005], [0.0, -0.03, 0.0]]
    )
    tracks = []
    for t in range(n_frames):
        shifted = center + corners + [0.01 * t, 0.0, 0.0]
        spin = Rotation.from_rotvec([0.0, 0.0, 0.2 * t]).apply(spinners) + center
        tracks.append(np.vstack([shifted, spin]))
    tracks = np.stack(tracks)
    trajectories = [
        Trajectory(
            id=i,
            source_id=i,
            emerge=0,
            points=tracks[:, i],
            visibility=np.ones((n_frames, n_cameras)),
        )
        for i in range(tracks.shape[1])
    ]
    groups = np.array([0] * len(corners) + [1] * len(spinners))
    return TrajectorySet(trajectories, n_frames=n_frames, n_cameras=n_cameras), groups


def load_manual_track_set(points, n_cameras=2):
    """Wrap dense tracks (T, M, 3) into a trajectory set.

    Parameters
    ----------
    points : np.ndarray
        Positions (T, M, 3); NaN rows mark frames outside a lifespan, which
        must be contiguous.
    n_cameras : int, optional
        Number of cameras of the visibility rows.
    """
    points = np.asarray(points, dtype=float)
    trajectories = []
    for i in range(points.shape[1]):
        alive = np.flatnonzero(~np.isnan(points[:, i, 0]))
        start, stop = int(alive[0]), int(alive[-1]) + 1
        trajectories.append(
            Trajectory(
                id=i,
                source_id=i,
                emerge=start,
                points=points[start:stop, i],
                visibility=np.ones((stop - start, n_cameras)),
            )
        )
    return TrajectorySet(trajectories, n_frames=points.shape[0], n_cameras=n_cameras)


def load_manual_two_cubes(n_frames=5, n_cameras=4):
    """Create two 4 cm cubes of trajectories 20 cm apart.

    The first cube translates by 1 cm per frame along x; the second spins
    about its own vertical axis by 0.2 rad per frame.

    Returns
    -------
    TrajectorySet
        The 16 trajectories, alive on every frame.
    np.ndarray
        Cube of every trajectory (16,).
    """
    corners = np.array(
        [[x, y, z] for x in (-0.02, 0.02) for y in (-0.02, 0.02) for z in (-0.02, 0.02)]
    )
    first, second = np.array([0.0, 0.0, 1.0]), np.array([0.2, 0.0, 1.0])
    tracks = np.stack(
        [
            np.vstack(
                [
                    first + corners + [0.01 * t, 0.0, 0.0],
                    second + Rotation.from_rotvec([0.0, 0.0, 0.2 * t]).apply(corners),
                ]
            )
            for t in range(n_frames)
        ]
    )
    groups = np.array([0] * len(corners) + [1] * len(corners))
    return load_manual_track_set(tracks, n_cameras=n_cameras), groups
