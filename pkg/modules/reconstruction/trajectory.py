import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

STREAM_FORMAT_VERSION = 1

_HEADER = np.dtype(
    [
        ("format_version", "<u4"),
        ("n_traj", "<u4"),
        ("n_frames", "<u4"),
        ("n_cameras", "<u4"),
    ]
)
_RECORD = np.dtype(
    [("id", "<u4"), ("source_id", "<u4"), ("emerge", "<u4"), ("dissolve", "<u4")]
)
_PAIR = np.dtype([("camera", "<u2"), ("prob", "<f4")])


@dataclass(eq=False)
class Trajectory:
    r"""Fragment of a 3D point track with per-frame camera visibility.

    Parameters
    ----------
    id : int
        Trajectory index within its stream.
    source_id : int
        Correspondence id the fragment was tracked from.
    emerge : int
        First frame :math:`T_e`.
    points : np.ndarray
        Positions (n, 3) for frames :math:`T_e .. T_d`.
    visibility : np.ndarray
        Visibility probabilities (n, C).
    reprojection : np.ndarray, optional
        Average reprojection over the usable views per frame in pixels (n,).
    """

    id: int
    source_id: int
    emerge: int
    points: np.ndarray
    visibility: np.ndarray
    reprojection: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.visibility = np.asarray(self.visibility, dtype=float)
        if self.reprojection is None:
            self.reprojection = np.zeros(len(self.points))
        self.reprojection = np.asarray(self.reprojection, dtype=float)
        if len(self.points) == 0:
            raise ValueError(f"Trajectory {self.id} has no points")
        if self.visibility.shape[0] != len(self.points):
            raise ValueError(
                f"Trajectory {self.id}: visibility covers "
                f"{self.visibility.shape[0]} frames, points {len(self.points)}"
            )
        if len(self.reprojection) != len(self.points):
            raise ValueError(
                f"Trajectory {self.id}: reprojection length mismatch"
            )
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"Trajectory {self.id} has non-finite points")
        if np.any((self.visibility < 0) | (self.visibility > 1)):
            raise ValueError(f"Trajectory {self.id}: visibility outside [0, 1]")

    @property
    def dissolve(self) -> int:
        r"""Last frame :math:`T_d`."""
        return self.emerge + len(self.points) - 1

    @property
    def lifespan(self) -> int:
        return len(self.points)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.emerge, self.dissolve + 1)

    def alive(self, frame: int) -> bool:
        return self.emerge <= frame <= self.dissolve

    def point_at(self, frame: int) -> np.ndarray:
        return self.points[frame - self.emerge]

    def visibility_at(self, frame: int) -> np.ndarray:
        return self.visibility[frame - self.emerge]

    def visible_cameras(self, frame: int, eps: float) -> np.ndarray:
        return np.flatnonzero(self.visibility_at(frame) > eps)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "source_id": int(self.source_id),
            "emerge": int(self.emerge),
            "dissolve": int(self.dissolve),
            "points": self.points.tolist(),
            "reprojection": self.reprojection.tolist(),
            "visibility": [
                {str(c): float(row[c]) for c in np.flatnonzero(row)}
                for row in self.visibility
            ],
        }


class TrajectorySet:
    r"""Immutable collection of trajectories with a dense position tensor.

    Parameters
    ----------
    trajectories : list of Trajectory
        Trajectories whose ids are ``0 .. M-1`` in order.
    n_frames : int
        Number of frames of the sequence.
    n_cameras : int
        Number of rig cameras.
    """

    def __init__(self, trajectories, n_frames: int, n_cameras: int):
        self.trajectories = list(trajectories)
        self.n_frames = int(n_frames)
        self.n_cameras = int(n_cameras)
        for index, traj in enumerate(self.trajectories):
            if traj.id != index:
                raise ValueError(
                    f"Trajectory ids must be 0..M-1 in order, got {traj.id} "
                    f"at position {index}"
                )
            if traj.dissolve >= self.n_frames:
                raise ValueError(
                    f"Trajectory {traj.id} dissolves after the last frame"
                )
        self.emerge = np.array([t.emerge for t in self.trajectories], dtype=int)
        self.dissolve = np.array(
            [t.dissolve for t in self.trajectories], dtype=int
        )
        self.source_ids = np.array(
            [t.source_id for t in self.trajectories], dtype=int
        )
        self.positions = np.full((self.n_frames, len(self), 3), np.nan)
        for traj in self.trajectories:
            self.positions[traj.emerge : traj.dissolve + 1, traj.id] = traj.points
        self.alive = ~np.isnan(self.positions[..., 0])

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, index: int) -> Trajectory:
        return self.trajectories[index]

    def __iter__(self):
        return iter(self.trajectories)

    def shared_frames(self, i: int, j: int) -> np.ndarray:
        r"""Frames where both trajectories are alive."""
        start = max(self.emerge[i], self.emerge[j])
        end = min(self.dissolve[i], self.dissolve[j])
        return np.arange(start, end + 1) if start <= end else np.arange(0)

    def alive_at(self, frame: int) -> np.ndarray:
        return np.flatnonzero(self.alive[frame])

    def to_json(self, path) -> None:
        r"""Writes the trajectories as a JSON document (small scenes)."""
        document = {
            "format_version": STREAM_FORMAT_VERSION,
            "n_frames": self.n_frames,
            "n_cameras": self.n_cameras,
            "trajectories": [t.to_dict() for t in self.trajectories],
        }
        with open(path, "w") as f:
            json.dump(document, f, sort_keys=True)

    def save(self, path) -> None:
        r"""Writes the binary trajectory stream.

        Layout (little-endian): header ``format_version u32, n_traj u32,
        n_frames u32, n_cameras u32``, then per trajectory ``id u32, source_id u32,
        T_e u32, T_d u32``, the points as ``f32 x 3`` per frame, the
        reprojection as ``f32`` per frame and, for every frame, a ``u16``
        pair count followed by ``(camera u16, prob f32)`` pairs of the
        non-zero visibilities.

        Parameters
        ----------
        path : str or Path
            Output file.
        """
        header = np.array(
            [(STREAM_FORMAT_VERSION, len(self), self.n_frames, self.n_cameras)], dtype=_HEADER
        )
        chunks = [header.tobytes()]
        for traj in self.trajectories:
            record = np.array(
                [(traj.id, traj.source_id, traj.emerge, traj.dissolve)],
                dtype=_RECORD,
            )
            chunks.append(record.tobytes())
            chunks.append(traj.points.astype("<f4").tobytes())
            chunks.append(traj.reprojection.astype("<f4").tobytes())
            for row in traj.visibility:
                cameras = np.flatnonzero(row)
                pairs = np.empty(len(cameras), dtype=_PAIR)
                pairs["camera"] = cameras
                pairs["prob"] = row[cameras]
                chunks.append(np.array([len(cameras)], dtype="<u2").tobytes())
                chunks.append(pairs.tobytes())
        with open(path, "wb") as f:
            f.write(b"".join(chunks))
        logger.debug("Wrote %d trajectories to %s", len(self), path)

    @classmethod
    def load(cls, path) -> "TrajectorySet":
        r"""Reads a binary trajectory stream written by :meth:`save`."""
        with open(path, "rb") as f:
            buffer = f.read()
        header = np.frombuffer(buffer, dtype=_HEADER, count=1)[0]
        if header["format_version"] != STREAM_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported trajectory stream version "
                f"{header['format_version']}"
            )
        n_cameras = int(header["n_cameras"])
        offset = _HEADER.itemsize
        trajectories = []
        for _ in range(int(header["n_traj"])):
            record = np.frombuffer(buffer, dtype=_RECORD, count=1, offset=offset)[0]
            offset += _RECORD.itemsize
            n = int(record["dissolve"]) - int(record["emerge"]) + 1
            points = np.frombuffer(buffer, "<f4", count=3 * n, offset=offset)
            offset += 12 * n
            reprojection = np.frombuffer(buffer, "<f4", count=n, offset=offset)
            offset += 4 * n
            visibility = np.zeros((n, n_cameras))
            for k in range(n):
                count = int(np.frombuffer(buffer, "<u2", count=1, offset=offset)[0])
                offset += 2
                pairs = np.frombuffer(buffer, _PAIR, count=count, offset=offset)
                offset += _PAIR.itemsize * count
                visibility[k, pairs["camera"]] = pairs["prob"]
            trajectories.append(
                Trajectory(
                    id=int(record["id"]),
                    source_id=int(record["source_id"]),
                    emerge=int(record["emerge"]),
                    points=points.astype(float).reshape(n, 3),
                    visibility=visibility,
                    reprojection=reprojection.astype(float),
                )
            )
        return cls(
            trajectories, n_frames=int(header["n_frames"]), n_cameras=n_cameras
        )
