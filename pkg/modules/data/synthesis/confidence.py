import json
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree
from tqdm import tqdm

from modules.data.synthesis.scene import GroundTruth, SceneSpec
from modules.data.utils.utils import stage_rng
from modules.geometry.camera import Rig

logger = logging.getLogger(__name__)

FIELDS_FORMAT_VERSION = 1
RADIUS_TOL = 1e-9
# Margin keeping the high confidence strictly above every other entry.
ARGMAX_MARGIN = 1e-3


@dataclass(frozen=True, eq=False)
class ConfidenceField:
    r"""Class confidences of one camera at one frame.

    The field is a set of circular detections ("blobs"), each carrying an
    N-vector, over a background vector. A query returns the element-wise
    maximum of the background and of every blob covering the pixel.

    Parameters
    ----------
    camera_id : int
        Camera of the image.
    frame : int
        Time index.
    centers : np.ndarray
        Blob centres in pixels (B, 2).
    radii : np.ndarray
        Blob radii in pixels (B,).
    vectors : np.ndarray
        Blob confidences (B, N), float32 in [0, 1].
    background : np.ndarray
        Background confidences (N,), float32 in [0, 1].
    """

    camera_id: int
    frame: int
    centers: np.ndarray
    radii: np.ndarray
    vectors: np.ndarray
    background: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.background)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.centers)

    def query(self, pixel: np.ndarray) -> np.ndarray:
        r"""Confidence N-vector at one pixel."""
        return self.query_many(np.asarray(pixel, dtype=float)[None, :])[0]

    def query_many(self, pixels: np.ndarray) -> np.ndarray:
        r"""Confidence vectors at many pixels.

        Parameters
        ----------
        pixels : np.ndarray
            Finite pixel coordinates (n, 2).

        Returns
        -------
        np.ndarray
            Confidences (n, N) in [0, 1].
        """
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        out = np.tile(self.background.astype(float), (len(pixels), 1))
        if len(self.radii) == 0 or len(pixels) == 0:
            return out
        hits = self._tree.sparse_distance_matrix(
            cKDTree(pixels),
            float(self.radii.max()) + RADIUS_TOL,
            output_type="ndarray",
        )
        inside = hits["v"] <= self.radii[hits["i"]] + RADIUS_TOL
        np.maximum.at(out, hits["j"][inside], self.vectors[hits["i"][inside]])
        return out


class ConfidenceFieldSet:
    r"""All confidence fields of a sequence, indexed by ``(frame, camera)``.

    Parameters
    ----------
    fields : dict
        ``(frame, camera) -> ConfidenceField``.
    n_frames : int
        Number of frames.
    n_cameras : int
        Number of cameras.
    n_classes : int
        Number of semantic classes N.
    """

    def __init__(self, fields, n_frames: int, n_cameras: int, n_classes: int):
        self.fields = dict(fields)
        self.n_frames = int(n_frames)
        self.n_cameras = int(n_cameras)
        self.n_classes = int(n_classes)

    def __getitem__(self, key: tuple[int, int]) -> ConfidenceField:
        return self.fields[key]

    def __contains__(self, key) -> bool:
        return key in self.fields

    def __len__(self) -> int:
        return len(self.fields)

    def query(self, frame: int, camera: int, pixels: np.ndarray) -> np.ndarray:
        return self.fields[(frame, camera)].query_many(pixels)

    def save(self, directory) -> list[str]:
        r"""Writes the fields as flat ``.npy`` arrays plus a JSON header."""
        keys = sorted(self.fields)
        sizes = np.array([len(self.fields[k].radii) for k in keys], dtype=np.int64)
        stops = np.cumsum(sizes)
        index = np.column_stack(
            [np.array(keys, dtype=np.int64).reshape(-1, 2), stops - sizes, stops]
        )

        def stacked(name, *shape):
            parts = [getattr(self.fields[k], name) for k in keys]
            if not parts:
                return np.zeros((0, *shape))
            return np.concatenate(parts)

        arrays = {
            "index": index,
            "centers": stacked("centers", 2).astype("<f8"),
            "radii": stacked("radii").astype("<f4"),
            "vectors": stacked("vectors", self.n_classes).astype("<f4"),
            "backgrounds": np.array(
                [self.fields[k].background for k in keys], dtype="<f4"
            ).reshape(-1, self.n_classes),
        }
        paths = []
        for name, array in arrays.items():
            path = f"{directory}/fields_{name}.npy"
            np.save(path, array)
            paths.append(path)
        header = {
            "format_version": FIELDS_FORMAT_VERSION,
            "n_frames": self.n_frames,
            "n_cameras": self.n_cameras,
            "n_classes": self.n_classes,
        }
        path = f"{directory}/fields.json"
        with open(path, "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)
        paths.append(path)
        return paths

    @classmethod
    def load(cls, directory) -> "ConfidenceFieldSet":
        with open(f"{directory}/fields.json") as f:
            header = json.load(f)
        if header["format_version"] != FIELDS_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported confidence field format {header['format_version']}"
            )
        arrays = {
            name: np.load(f"{directory}/fields_{name}.npy")
            for name in ("index", "centers", "radii", "vectors", "backgrounds")
        }
        fields = {}
        for row, (frame, camera, start, stop) in enumerate(arrays["index"]):
            fields[(int(frame), int(camera))] = ConfidenceField(
                camera_id=int(camera),
                frame=int(frame),
                centers=arrays["centers"][start:stop].astype(float),
                radii=arrays["radii"][start:stop],
                vectors=arrays["vectors"][start:stop],
                background=arrays["backgrounds"][row],
            )
        return cls(
            fields,
            n_frames=header["n_frames"],
            n_cameras=header["n_cameras"],
            n_classes=header["n_classes"],
        )


def confidence_vectors(
    labels: np.ndarray,
    n_classes: int,
    confused: np.ndarray,
    wrong: np.ndarray,
    floor: np.ndarray,
    noise,
    rng: np.random.Generator,
) -> np.ndarray:
    r"""Draws the detection vectors of a batch of projections.

    Every entry starts from a background draw; the high draw goes to the
    true label, or to ``wrong`` where ``confused`` holds, and is lifted
    above every other entry and above ``floor`` so that it stays the
    strict argmax.

    Parameters
    ----------
    labels : np.ndarray
        True classes (n,), in ``1 .. N``.
    n_classes : int
        Number of classes N.
    confused : np.ndarray
        Boolean confusion draw (n,).
    wrong : np.ndarray
        Wrong class used on confusion (n,), in ``1 .. N``.
    floor : np.ndarray
        Background vector of the image (N,).
    noise : NoiseSpec
        Beta parameters.
    rng : np.random.Generator
        Random stream.

    Returns
    -------
    np.ndarray
        Confidences (n, N) as float32.
    """
    n = len(labels)
    vectors = rng.beta(noise.background_alpha, noise.background_beta, (n, n_classes))
    high = rng.beta(noise.true_alpha, noise.true_beta, n)
    target = np.where(confused, wrong, labels) - 1
    rows = np.arange(n)
    vectors[rows, target] = -np.inf
    rival = np.maximum(vectors.max(axis=1), floor.max())
    vectors[rows, target] = np.minimum(np.maximum(high, rival + ARGMAX_MARGIN), 1.0)
    return vectors.astype(np.float32)


def simulate_confidence(
    scene: SceneSpec, rig: Rig, truth: GroundTruth, progress: bool = False
) -> ConfidenceFieldSet:
    r"""Simulates the 2D recognizer of every camera at every frame.

    Each visible point leaves a blob of radius ``noise.bleed_radius`` at its
    exact projection. The high confidence goes to the true label, or with
    probability :math:`\rho` to a uniformly drawn wrong label. Spurious
    detections are added as a Poisson number of blobs per image; the rest
    of the image carries a low background vector.

    Parameters
    ----------
    scene : SceneSpec
        Scene specification.
    rig : Rig
        Camera rig.
    truth : GroundTruth
        Ground truth returned by the renderer.
    progress : bool, optional
        Show a progress bar over frames.

    Returns
    -------
    ConfidenceFieldSet
        One field per camera and frame.
    """
    noise = scene.noise
    n_classes = scene.n_classes
    n_bodies = int(truth.body_ids.max()) + 1
    width, height = scene.rig.image_width, scene.rig.image_height
    fields = {}
    for t in tqdm(range(len(truth.positions)), desc="confidence", disable=not progress):
        rng = stage_rng(scene.seed, "synth.confidence", t)
        pixels, _ = rig.project_all(truth.positions[t])
        for c in range(len(rig)):
            background = rng.beta(
                noise.background_alpha, noise.background_beta, n_classes
            ).astype(np.float32)
            points = np.flatnonzero(truth.visible[t, c])
            labels = truth.labels[points]
            if noise.confusion_mode == "instance":
                body_confused = rng.random(n_bodies) < noise.confusion_rate
                body_shift = rng.integers(1, max(n_classes, 2), n_bodies)
                confused = body_confused[truth.body_ids[points]]
                shift = body_shift[truth.body_ids[points]]
            else:
                confused = rng.random(len(points)) < noise.confusion_rate
                shift = rng.integers(1, max(n_classes, 2), len(points))
            if n_classes == 1:
                confused = np.zeros(len(points), dtype=bool)
            wrong = (labels - 1 + shift) % n_classes + 1
            vectors = confidence_vectors(
                labels, n_classes, confused, wrong, background, noise, rng
            )
            centers = pixels[c, points]
            radii = np.full(len(points), noise.bleed_radius, dtype=np.float32)

            n_false = rng.poisson(noise.false_detection_rate)
            if n_false:
                false_centers = rng.uniform(0.0, 1.0, (n_false, 2)) * [width, height]
                false_labels = rng.integers(1, n_classes + 1, n_false)
                false_vectors = confidence_vectors(
                    false_labels,
                    n_classes,
                    np.zeros(n_false, dtype=bool),
                    false_labels,
                    background,
                    noise,
                    rng,
                )
                centers = np.concatenate([centers, false_centers])
                radii = np.concatenate(
                    [
                        radii,
                        np.full(n_false, noise.false_detection_radius, np.float32),
                    ]
                )
                vectors = np.concatenate([vectors, false_vectors])
            fields[(t, c)] = ConfidenceField(
                camera_id=c,
                frame=t,
                centers=centers.astype(float),
                radii=radii,
                vectors=vectors,
                background=background,
            )
    logger.info("Simulated %d confidence fields", len(fields))
    return ConfidenceFieldSet(
        fields,
        n_frames=len(truth.positions),
        n_cameras=len(rig),
        n_classes=n_classes,
    )
