import json
import logging
from dataclasses import asdict, dataclass

import networkx as nx
import numpy as np
import pandas as pd

from modules.affinity.rigid import (
    ERROR_MODES,
    RigidRansacParams,
    TransformField,
    directed_errors,
    estimate_transforms,
    neighbor_pairs,
)
from modules.data.utils.utils import stage_rng
from modules.reconstruction.trajectory import TrajectorySet

logger = logging.getLogger(__name__)

GRAPH_FORMAT_VERSION = 1
_TRIPLET = np.dtype([("i", "<u4"), ("j", "<u4"), ("w", "<f4")])


@dataclass(frozen=True)
class AffinityParams:
    r"""Rigid-motion affinity parameters.

    Parameters
    ----------
    tau : float
        Error scale of the affinity kernel in meters.
    eps : float
        Neighbourhood radius of the local transform estimation in meters.
    eps_a : float
        Radius within which pairs are scored, in meters.
    dropout : float
        Probability of removing each candidate edge.
    seed : int
        Master seed of the dropout and sampling streams.
    overlap_min : int
        Minimum shared lifetime of a neighbour pair, in frames.
    inlier_tol : float
        RANSAC inlier bound of the local transforms, in meters.
    max_neighbors : int
        Neighbours used per local transform.
    max_iter : int
        Triples sampled per local transform.
    error_mode : str
        ``"frame"`` or ``"emergence"`` prediction of the error.
    """

    tau: float = 0.02
    eps: float = 0.05
    eps_a: float = 0.30
    dropout: float = 0.5
    seed: int = 0
    overlap_min: int = 2
    inlier_tol: float = 0.01
    max_neighbors: int = 64
    max_iter: int = 200
    error_mode: str = "frame"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.eps <= 0 or self.eps_a <= 0:
            raise ValueError("eps and eps_a must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.overlap_min < 2:
            raise ValueError("overlap_min must be at least 2")
        if self.error_mode not in ERROR_MODES:
            raise ValueError(
                f"error_mode must be one of {ERROR_MODES}, got {self.error_mode}"
            )

    @property
    def ransac(self) -> RigidRansacParams:
        return RigidRansacParams(
            inlier_tol=self.inlier_tol,
            max_iter=self.max_iter,
            max_neighbors=self.max_neighbors,
            seed=self.seed,
        )


def affinity_weight(error) -> np.ndarray:
    r"""Unit-scale kernel :math:`\exp(-e^2)`; zero for infinite errors."""
    error = np.asarray(error, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        weight = np.exp(-(error**2))
    return np.where(np.isfinite(error), weight, 0.0)


class AffinityGraph:
    r"""Sparse symmetric affinity between trajectories.

    Each undirected edge is stored once with ``i < j``.

    Parameters
    ----------
    n_nodes : int
        Number of trajectories M.
    rows, cols : np.ndarray
        Edge endpoints.
    weights : np.ndarray
        Edge weights in (0, 1].
    params : dict, optional
        Parameters the graph was built with.
    """

    def __init__(self, n_nodes: int, rows, cols, weights, params=None):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        weights = np.asarray(weights, dtype=float)
        i, j = np.minimum(rows, cols), np.maximum(rows, cols)
        if np.any(i == j):
            raise ValueError("Affinity graphs have no self-edges")
        if np.any((weights <= 0) | (weights > 1)):
            raise ValueError("Edge weights must be in (0, 1]")
        if len(i) and (i.min() < 0 or j.max() >= n_nodes):
            raise ValueError("Edge endpoint outside the node range")
        order = np.lexsort((j, i))
        self.n_nodes = int(n_nodes)
        self.rows, self.cols, self.weights = i[order], j[order], weights[order]
        if len(self.rows) > 1:
            same = (np.diff(self.rows) == 0) & (np.diff(self.cols) == 0)
            if same.any():
                raise ValueError("Duplicate edge in affinity graph")
        self.params = dict(params or {})
        self._lookup = None

    def __len__(self) -> int:
        return len(self.weights)

    def __iter__(self):
        return zip(
            self.rows.tolist(), self.cols.tolist(), self.weights.tolist(), strict=True
        )

    def weight(self, i: int, j: int) -> float:
        r"""Weight of edge ``(i, j)``, zero when absent; symmetric."""
        if self._lookup is None:
            self._lookup = {(a, b): w for a, b, w in self}
        return self._lookup.get((min(i, j), max(i, j)), 0.0)

    def neighbors(self, i: int) -> np.ndarray:
        return np.sort(
            np.concatenate([self.cols[self.rows == i], self.rows[self.cols == i]])
        )

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph(**self.params)
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_weighted_edges_from(self)
        return graph

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"i": self.rows, "j": self.cols, "weight": self.weights})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    def save(self, path) -> None:
        r"""Writes ``(i u32, j u32, w f32)`` triplets plus a JSON header.

        The header is written to ``path + ".json"``.
        """
        triplets = np.empty(len(self), dtype=_TRIPLET)
        triplets["i"], triplets["j"], triplets["w"] = (
            self.rows,
            self.cols,
            self.weights,
        )
        triplets.tofile(path)
        header = {
            "format_version": GRAPH_FORMAT_VERSION,
            "n_nodes": self.n_nodes,
            "n_edges": len(self),
            "params": self.params,
        }
        with open(f"{path}.json", "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AffinityGraph":
        with open(f"{path}.json") as f:
            header = json.load(f)
        if header["format_version"] != GRAPH_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported affinity graph format {header['format_version']}"
            )
        triplets = np.fromfile(path, dtype=_TRIPLET)
        return cls(
            header["n_nodes"],
            triplets["i"],
            triplets["j"],
            triplets["w"].astype(float),
            params=header["params"],
        )


def build_affinity(
    trajectories: TrajectorySet,
    params: AffinityParams | None = None,
    transforms: TransformField | None = None,
    progress: bool = False,
) -> AffinityGraph:
    r"""Builds the rigid-motion affinity graph of a trajectory set.

    Every pair of :math:`\epsilon_a`-neighbours survives dropout with
    probability ``1 - dropout`` (one draw per pair, in sorted pair order).
    The surviving pairs are scored in both directions with
    :math:`\exp(-(e/\tau)^2)` and keep the larger of the two weights;
    pairs without any prediction get no edge.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    params : AffinityParams, optional
        Affinity parameters.
    transforms : TransformField, optional
        Precomputed local transforms; estimated when omitted.
    progress : bool, optional
        Show progress bars.

    Returns
    -------
    AffinityGraph
        The graph.
    """
    params = params or AffinityParams()
    if transforms is None:
        transforms = estimate_transforms(
            trajectories, params.eps, params.ransac, params.overlap_min, progress
        )
    pairs, _ = neighbor_pairs(trajectories, params.eps_a, params.overlap_min)
    rng = stage_rng(params.seed, "affinity.dropout", 0)
    kept = pairs[rng.random(len(pairs)) >= params.dropout]
    forward = directed_errors(
        trajectories, transforms, kept[:, 0], kept[:, 1], params.error_mode
    )
    backward = directed_errors(
        trajectories, transforms, kept[:, 1], kept[:, 0], params.error_mode
    )
    weights = np.maximum(
        affinity_weight(forward / params.tau), affinity_weight(backward / params.tau)
    )
    # Weights are stored as float32.
    edge = weights >= np.finfo(np.float32).tiny
    logger.info(
        "Affinity graph: %d candidate pairs, %d after dropout, %d edges",
        len(pairs),
        len(kept),
        int(edge.sum()),
    )
    return AffinityGraph(
        len(trajectories),
        kept[edge, 0],
        kept[edge, 1],
        weights[edge],
        params=asdict(params),
    )
