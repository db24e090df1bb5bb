import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import pandas as pd
from networkx.algorithms.flow import boykov_kolmogorov

from modules.affinity.graph import AffinityGraph
from modules.semantics.semantic_map import SemanticMapTable

logger = logging.getLogger(__name__)

SOURCE, SINK = "source", "sink"
# Relative energy drop a move must achieve to be accepted.
ENERGY_TOL = 1e-12


@dataclass(frozen=True)
class EnergyParams:
    r"""Label inference parameters.

    Parameters
    ----------
    lambda_ : float
        Weight of the smoothness term.
    max_sweeps : int
        Largest number of cycles over the labels.
    audit : bool
        Check the flow value against the cut capacity on every move.
    """

    lambda_: float = 1.0
    max_sweeps: int = 10
    audit: bool = False

    def __post_init__(self):
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError("lambda_ must be finite and non-negative")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")


@dataclass(eq=False)
class Labeling:
    r"""Label of every trajectory, 1-based."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.labels) and self.labels.min() < 1:
            raise ValueError("Labels are 1-based")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> int:
        return int(self.labels[index])


def _maps(semantic_maps) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(semantic_maps, SemanticMapTable):
        return semantic_maps.values, semantic_maps.labels
    values = np.asarray(semantic_maps, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    labels = np.argmax(values, axis=1) + 1 if len(values) else np.zeros(0, int)
    return values, labels


def _unary(values: np.ndarray, argmax: np.ndarray, labels: np.ndarray) -> np.ndarray:
    r""":math:`\phi`: zero at the argmax label, else the map's argmax entry."""
    penalty = values[np.arange(len(values)), argmax - 1]
    return np.where(labels == argmax, 0.0, penalty)


def energy(
    labeling: Labeling | np.ndarray,
    semantic_maps,
    graph: AffinityGraph,
    params: EnergyParams | None = None,
) -> float:
    r"""Energy of a labeling.

    .. math::
        C(U) = \sum_i \phi(l_i, U(i))
            + \lambda \sum_{(i, j)} A(i, j) [U(i) \neq U(j)]

    with :math:`\phi(l, u) = L_{3D}[l]` when :math:`u \neq l` and zero
    otherwise; every undirected edge is counted once.

    Parameters
    ----------
    labeling : Labeling or np.ndarray
        Labels (M,), 1-based.
    semantic_maps : SemanticMapTable or np.ndarray
        Semantic maps (M, N).
    graph : AffinityGraph
        Affinity graph over the same trajectories.
    params : EnergyParams, optional
        Smoothness weight.

    Returns
    -------
    float
        The energy.
    """
    params = params or EnergyParams()
    if isinstance(labeling, Labeling):
        labeling = labeling.labels
    labels = np.asarray(labeling, dtype=int)
    values, argmax = _maps(semantic_maps)
    data = _unary(values, argmax, labels).sum()
    if len(graph) == 0:
        return float(data)
    cut = labels[graph.rows] != labels[graph.cols]
    return float(data + params.lambda_ * graph.weights[cut].sum())


def _add(graph: nx.DiGraph, u, v, capacity: float) -> None:
    if capacity <= 0:
        return
    if graph.has_edge(u, v):
        graph[u][v]["capacity"] += capacity
    else:
        graph.add_edge(u, v, capacity=capacity)


def expansion_move(
    labels: np.ndarray,
    alpha: int,
    values: np.ndarray,
    argmax: np.ndarray,
    graph: AffinityGraph,
    params: EnergyParams,
) -> np.ndarray:
    r"""Best :math:`\alpha`-expansion of a labeling, by one minimum cut.

    Nodes on the source side keep their label; nodes on the sink side
    switch to :math:`\alpha`. Nodes without any capacity keep their label.

    Parameters
    ----------
    labels : np.ndarray
        Current labels (M,).
    alpha : int
        Expansion label.
    values, argmax : np.ndarray
        Semantic maps (M, N) and their argmax labels (M,).
    graph : AffinityGraph
        Affinity graph.
    params : EnergyParams
        Smoothness weight and audit flag.

    Returns
    -------
    np.ndarray
        Labels after the move.
    """
    n = len(labels)
    keep_cost = _unary(values, argmax, labels)
    switch_cost = _unary(values, argmax, np.full(n, alpha))

    weights = params.lambda_ * graph.weights
    rows, cols = graph.rows, graph.cols
    a = weights * (labels[rows] != labels[cols])
    b = weights * (labels[rows] != alpha)
    c = weights * (labels[cols] != alpha)
    # E = A + (C - A) x_i + (D - C) x_j + (B + C - A - D)(1 - x_i) x_j
    np.add.at(switch_cost, rows, c - a)
    np.add.at(switch_cost, cols, -c)
    pairwise = b + c - a

    flow = nx.DiGraph()
    flow.add_nodes_from([SOURCE, SINK])
    flow.add_nodes_from(range(n))
    diff = switch_cost - keep_cost
    for node in np.flatnonzero(diff > 0):
        _add(flow, SOURCE, int(node), float(diff[node]))
    for node in np.flatnonzero(diff < 0):
        _add(flow, int(node), SINK, float(-diff[node]))
    for i, j, capacity in zip(rows.tolist(), cols.tolist(), pairwise.tolist(), strict=True):
        _add(flow, i, j, capacity)

    cut_value, (_, sink_side) = nx.minimum_cut(
        flow, SOURCE, SINK, flow_func=boykov_kolmogorov
    )
    switch = np.zeros(n, dtype=bool)
    for node in sink_side:
        if node != SINK and flow.degree(node) > 0:
            switch[node] = True
    if params.audit:
        capacity = sum(
            data["capacity"]
            for u, v, data in flow.edges(data=True)
            if u not in sink_side and v in sink_side
        )
        if not np.isclose(capacity, cut_value, rtol=1e-9, atol=1e-12):
            raise RuntimeError(
                f"Flow value {cut_value} differs from cut capacity {capacity}"
            )
    return np.where(switch, alpha, labels)


@dataclass(eq=False)
class InferenceResult:
    r"""Labeling with its audit trail.

    Parameters
    ----------
    labeling : Labeling
        Final labels.
    argmax_labels : np.ndarray
        Initial argmax labels :math:`l_i`.
    energy_trace : list of tuple
        ``(sweep, alpha, energy)`` after every expansion move.
    """

    labeling: Labeling
    argmax_labels: np.ndarray
    energy_trace: list = field(default_factory=list)

    @property
    def changed(self) -> np.ndarray:
        return self.labeling.labels != self.argmax_labels

    @property
    def final_energy(self) -> float:
        return self.energy_trace[-1][2] if self.energy_trace else 0.0

    def to_frame(self, semantic_maps=None) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "trajectory_id": np.arange(len(self.labeling)),
                "argmax_label": self.argmax_labels,
                "final_label": self.labeling.labels,
                "changed": self.changed,
            }
        )
        if semantic_maps is not None:
            values, _ = _maps(semantic_maps)
            for k in range(values.shape[1]):
                frame[f"conf_{k + 1}"] = values[:, k]
        return frame

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.energy_trace, columns=["sweep", "alpha", "energy"])


def alpha_expansion(
    semantic_maps,
    graph: AffinityGraph,
    params: EnergyParams | None = None,
    init: Labeling | None = None,
    n_classes: int | None = None,
) -> tuple[Labeling, list]:
    r"""Minimises the labeling energy by cycles of expansion moves.

    Each move is accepted only when it lowers the energy; the cycles stop
    after a sweep without any accepted move or after ``max_sweeps``.

    Parameters
    ----------
    semantic_maps : SemanticMapTable or np.ndarray
        Semantic maps (M, N).
    graph : AffinityGraph
        Affinity graph.
    params : EnergyParams, optional
        Inference parameters.
    init : Labeling, optional
        Starting labels; the argmax labels by default.
    n_classes : int, optional
        Size of the label set; the width of the maps by default.

    Returns
    -------
    labeling : Labeling
        Final labels, with energy no higher than ``init``'s.
    trace : list of tuple
        ``(sweep, alpha, energy)`` after every move.
    """
    params = params or EnergyParams()
    values, argmax = _maps(semantic_maps)
    labels = argmax.copy() if init is None else init.labels.copy()
    n_classes = n_classes or values.shape[1]
    current = energy(labels, values, graph, params)
    trace = []
    if len(labels) == 0:
        return Labeling(labels), trace
    for sweep in range(params.max_sweeps):
        improved = False
        for alpha in range(1, n_classes + 1):
            proposal = expansion_move(labels, alpha, values, argmax, graph, params)
            candidate = energy(proposal, values, graph, params)
            if candidate < current - ENERGY_TOL * max(1.0, abs(current)):
                labels, current = proposal, candidate
                improved = True
            trace.append((sweep, alpha, current))
        logger.debug("Sweep %d: energy %.6g", sweep, current)
        if not improved:
            break
    return Labeling(labels), trace


def infer(
    semantic_maps,
    graph: AffinityGraph,
    params: EnergyParams | None = None,
    n_classes: int | None = None,
) -> InferenceResult:
    r"""Infers trajectory labels from the argmax initialisation.

    Parameters
    ----------
    semantic_maps : SemanticMapTable or np.ndarray
        Semantic maps (M, N).
    graph : AffinityGraph
        Affinity graph over the same trajectories.
    params : EnergyParams, optional
        Inference parameters.
    n_classes : int, optional
        Size of the label set.

    Returns
    -------
    InferenceResult
        Final labels, argmax labels and energy trace.
    """
    params = params or EnergyParams()
    values, argmax = _maps(semantic_maps)
    if graph.n_nodes != len(values):
        raise ValueError(
            f"Graph has {graph.n_nodes} nodes for {len(values)} semantic maps"
        )
    labeling, trace = alpha_expansion(values, graph, params, n_classes=n_classes)
    result = InferenceResult(labeling, argmax, trace)
    logger.info(
        "Inference changed %d of %d labels (energy %.6g)",
        int(result.changed.sum()),
        len(labeling),
        result.final_energy,
    )
    return result
