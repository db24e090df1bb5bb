import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modules.affinity.graph import AffinityGraph, affinity_weight
from modules.affinity.rigid import TransformField, directed_errors, neighbor_pairs
from modules.data.synthesis.confidence import ConfidenceFieldSet
from modules.data.synthesis.scene import GroundTruth
from modules.data.utils.utils import stage_rng
from modules.evaluation.metrics import (
    MetricReport,
    ground_truth_accuracy,
    normalized_correlation,
    plot_metric_report,
)
from modules.geometry.camera import Rig
from modules.inference.expansion import EnergyParams, infer
from modules.reconstruction.trajectory import TrajectorySet
from modules.semantics.pooling import PoolParams, get_pooling, pool_sequence
from modules.semantics.semantic_map import semantic_maps_from_pooled

logger = logging.getLogger(__name__)

POOLING_METHODS = ("view_pool", "average_pool")
AFFINITY_METHODS = ("rigid_affinity", "eps_neighbors")
# Affinity above which a pair is claimed to lie on one object.
CLAIM_THRESHOLD = 0.5


@dataclass
class EvaluationConfig:
    r"""Evaluation protocol settings.

    Parameters
    ----------
    metrics : list of str
        Metrics to compute, names from :data:`METRICS`.
    lags_s : list of float
        Temporal-consistency lags in seconds.
    distance_bins : list of float
        Edges of the affinity-effectiveness distance bins in meters.
    subset_sizes : list of int
        Camera counts of the predictive-validity sweep.
    trials : int
        Random camera subsets per size.
    methods : list of str
        Pooling methods compared.
    centered : bool
        Use the mean-subtracted normalised correlation.
    max_pairs_per_bin : int
        Pairs sampled per distance bin.
    plots : bool
        Write a PNG next to every report.
    seed : int
        Master seed of the evaluation streams.
    """

    metrics: list[str] = field(
        default_factory=lambda: [
            "temporal-consistency",
            "affinity-effectiveness",
            "predictive-validity",
            "ground-truth-accuracy",
        ]
    )
    lags_s: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    distance_bins: list[float] = field(
        default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    )
    subset_sizes: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 40])
    trials: int = 3
    methods: list[str] = field(default_factory=lambda: list(POOLING_METHODS))
    centered: bool = False
    max_pairs_per_bin: int = 5000
    plots: bool = False
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(
                f"Unknown metrics {sorted(unknown)}, expected names from "
                f"{sorted(METRICS)}"
            )
        if any(b <= a for a, b in zip(self.distance_bins, self.distance_bins[1:])):
            raise ValueError("distance_bins must be increasing")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")


@dataclass
class EvaluationInputs:
    r"""Artifacts of a run needed by the metrics."""

    rig: Rig
    truth: GroundTruth
    fields: ConfidenceFieldSet
    trajectories: TrajectorySet
    transforms: TransformField
    graph: AffinityGraph
    argmax_labels: np.ndarray
    inferred_labels: np.ndarray
    pool: PoolParams = field(default_factory=PoolParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    affinity_tau: float = 0.02
    overlap_min: int = 2
    error_mode: str = "frame"

    @property
    def truth_labels(self) -> np.ndarray:
        return self.truth.labels[self.trajectories.source_ids]

    @property
    def truth_bodies(self) -> np.ndarray:
        return self.truth.body_ids[self.trajectories.source_ids]


def temporal_consistency(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    lags_s,
    methods=POOLING_METHODS,
    params: PoolParams | None = None,
    centered: bool = False,
) -> MetricReport:
    r"""Correlation of pooled vectors with the one pooled at emergence.

    For every trajectory and lag, the normalised correlation between the
    pooled vector at the emergence frame and the one ``lag`` later.
    Trajectories shorter than a lag, or without a view at either frame,
    are left out of that lag.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    fields : ConfidenceFieldSet
        Confidence fields.
    rig : Rig
        Camera rig, whose frame rate converts the lags.
    lags_s : list of float
        Lags in seconds.
    methods : tuple of str, optional
        Pooling methods.
    params : PoolParams, optional
        Pooling parameters.
    centered : bool, optional
        Mean-subtracted correlation.

    Returns
    -------
    MetricReport
        One row per lag and method; the condition is the lag in seconds.
    """
    report = MetricReport(
        "temporal-consistency",
        metadata={"frame_rate": rig.frame_rate, "centered": centered},
    )
    emerge = trajectories.emerge
    for method in methods:
        pooled, _ = pool_sequence(
            trajectories, fields, rig, get_pooling(method, params)
        )
        reference = pooled[emerge, np.arange(len(trajectories))]
        for lag_s in lags_s:
            lag = int(round(lag_s * rig.frame_rate))
            frames = emerge + lag
            samples = [
                normalized_correlation(reference[i], pooled[t, i], centered)
                for i, t in enumerate(frames)
                if t <= trajectories.dissolve[i]
            ]
            report.add(float(lag_s), method, samples)
    return report


def affinity_effectiveness(
    trajectories: TrajectorySet,
    transforms: TransformField,
    truth_bodies: np.ndarray,
    distance_bins,
    tau: float = 0.02,
    overlap_min: int = 2,
    error_mode: str = "frame",
    proxy_labels: np.ndarray | None = None,
    max_pairs_per_bin: int = 5000,
    seed: int = 0,
) -> MetricReport:
    r"""Rate of wrongly claimed same-object pairs per distance bin.

    Pairs are binned by their largest distance over the shared lifetime.
    ``rigid_affinity`` claims a pair when its affinity exceeds 0.5;
    ``eps_neighbors`` claims every pair closer than the bin's upper edge.
    A claim is a mismatch when the two trajectories belong to different
    bodies; with ``proxy_labels`` it is also scored by label disagreement
    (methods suffixed ``/proxy``).

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    transforms : TransformField
        Local transforms.
    truth_bodies : np.ndarray
        Body of every trajectory (M,).
    distance_bins : list of float
        Bin edges in meters.
    tau : float, optional
        Affinity error scale.
    overlap_min : int, optional
        Minimum shared lifetime.
    error_mode : str, optional
        Prediction mode of the error.
    proxy_labels : np.ndarray, optional
        Per-trajectory labels of the projection-based proxy.
    max_pairs_per_bin : int, optional
        Pairs sampled per bin.
    seed : int, optional
        Master seed of the sampling.

    Returns
    -------
    MetricReport
        One row per bin and method; the condition is the bin's upper edge.
    """
    bins = np.asarray(distance_bins, dtype=float)
    report = MetricReport(
        "affinity-effectiveness", metadata={"bins": bins.tolist(), "tau": tau}
    )
    pairs, worst = neighbor_pairs(trajectories, float(bins[-1]), overlap_min)
    which = np.digitize(worst, bins) - 1
    rng = stage_rng(seed, "eval.affinity", 0)
    for b in range(len(bins) - 1):
        members = np.flatnonzero(which == b)
        if len(members) > max_pairs_per_bin:
            members = np.sort(rng.choice(members, max_pairs_per_bin, replace=False))
        i, j = pairs[members, 0], pairs[members, 1]
        errors = np.minimum(
            directed_errors(trajectories, transforms, i, j, error_mode),
            directed_errors(trajectories, transforms, j, i, error_mode),
        )
        claimed = {
            "rigid_affinity": affinity_weight(errors / tau) > CLAIM_THRESHOLD,
            "eps_neighbors": np.ones(len(members), dtype=bool),
        }
        mismatch = truth_bodies[i] != truth_bodies[j]
        condition = float(bins[b + 1])
        for method in AFFINITY_METHODS:
            report.add(condition, method, mismatch[claimed[method]])
        if proxy_labels is not None:
            disagree = proxy_labels[i] != proxy_labels[j]
            for method in AFFINITY_METHODS:
                report.add(condition, f"{method}/proxy", disagree[claimed[method]])
    return report


def held_out_agreement(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    labels: np.ndarray,
    camera: int,
    eps_v: float,
) -> np.ndarray:
    r"""Agreement of labels with a held-out camera's recognition.

    At every frame where the camera sees a trajectory (visibility above
    ``eps_v``), the camera's argmax class at the projection is compared
    with the trajectory's label.

    Returns
    -------
    np.ndarray
        One 0/1 sample per visible trajectory frame.
    """
    samples = []
    for t in range(trajectories.n_frames):
        alive = trajectories.alive_at(t)
        if len(alive) == 0:
            continue
        seen = np.array(
            [trajectories[i].visibility_at(t)[camera] > eps_v for i in alive]
        )
        ids = alive[seen]
        if len(ids) == 0:
            continue
        pixels = rig[camera].projection_matrix
        homogeneous = trajectories.positions[t, ids] @ pixels[:, :3].T + pixels[:, 3]
        uv = homogeneous[:, :2] / homogeneous[:, 2:3]
        recognised = np.argmax(fields.query(t, camera, uv), axis=1) + 1
        samples.append((recognised == labels[ids]).astype(float))
    return np.concatenate(samples) if samples else np.zeros(0)


def predictive_validity(
    trajectories: TrajectorySet,
    fields: ConfidenceFieldSet,
    rig: Rig,
    graph: AffinityGraph,
    subset_sizes,
    trials: int = 3,
    methods=POOLING_METHODS,
    params: PoolParams | None = None,
    energy: EnergyParams | None = None,
    seed: int = 0,
) -> MetricReport:
    r"""Agreement of labels inferred from a camera subset with a held-out view.

    Every trial draws a held-out camera and, for each size, a subset of
    the other cameras; semantic maps are built from the subset only and
    labels inferred on the affinity graph, then scored with
    :func:`held_out_agreement`.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    fields : ConfidenceFieldSet
        Confidence fields.
    rig : Rig
        Camera rig.
    graph : AffinityGraph
        Affinity graph.
    subset_sizes : list of int
        Camera counts; sizes not below the rig size are skipped.
    trials : int, optional
        Trials per size.
    methods : tuple of str, optional
        Pooling methods.
    params : PoolParams, optional
        Pooling parameters.
    energy : EnergyParams, optional
        Inference parameters.
    seed : int, optional
        Master seed of the camera draws.

    Returns
    -------
    MetricReport
        One row per size and method; samples are per-trial accuracies.
    """
    params = params or PoolParams()
    report = MetricReport("predictive-validity", metadata={"trials": trials})
    sizes = [int(k) for k in subset_sizes if 0 < int(k) < len(rig)]
    skipped = sorted(set(int(k) for k in subset_sizes) - set(sizes))
    if skipped:
        logger.warning("Skipping camera subset sizes %s", skipped)
    results = {(k, m): [] for k in sizes for m in methods}
    for trial in range(trials):
        rng = stage_rng(seed, "eval.predictive", trial)
        held_out = int(rng.integers(len(rig)))
        others = np.delete(np.arange(len(rig)), held_out)
        for k in sizes:
            subset = np.sort(rng.choice(others, k, replace=False))
            for method in methods:
                pooled, _ = pool_sequence(
                    trajectories, fields, rig, get_pooling(method, params), subset
                )
                maps = semantic_maps_from_pooled(pooled)
                labels = infer(maps, graph, energy, fields.n_classes).labeling.labels
                agreement = held_out_agreement(
                    trajectories, fields, rig, labels, held_out, params.eps_v
                )
                if len(agreement):
                    results[(k, method)].append(agreement.mean())
    for k in sizes:
        for method in methods:
            report.add(k, method, results[(k, method)])
    return report


def _temporal(inputs: EvaluationInputs, config: EvaluationConfig) -> MetricReport:
    return temporal_consistency(
        inputs.trajectories,
        inputs.fields,
        inputs.rig,
        config.lags_s,
        config.methods,
        inputs.pool,
        config.centered,
    )


def _effectiveness(inputs: EvaluationInputs, config: EvaluationConfig) -> MetricReport:
    return affinity_effectiveness(
        inputs.trajectories,
        inputs.transforms,
        inputs.truth_bodies,
        config.distance_bins,
        tau=inputs.affinity_tau,
        overlap_min=inputs.overlap_min,
        error_mode=inputs.error_mode,
        proxy_labels=inputs.argmax_labels,
        max_pairs_per_bin=config.max_pairs_per_bin,
        seed=config.seed,
    )


def _predictive(inputs: EvaluationInputs, config: EvaluationConfig) -> MetricReport:
    return predictive_validity(
        inputs.trajectories,
        inputs.fields,
        inputs.rig,
        inputs.graph,
        config.subset_sizes,
        config.trials,
        config.methods,
        inputs.pool,
        inputs.energy,
        config.seed,
    )


def _accuracy(inputs: EvaluationInputs, config: EvaluationConfig) -> MetricReport:
    return ground_truth_accuracy(
        {"argmax": inputs.argmax_labels, "inferred": inputs.inferred_labels},
        inputs.truth_labels,
        inputs.fields.n_classes,
    )


METRICS = {
    "temporal-consistency": _temporal,
    "affinity-effectiveness": _effectiveness,
    "predictive-validity": _predictive,
    "ground-truth-accuracy": _accuracy,
}


def run_evaluation(
    inputs: EvaluationInputs,
    config: EvaluationConfig,
    output_dir=None,
    metrics=None,
) -> dict[str, MetricReport]:
    r"""Computes the configured metrics and writes their reports.

    Every report is written as ``<name>.csv`` (long format) and
    ``<name>.json``; ``metrics.json`` gathers all of them.

    Parameters
    ----------
    inputs : EvaluationInputs
        Run artifacts.
    config : EvaluationConfig
        Protocol settings.
    output_dir : str or Path, optional
        Directory of the reports; nothing is written when omitted.
    metrics : list of str, optional
        Subset of metrics; ``config.metrics`` by default.

    Returns
    -------
    dict
        ``metric name -> MetricReport``.
    """
    names = list(metrics or config.metrics)
    unknown = [name for name in names if name not in METRICS]
    if unknown:
        raise ValueError(
            f"Unknown metric {unknown[0]}, expected one of {sorted(METRICS)}"
        )
    reports = {}
    for name in names:
        logger.info("Computing %s", name)
        report = METRICS[name](inputs, config)
        report.metadata.setdefault("seed", config.seed)
        reports[name] = report
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        for name, report in reports.items():
            report.to_csv(output_dir / f"{name}.csv")
            report.to_json(output_dir / f"{name}.json")
            if config.plots:
                plot_metric_report(report, output_dir / f"{name}.png")
        with open(output_dir / "metrics.json", "w") as f:
            json.dump(
                {name: report.to_dict() for name, report in reports.items()},
                f,
                indent=2,
                sort_keys=True,
            )
    return reports
