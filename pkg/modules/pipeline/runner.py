import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import networkx
import numpy as np
import scipy

import modules
from modules.affinity.graph import build_affinity
from modules.affinity.rigid import estimate_transforms
from modules.data.load.loaders import LOADERS
from modules.data.synthesis.confidence import simulate_confidence
from modules.data.synthesis.scene import (
    build_rig,
    export_ply,
    render_observations,
)
from modules.data.utils.utils import ensure_serializable, file_digest, make_hash
from modules.evaluation.harness import METRICS, EvaluationInputs, run_evaluation
from modules.geometry.camera import save_rig
from modules.inference.expansion import energy, infer
from modules.pipeline.config import (
    ExperimentConfig,
    camera_subset,
    config_hash,
    load_config,
    save_config,
)
from modules.reconstruction.tracking import build_stream
from modules.semantics.pooling import get_pooling
from modules.semantics.semantic_map import build_semantic_maps
from modules.utils.exceptions import PipelineError

logger = logging.getLogger(__name__)

STAGES = ("synth", "reconstruct", "semantics", "affinity", "infer", "eval")
UPSTREAM = {
    "synth": (),
    "reconstruct": ("synth",),
    "semantics": ("synth", "reconstruct"),
    "affinity": ("reconstruct",),
    "infer": ("semantics", "affinity"),
    "eval": ("synth", "reconstruct", "semantics", "affinity", "infer"),
}
# Debug exports are written for scenes up to this many points.
SMALL_SCENE = 2000


def stage_parameters(config: ExperimentConfig, stage: str) -> dict:
    r"""Configuration sections a stage's outputs depend on."""
    sections = {
        "synth": {"scene": config.scene},
        "reconstruct": {"tracker": config.tracker, "ransac": config.ransac},
        "semantics": {
            "pool": config.pool,
            "semantics": config.semantics,
            "seed": config.seed,
        },
        "affinity": {"affinity": config.affinity},
        "infer": {"energy": config.energy, "n_classes": config.scene.n_classes},
        "eval": {
            "evaluation": config.evaluation,
            "pool": config.pool,
            "energy": config.energy,
            "affinity": config.affinity,
        },
    }
    return ensure_serializable(sections[stage])


class StageCache:
    r"""Content-addressed directory of one stage's outputs.

    The directory is ``<run>/stages/<stage>/<key>`` where the key hashes
    the stage parameters and the digests of its inputs. A completed stage
    leaves ``outputs.json`` with the digest of every file it wrote.

    Parameters
    ----------
    run_dir : Path
        Run directory.
    stage : str
        Stage name.
    parameters : dict
        Serializable stage parameters.
    inputs : dict
        ``upstream file -> digest``.
    """

    def __init__(self, run_dir: Path, stage: str, parameters: dict, inputs: dict):
        self.stage = stage
        self.parameters = parameters
        self.inputs = dict(sorted(inputs.items()))
        self.key = make_hash({"parameters": parameters, "inputs": self.inputs})
        self.directory = Path(run_dir) / "stages" / stage / f"{self.key}"

    @property
    def outputs_path(self) -> Path:
        return self.directory / "outputs.json"

    def is_complete(self) -> bool:
        r"""Whether every recorded output exists with its digest."""
        if not self.outputs_path.exists():
            return False
        for name, digest in self.outputs().items():
            path = self.directory / name
            if not path.exists() or file_digest(path) != digest:
                logger.warning("Stale artifact %s, re-running %s", path, self.stage)
                return False
        return True

    def outputs(self) -> dict:
        with open(self.outputs_path) as f:
            return json.load(f)

    def prepare(self) -> None:
        r"""Creates an empty stage directory with its parameters file."""
        if self.directory.exists():
            shutil.rmtree(self.directory)
        self.directory.mkdir(parents=True)
        with open(self.directory / "parameters.json", "w") as f:
            json.dump(
                {"parameters": self.parameters, "inputs": self.inputs},
                f,
                indent=2,
                sort_keys=True,
            )

    def record_outputs(self) -> dict:
        r"""Digests every file of the directory into ``outputs.json``."""
        digests = {
            path.name: file_digest(path)
            for path in sorted(self.directory.iterdir())
            if path.is_file() and path.name != "outputs.json"
        }
        with open(self.outputs_path, "w") as f:
            json.dump(digests, f, indent=2, sort_keys=True)
        return digests


@dataclass
class StageRecord:
    r"""Manifest entry of one stage."""

    key: int
    directory: str
    status: str
    cached: bool = False
    seconds: float = 0.0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class RunManifest:
    r"""Record of a pipeline run.

    Parameters
    ----------
    config_hash : int
        Hash of the resolved configuration.
    versions : dict
        Package and interpreter versions.
    stages : dict
        ``stage -> StageRecord`` in execution order.
    failed_stage : str, optional
        Stage that halted the run.
    """

    config_hash: int
    versions: dict
    stages: dict = field(default_factory=dict)
    failed_stage: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return ensure_serializable(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as f:
            document = json.load(f)
        document["stages"] = {
            name: StageRecord(**record) for name, record in document["stages"].items()
        }
        return cls(**document)

    def verify(self, run_dir) -> list[str]:
        r"""Artifacts whose on-disk digest differs from the manifest."""
        mismatched = []
        for record in self.stages.values():
            for name, digest in record.outputs.items():
                path = Path(run_dir) / record.directory / name
                if not path.exists() or file_digest(path) != digest:
                    mismatched.append(str(path))
        return mismatched


def versions() -> dict:
    return {
        "semantic-trajectories": modules.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "networkx": networkx.__version__,
    }


def _write_summary(directory: Path, summary: dict) -> dict:
    summary = ensure_serializable(summary)
    with open(directory / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def run_synth(config, directory: Path, upstream: dict, progress: bool) -> dict:
    scene = config.scene
    rig = build_rig(scene)
    observations, truth = render_observations(scene, rig, progress=progress)
    fields = simulate_confidence(scene, rig, truth, progress=progress)
    save_rig(rig, directory / "rig.json")
    observations.save(directory / "observations.bin")
    truth.save(directory)
    fields.save(directory)
    if truth.n_points <= SMALL_SCENE:
        observations.to_csv(directory / "observations.csv")
        export_ply(directory / "truth.ply", truth.positions[0], truth.labels)
    return {
        "points": truth.n_points,
        "cameras": len(rig),
        "frames": scene.frames,
        "observations": len(observations),
    }


def run_reconstruct(config, directory: Path, upstream: dict, progress: bool) -> dict:
    scene = LOADERS["synth"](upstream["synth"]).load()
    trajectories, report = build_stream(
        scene.observations, scene.rig, config.tracker, config.ransac, progress
    )
    trajectories.save(directory / "trajectories.bin")
    if len(trajectories) <= SMALL_SCENE:
        trajectories.to_json(directory / "trajectories.json")
    return report.to_dict()


def run_semantics(config, directory: Path, upstream: dict, progress: bool) -> dict:
    scene = LOADERS["synth"](upstream["synth"]).load()
    trajectories = LOADERS["reconstruct"](upstream["reconstruct"]).load()
    cameras = camera_subset(config, config.semantics.n_cameras)
    maps = build_semantic_maps(
        trajectories,
        scene.fields,
        scene.rig,
        get_pooling(config.semantics.method, config.pool),
        camera_subset=cameras,
        progress=progress,
    )
    maps.save(directory)
    maps.to_csv(directory / "semantic_map.csv")
    return {
        "trajectories": len(maps),
        "invalid": int((~maps.valid).sum()),
        "cameras": None if cameras is None else cameras.tolist(),
    }


def run_affinity(config, directory: Path, upstream: dict, progress: bool) -> dict:
    trajectories = LOADERS["reconstruct"](upstream["reconstruct"]).load()
    params = config.affinity
    transforms = estimate_transforms(
        trajectories, params.eps, params.ransac, params.overlap_min, progress
    )
    graph = build_affinity(trajectories, params, transforms, progress)
    graph.save(directory / "affinity.bin")
    transforms.save(directory)
    if len(graph) <= 50 * SMALL_SCENE:
        graph.to_csv(directory / "affinity.csv")
    return {
        "edges": len(graph),
        "transform_coverage": transforms.coverage,
    }


def run_infer(config, directory: Path, upstream: dict, progress: bool) -> dict:
    maps = LOADERS["semantics"](upstream["semantics"]).load()
    graph, _ = LOADERS["affinity"](upstream["affinity"]).load()
    result = infer(maps, graph, config.energy, n_classes=config.scene.n_classes)
    np.save(
        directory / "labels.npy",
        np.vstack([result.argmax_labels, result.labeling.labels]).astype("<i8"),
    )
    result.to_frame(maps).to_csv(
        directory / "labeling.csv", index=False, float_format="%.9g"
    )
    result.trace_frame().to_csv(
        directory / "energy_trace.csv", index=False, float_format="%.17g"
    )
    return {
        "trajectories": len(result.labeling),
        "changed": int(result.changed.sum()),
        "initial_energy": energy(result.argmax_labels, maps, graph, config.energy),
        "final_energy": energy(result.labeling, maps, graph, config.energy),
    }


def evaluation_inputs(config, upstream: dict) -> EvaluationInputs:
    r"""Loads the artifacts the metrics need from the stage directories."""
    scene = LOADERS["synth"](upstream["synth"]).load()
    trajectories = LOADERS["reconstruct"](upstream["reconstruct"]).load()
    graph, transforms = LOADERS["affinity"](upstream["affinity"]).load()
    labels = LOADERS["infer"](upstream["infer"]).load()
    return EvaluationInputs(
        rig=scene.rig,
        truth=scene.truth,
        fields=scene.fields,
        trajectories=trajectories,
        transforms=transforms,
        graph=graph,
        argmax_labels=labels.argmax_labels,
        inferred_labels=labels.final_labels,
        pool=config.pool,
        energy=config.energy,
        affinity_tau=config.affinity.tau,
        overlap_min=config.affinity.overlap_min,
        error_mode=config.affinity.error_mode,
    )


def _headline(reports: dict) -> dict:
    summary = {"metrics": sorted(reports)}
    accuracy = reports.get("ground-truth-accuracy")
    if accuracy is not None:
        summary["accuracy"] = {
            method: accuracy.value("overall", method)
            for method in ("argmax", "inferred")
        }
    return summary


def run_eval(config, directory: Path, upstream: dict, progress: bool) -> dict:
    inputs = evaluation_inputs(config, upstream)
    return _headline(run_evaluation(inputs, config.evaluation, directory))


STAGE_FUNCTIONS = {
    "synth": run_synth,
    "reconstruct": run_reconstruct,
    "semantics": run_semantics,
    "affinity": run_affinity,
    "infer": run_infer,
    "eval": run_eval,
}


def run_pipeline(
    config: ExperimentConfig,
    until: str = "eval",
    progress: bool = False,
    force: bool = False,
) -> RunManifest:
    r"""Runs the pipeline stages up to ``until``.

    A stage is skipped when its directory already holds outputs for the
    same parameters and input digests. Every stage reads its inputs back
    from the upstream stage directories.

    Parameters
    ----------
    config : ExperimentConfig
        Validated configuration.
    until : str, optional
        Last stage to run.
    progress : bool, optional
        Show progress bars.
    force : bool, optional
        Re-run stages even when cached.

    Returns
    -------
    RunManifest
        The manifest, also written to ``<output_dir>/manifest.json``.

    Raises
    ------
    PipelineError
        When a stage fails; the manifest names the failing stage.
    """
    if until not in STAGES:
        raise ValueError(f"Unknown stage {until}, expected one of {STAGES}")
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    manifest = RunManifest(
        config_hash=config_hash(config), versions=versions()
    )
    manifest_path = run_dir / "manifest.json"
    digests, directories = {}, {}

    for stage in STAGES[: STAGES.index(until) + 1]:
        inputs = {
            f"{upstream}/{name}": digest
            for upstream in UPSTREAM[stage]
            for name, digest in digests[upstream].items()
        }
        cache = StageCache(run_dir, stage, stage_parameters(config, stage), inputs)
        record = StageRecord(
            key=cache.key,
            directory=os.path.relpath(cache.directory, run_dir),
            status="running",
            inputs=inputs,
        )
        manifest.stages[stage] = record
        start = time.perf_counter()
        if not force and cache.is_complete():
            record.cached = True
            logger.info("Stage %s: cached (%s)", stage, record.directory)
        else:
            logger.info("Stage %s: running", stage)
            cache.prepare()
            try:
                summary = STAGE_FUNCTIONS[stage](
                    config, cache.directory, directories, progress
                )
            except Exception as exc:
                record.status = "failed"
                record.error = f"{type(exc).__name__}: {exc}"
                record.seconds = time.perf_counter() - start
                manifest.failed_stage = stage
                manifest.save(manifest_path)
                logger.error("Stage %s failed: %s", stage, exc)
                raise PipelineError(stage, str(exc)) from exc
            _write_summary(cache.directory, summary)
            cache.record_outputs()
        with open(cache.directory / "summary.json") as f:
            record.summary = json.load(f)
        record.outputs = cache.outputs()
        record.status = "done"
        record.seconds = time.perf_counter() - start
        digests[stage] = record.outputs
        directories[stage] = cache.directory
        manifest.save(manifest_path)
    return manifest


def stage_directories(run_dir) -> dict[str, Path]:
    r"""Directories of the completed stages recorded in a run manifest."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"No manifest in {run_dir}")
    manifest = RunManifest.load(manifest_path)
    return {
        stage: run_dir / record.directory
        for stage, record in manifest.stages.items()
        if record.status == "done"
    }


def evaluate_run(run_dir, metrics=None, output_dir=None) -> dict:
    r"""Recomputes metric reports of a finished run.

    The run's resolved ``config.yaml`` and the stage directories named by
    its manifest are read back; nothing upstream is recomputed.

    Parameters
    ----------
    run_dir : str or Path
        Run directory.
    metrics : list of str, optional
        Metrics to compute; the configured ones by default.
    output_dir : str or Path, optional
        Report directory, ``<run_dir>/reports`` by default.

    Returns
    -------
    dict
        ``metric name -> MetricReport``.

    Raises
    ------
    ValueError
        For an unknown metric name.
    PipelineError
        When the run lacks a stage the metrics read.
    """
    unknown = [name for name in metrics or () if name not in METRICS]
    if unknown:
        raise ValueError(
            f"Unknown metric {unknown[0]}, expected one of {sorted(METRICS)}"
        )
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.yaml")
    try:
        directories = stage_directories(run_dir)
    except FileNotFoundError as exc:
        raise PipelineError("eval", str(exc)) from exc
    missing = [stage for stage in UPSTREAM["eval"] if stage not in directories]
    if missing:
        raise PipelineError("eval", f"run has no completed '{missing[0]}' stage")
    inputs = evaluation_inputs(config, directories)
    output_dir = Path(output_dir) if output_dir is not None else run_dir / "reports"
    return run_evaluation(inputs, config.evaluation, output_dir, metrics)
