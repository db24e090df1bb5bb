import logging
import os
from dataclasses import dataclass, field

import numpy as np
import omegaconf
import rootutils
from omegaconf import OmegaConf

from modules.affinity.graph import AffinityParams
from modules.data.synthesis.scene import SceneSpec
from modules.data.utils.utils import (
    derive_seed,
    ensure_serializable,
    make_hash,
    stage_rng,
)
from modules.evaluation.harness import EvaluationConfig
from modules.geometry.triangulation import RansacParams
from modules.inference.expansion import EnergyParams
from modules.reconstruction.tracking import TrackerParams
from modules.semantics.pooling import POOLINGS, PoolParams
from modules.utils.exceptions import ConfigError
from modules.utils.utils import load_scene_config

__all__ = [
    "OUTPUT_ENV",
    "ExperimentConfig",
    "SemanticsConfig",
    "camera_subset",
    "config_hash",
    "derive_seed",
    "load_config",
    "load_experiment_config",
    "save_config",
]

logger = logging.getLogger(__name__)

OUTPUT_ENV = "SEMTRAJ_OUT"


@dataclass
class SemanticsConfig:
    r"""Semantic map stage settings.

    Parameters
    ----------
    method : str
        Pooling method, a key of :data:`POOLINGS`.
    n_cameras : int
        Size of the seeded camera subset used for pooling; 0 uses every
        camera.
    """

    method: str = "view_pool"
    n_cameras: int = 0

    def __post_init__(self):
        if self.method not in POOLINGS:
            raise ValueError(
                f"Unknown pooling {self.method}, expected one of {sorted(POOLINGS)}"
            )
        if self.n_cameras < 0:
            raise ValueError("n_cameras must be non-negative")


@dataclass
class ExperimentConfig:
    r"""Complete configuration of a run.

    Parameters
    ----------
    seed : int
        Master seed; stage sections refer to it by interpolation.
    output_dir : str
        Run directory; overridden by the ``SEMTRAJ_OUT`` variable.
    scene : SceneSpec
        Synthetic scene.
    tracker : TrackerParams
        Tracking and termination rules.
    ransac : RansacParams
        Triangulation RANSAC.
    pool : PoolParams
        View pooling.
    semantics : SemanticsConfig
        Semantic map stage.
    affinity : AffinityParams
        Rigid-motion affinity.
    energy : EnergyParams
        Label inference.
    evaluation : EvaluationConfig
        Metrics.
    """

    seed: int = 0
    output_dir: str = "runs/default"
    scene: SceneSpec = field(default_factory=SceneSpec)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    pool: PoolParams = field(default_factory=PoolParams)
    semantics: SemanticsConfig = field(default_factory=SemanticsConfig)
    affinity: AffinityParams = field(default_factory=AffinityParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


# Sections whose seed follows the master seed unless set explicitly.
SEEDED_SECTIONS = ("scene", "ransac", "affinity", "evaluation")


def _schema() -> omegaconf.DictConfig:
    schema = OmegaConf.structured(ExperimentConfig)
    # Parameter records are frozen dataclasses; their nodes must accept files.
    for key in schema:
        if isinstance(schema[key], omegaconf.DictConfig):
            OmegaConf.set_readonly(schema[key], False)
    for section in SEEDED_SECTIONS:
        schema[section].seed = "${seed}"
    return schema


def load_config(path=None, overrides=None, scene=None) -> ExperimentConfig:
    r"""Loads and validates an experiment configuration.

    The file (YAML or JSON) and the dotted ``overrides`` are merged onto
    the structured schema, so unknown keys, wrong types and missing
    mandatory values are rejected. ``SEMTRAJ_OUT`` replaces the file's
    ``output_dir``; explicit overrides still win over it. A named scene of
    ``configs/scenes`` replaces the scene values of the file.

    Parameters
    ----------
    path : str or Path, optional
        Configuration file; defaults only when omitted.
    overrides : list of str, optional
        ``key=value`` overrides, e.g. ``["energy.lambda_=0"]``.
    scene : str, optional
        Name of a scene file under ``configs/scenes``.

    Returns
    -------
    ExperimentConfig
        The validated configuration.

    Raises
    ------
    ConfigError
        With the dotted key of the offending field when known.
    """
    try:
        layers = [_schema()]
        if path is not None:
            layers.append(OmegaConf.load(path))
        if scene is not None:
            layers.append(OmegaConf.create({"scene": load_scene_config(scene)}))
        if os.environ.get(OUTPUT_ENV):
            layers.append(OmegaConf.create({"output_dir": os.environ[OUTPUT_ENV]}))
        if overrides:
            layers.append(OmegaConf.from_dotlist(list(overrides)))
        config = OmegaConf.to_object(OmegaConf.merge(*layers))
    except omegaconf.errors.MissingMandatoryValue as exc:
        raise ConfigError(f"missing value for '{exc.full_key}'", key=exc.full_key) from exc
    except omegaconf.errors.OmegaConfBaseException as exc:
        key = getattr(exc, "full_key", None)
        message = getattr(exc, "msg", None) or str(exc).split("\n")[0]
        raise ConfigError(
            f"invalid value for '{key}': {message}" if key else message, key=key
        ) from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise ConfigError(
            f"configuration file not found: {exc.filename or path}"
        ) from exc
    return config


def load_experiment_config(name: str, overrides=None) -> ExperimentConfig:
    r"""Loads ``configs/experiments/<name>.yaml`` from the project root.

    Parameters
    ----------
    name : str
        Name of the experiment.
    overrides : list of str, optional
        ``key=value`` overrides.

    Returns
    -------
    ExperimentConfig
        The validated configuration.
    """
    root_folder = rootutils.find_root()
    return load_config(f"{root_folder}/configs/experiments/{name}.yaml", overrides)


def save_config(config: ExperimentConfig, path) -> None:
    r"""Writes the resolved configuration as YAML."""
    OmegaConf.save(OmegaConf.structured(config), path, resolve=True)


def config_hash(section) -> int:
    r"""Hash of a configuration section."""
    return make_hash(ensure_serializable(section))


def camera_subset(config: ExperimentConfig, n_cameras: int) -> np.ndarray | None:
    r"""Seeded camera subset of the semantic map stage; None for all."""
    total = sum(config.scene.rig.cameras_per_row)
    if n_cameras <= 0 or n_cameras >= total:
        return None
    rng = stage_rng(config.seed, "semantics.cameras", 0)
    return np.sort(rng.choice(total, n_cameras, replace=False))
