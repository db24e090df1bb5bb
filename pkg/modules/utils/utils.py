import logging
import pprint
import shutil

import matplotlib.pyplot as plt
import numpy as np
import omegaconf
import rootutils
from rich.logging import RichHandler

plt.rcParams["text.usetex"] = bool(shutil.which("latex"))

LOG_FORMAT = "%(message)s"

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    r"""Route the ``modules`` loggers through a rich handler.

    Parameters
    ----------
    verbose : bool
        Log debug messages.
    quiet : bool
        Log warnings and errors only; wins over ``verbose``.
    """
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=verbose)],
        force=True,
    )


def load_scene_config(scene_name: str) -> omegaconf.DictConfig:
    r"""Load a named scene configuration.

    Parameters
    ----------
    scene_name : str
        Name of the scene, a file of ``configs/scenes``.

    Returns
    -------
    omegaconf.DictConfig
        Scene configuration.
    """

    root_folder = rootutils.find_root()
    scene_config_path = f"{root_folder}/configs/scenes/{scene_name}.yaml"
    scene_config = omegaconf.OmegaConf.load(scene_config_path)

    logger.debug(
        "Scene configuration for %s:\n%s",
        scene_name,
        pprint.pformat(omegaconf.OmegaConf.to_container(scene_config)),
    )
    return scene_config


def describe_scene(scene) -> None:
    r"""Describe a synthesised scene.

    Parameters
    ----------
    scene : SceneArtifacts
        Rig, ground truth, observations and confidence fields.
    """
    truth = scene.truth
    n_frames, n_cameras, _ = truth.visible.shape
    print(
        f"\nScene with {truth.n_points} points on "
        f"{len(np.unique(truth.body_ids))} bodies, seen by {n_cameras} cameras "
        f"over {n_frames} frames."
    )
    labels, counts = np.unique(truth.labels, return_counts=True)
    for label, count in zip(labels, counts, strict=True):
        print(f" - Label {label}: {count} points.")
    views = truth.visible.sum(axis=1)
    print(f" - Mean number of views per point and frame: {views.mean():.2f}")
    print(f" - Observations: {len(scene.observations)}")
    print(f" - Confidence classes: {scene.fields.n_classes}")
    print("")


def describe_trajectories(trajectories) -> None:
    r"""Describe a reconstructed trajectory stream.

    Parameters
    ----------
    trajectories : TrajectorySet
        Trajectories.
    """
    n_traj = len(trajectories)
    print(f"\nStream with {n_traj} trajectories over {trajectories.n_frames} frames.")
    if n_traj == 0:
        print("")
        return
    lengths = trajectories.dissolve - trajectories.emerge + 1
    print(
        f" - Lifespan in frames: min {lengths.min()}, "
        f"median {int(np.median(lengths))}, max {lengths.max()}"
    )
    alive = trajectories.alive.sum(axis=1)
    print(f" - Alive per frame: min {alive.min()}, max {alive.max()}")
    sources = np.unique(trajectories.source_ids)
    print(f" - Distinct correspondence ids: {len(sources)}")
    print("")


def describe_affinity(graph) -> None:
    r"""Describe an affinity graph.

    Parameters
    ----------
    graph : AffinityGraph
        Affinity graph.
    """
    print(f"\nAffinity graph with {graph.n_nodes} nodes and {len(graph)} edges.")
    if len(graph):
        degree = np.bincount(
            np.concatenate([graph.rows, graph.cols]), minlength=graph.n_nodes
        )
        print(f" - There are {int((degree == 0).sum())} isolated nodes.")
        print(
            f" - Weights: min {graph.weights.min():.3g}, "
            f"mean {graph.weights.mean():.3g}, max {graph.weights.max():.3g}"
        )
    print("")


def plot_point_cloud(points, labels=None, title=None, ax=None):
    """Plot a 3D point cloud coloured by label.

    Parameters
    ----------
    points : np.ndarray
        Points (n, 3); NaN rows are skipped.
    labels : np.ndarray, optional
        Labels (n,).
    title : str, optional
        Title for the plot.
    ax : matplotlib.axes.Axes, optional
        3D axes to draw into.

    Returns
    -------
    matplotlib.axes.Axes
        The axes.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points should have shape (n, 3), found {points.shape}")
    keep = ~np.isnan(points).any(axis=1)
    if ax is None:
        fig = plt.figure(figsize=(8, 8))
        ax = fig.add_subplot(111, projection="3d")
    ax.scatter(
        points[keep, 0],
        points[keep, 1],
        points[keep, 2],
        c=None if labels is None else np.asarray(labels)[keep],
        cmap="tab10",
        s=4,
    )
    ax.set_title(title if title is not None else "Trajectories")
    return ax
