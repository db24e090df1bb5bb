import json
import logging
from dataclasses import dataclass, field

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix

from modules.data.utils.utils import ensure_serializable

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["condition", "method", "mean", "std", "n"]


@dataclass
class MetricReport:
    r"""Long-format metric table.

    Each row summarises the samples of one method under one condition
    (a lag, a distance bin, a camera count, ...).

    Parameters
    ----------
    name : str
        Metric name.
    rows : list of dict
        ``condition, method, mean, std, n`` records.
    metadata : dict
        Seed, scene hash, parameters and any extra result.
    """

    name: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, condition, method: str, samples) -> None:
        r"""Adds the summary of a sample set; NaN samples are ignored.

        Empty sample sets are kept as rows with ``n = 0``.
        """
        samples = np.asarray(samples, dtype=float).reshape(-1)
        samples = samples[~np.isnan(samples)]
        if len(samples) == 0:
            mean, std = float("nan"), float("nan")
        else:
            mean, std = float(samples.mean()), float(samples.std())
        self.rows.append(
            {
                "condition": condition,
                "method": method,
                "mean": mean,
                "std": std,
                "n": len(samples),
            }
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def series(self, method: str) -> pd.DataFrame:
        frame = self.to_frame()
        return frame[frame["method"] == method].reset_index(drop=True)

    def value(self, condition, method: str) -> float:
        for row in self.rows:
            if row["condition"] == condition and row["method"] == method:
                return row["mean"]
        raise KeyError(f"No row for condition {condition} and method {method}")

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.9g")

    def to_dict(self) -> dict:
        return ensure_serializable(
            {"name": self.name, "rows": self.rows, "metadata": self.metadata}
        )

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def normalized_correlation(a, b, centered: bool = False) -> float:
    r"""Normalised correlation of two confidence vectors.

    Parameters
    ----------
    a, b : array-like
        Vectors of equal length.
    centered : bool, optional
        Subtract each vector's mean first (Pearson correlation); the plain
        cosine otherwise.

    Returns
    -------
    float
        Value in [-1, 1]; NaN when either vector has zero norm.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if centered:
        a, b = a - a.mean(), b - b.mean()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return float("nan")
    return float(np.clip(a @ b / norm, -1.0, 1.0))


def ground_truth_accuracy(
    labelings: dict, truth_labels: np.ndarray, n_classes: int
) -> MetricReport:
    r"""Overall and per-class accuracy of labelings against the truth.

    Parameters
    ----------
    labelings : dict
        ``method name -> labels (M,)``, e.g. ``argmax`` and ``inferred``.
    truth_labels : np.ndarray
        True labels (M,).
    n_classes : int
        Number of classes N.

    Returns
    -------
    MetricReport
        Conditions ``overall`` and ``class_k``; confusion matrices (rows are
        true classes) under ``metadata["confusion"]``.
    """
    report = MetricReport("ground-truth-accuracy")
    truth_labels = np.asarray(truth_labels, dtype=int)
    classes = np.arange(1, n_classes + 1)
    confusion = {}
    for method, labels in labelings.items():
        labels = np.asarray(labels, dtype=int)
        if len(labels) != len(truth_labels):
            raise ValueError(
                f"{method}: {len(labels)} labels for {len(truth_labels)} trajectories"
            )
        correct = (labels == truth_labels).astype(float)
        report.add("overall", method, correct)
        for k in classes:
            report.add(f"class_{k}", method, correct[truth_labels == k])
        if len(labels):
            accuracy = accuracy_score(truth_labels, labels)
            logger.info("%s accuracy: %.4f", method, accuracy)
        confusion[method] = confusion_matrix(
            truth_labels, labels, labels=classes
        ).tolist()
    report.metadata["confusion"] = confusion
    return report


def plot_metric_report(report: MetricReport, path=None, ax=None):
    r"""Plots mean and standard deviation per condition, one line per method.

    Parameters
    ----------
    report : MetricReport
        Report to plot.
    path : str or Path, optional
        Image file to write.
    ax : matplotlib.axes.Axes, optional
        Axes to draw on; a new figure otherwise.

    Returns
    -------
    matplotlib.figure.Figure
        The figure.
    """
    frame = report.to_frame()
    if ax is None:
        fig, ax = plt.subplots(figsize=(6, 4))
    else:
        fig = ax.figure
    for method, rows in frame.groupby("method", sort=True):
        rows = rows[rows["n"] > 0]
        ax.errorbar(
            rows["condition"].astype(str),
            rows["mean"],
            yerr=rows["std"],
            marker="o",
            capsize=3,
            label=method,
        )
    ax.set_title(report.name)
    ax.set_xlabel("condition")
    ax.set_ylabel("mean")
    ax.legend()
    if path is not None:
        fig.savefig(path, bbox_inches="tight")
        plt.close(fig)
    return fig
