"""Test the metric reports and scores."""

import json

import numpy as np
import pytest

from modules.evaluation.metrics import (
    MetricReport,
    ground_truth_accuracy,
    normalized_correlation,
    plot_metric_report,
)


class TestNormalizedCorrelation:
    """Test normalized_correlation."""

    def test_values(self):
        assert np.isclose(normalized_correlation([0.2, 0.8], [0.2, 0.8]), 1.0)
        assert np.isclose(normalized_correlation([1.0, 0.0], [0.0, 1.0]), 0.0)
        assert np.isnan(normalized_correlation([0.0, 0.0], [0.5, 0.5]))

    def test_centered(self):
        a, b = [1.0, 2.0, 3.0], [2.0, 3.0, 4.0]
        assert normalized_correlation(a, b) < 1.0
        assert np.isclose(normalized_correlation(a, b, centered=True), 1.0), (
            "A shifted vector is perfectly correlated once centred."
        )


class TestMetricReport:
    """Test MetricReport."""

    def setup_method(self):
        self.report = MetricReport("test")
        self.report.add(0.5, "view_pool", [1.0, 0.0, np.nan, 1.0])
        self.report.add(1.0, "view_pool", [])

    def test_rows(self):
        assert np.isclose(self.report.value(0.5, "view_pool"), 2 / 3)
        assert self.report.rows[0]["n"] == 3, "NaN samples are ignored."
        assert self.report.rows[1]["n"] == 0, "Empty bins are reported with n = 0."
        assert np.isnan(self.report.value(1.0, "view_pool"))
        with pytest.raises(KeyError):
            self.report.value(0.5, "average_pool")

    def test_outputs(self, tmp_path):
        self.report.to_csv(tmp_path / "test.csv")
        lines = (tmp_path / "test.csv").read_text().splitlines()
        assert lines[0] == "condition,method,mean,std,n"
        assert len(lines) == 3
        self.report.to_json(tmp_path / "test.json")
        with open(tmp_path / "test.json") as f:
            document = json.load(f)
        assert document["name"] == "test"
        assert len(document["rows"]) == 2

    def test_plot(self, tmp_path):
        plot_metric_report(self.report, tmp_path / "test.png")
        assert (tmp_path / "test.png").exists()


class TestGroundTruthAccuracy:
    """Test ground_truth_accuracy."""

    def test_accuracy(self):
        truth = np.array([1, 2, 1, 1])
        report = ground_truth_accuracy(
            {"argmax": [1, 2, 2, 1], "inferred": [1, 2, 1, 1]}, truth, n_classes=2
        )
        assert np.isclose(report.value("overall", "argmax"), 0.75)
        assert np.isclose(report.value("overall", "inferred"), 1.0)
        assert np.isclose(report.value("class_1", "argmax"), 2 / 3)
        assert report.metadata["confusion"]["argmax"] == [[2, 1], [0, 1]]

    def test_empty(self):
        report = ground_truth_accuracy({"argmax": []}, np.zeros(0, int), n_classes=3)
        assert report.rows[0]["n"] == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ground_truth_accuracy({"argmax": [1, 2]}, np.array([1]), n_classes=2)
