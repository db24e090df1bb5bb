"""Test the view pooling strategies."""

import numpy as np
import pytest

from modules.semantics.pooling import (
    AveragePooling,
    PoolParams,
    ViewPooling,
    get_pooling,
    pooling_costs,
    view_pool,
)
from modules.utils.exceptions import NoViewError


def brute_force_choice(vectors, visibility, eps_v):
    best, best_cost = None, np.inf
    for c in range(len(vectors)):
        if visibility[c] <= eps_v:
            continue
        cost = sum(
            visibility[j] * np.sum((vectors[c] - vectors[j]) ** 2)
            for j in range(len(vectors))
        )
        if cost < best_cost:
            best, best_cost = c, cost
    return best


class TestViewPool:
    """Test view_pool and ViewPooling."""

    def test_most_agreeable_view(self):
        confidences = [
            (0, [0.9, 0.1], 1.0),
            (1, [0.8, 0.2], 1.0),
            (2, [0.1, 0.9], 1.0),
        ]
        vector, camera = view_pool(confidences)
        assert np.allclose(vector, [0.8, 0.2]), (
            "The view closest to all the others should be selected."
        )
        assert camera == 1

    def test_ties_go_to_lowest_camera(self):
        confidences = [(5, [0.4, 0.6], 1.0), (2, [0.4, 0.6], 1.0)]
        _, camera = view_pool(confidences)
        assert camera == 2

    def test_single_view(self):
        vector, camera = view_pool([(3, [0.2, 0.5, 0.3], 0.9)])
        assert camera == 3 and np.allclose(vector, [0.2, 0.5, 0.3])

    def test_brute_force(self):
        rng = np.random.default_rng(11)
        pooling = ViewPooling(PoolParams(eps_v=0.3))
        for _ in range(50):
            k = rng.integers(1, 7)
            vectors = rng.uniform(0.0, 1.0, size=(k, 4))
            visibility = rng.uniform(0.0, 1.0, size=k)
            expected = brute_force_choice(vectors, visibility, 0.3)
            pooled, chosen = pooling.pool_batch(vectors[None], visibility[None])
            if expected is None:
                assert chosen[0] == -1 and np.isnan(pooled[0]).all()
            else:
                assert chosen[0] == expected
                assert np.allclose(pooled[0], vectors[expected])

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        pooling = ViewPooling()
        vectors = rng.uniform(0.0, 1.0, size=(1, 6, 3))
        visibility = rng.uniform(0.4, 0.5, size=(1, 6))
        _, chosen = pooling.pool_batch(vectors, visibility)
        _, scaled = pooling.pool_batch(vectors, 2 * visibility)
        assert chosen[0] == scaled[0], (
            "Scaling every visibility should not change the selection."
        )

    def test_no_view(self):
        with pytest.raises(NoViewError):
            view_pool([])
        with pytest.raises(NoViewError):
            view_pool([(0, [0.5, 0.5], 0.3), (1, [0.1, 0.9], 0.2)])

    def test_invisible_views_still_weigh(self):
        costs = pooling_costs(
            np.array([[[1.0, 0.0], [0.0, 1.0]]]), np.array([[1.0, 0.0]])
        )
        assert np.allclose(costs, [[0.0, 2.0]])

    def test_params(self):
        with pytest.raises(ValueError):
            PoolParams(eps_v=0.0)
        with pytest.raises(ValueError):
            PoolParams(min_candidates=0)


class TestAveragePooling:
    """Test AveragePooling."""

    def test_weighted_mean(self):
        pooling = get_pooling("average_pool")
        assert isinstance(pooling, AveragePooling)
        vector, camera = pooling.pool([(0, [1.0, 0.0], 0.75), (1, [0.0, 1.0], 0.25)])
        assert np.allclose(vector, [0.75, 0.25])
        assert camera is None, "Averaging selects no single camera."

    def test_unknown_pooling(self):
        with pytest.raises(ValueError):
            get_pooling("max_pool")
