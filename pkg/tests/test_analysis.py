import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from esv.analysis import (
    ORDERS,
    EvalItem,
    ablate_by_rank,
    batch_quality,
    center_out_order,
    edges_in_order,
    lad_fit,
    lad_slope,
    pearson_r,
    planted_distractor_model,
    planted_distractor_sequence,
    relative_error,
    removal_order,
    uniform_order,
)
from esv.engine import exact_esv
from esv.errors import UndefinedMetricError, ValidationError
from esv.models import evaluate

from conftest import random_instance

finite = st.floats(-100, 100, allow_nan=False, width=64)


def lad_grid_oracle(x, y):
    """Best line through any two points (an LAD optimum always interpolates two)."""
    best = (np.inf, None)
    for i, j in itertools.combinations(range(len(x)), 2):
        if x[i] == x[j]:
            continue
        b = (y[j] - y[i]) / (x[j] - x[i])
        a = y[i] - b * x[i]
        obj = np.abs(y - a - b * x).sum()
        if obj < best[0]:
            best = (obj, b)
    return best


class TestMetrics:
    def test_relative_error_example(self):
        assert relative_error([1.1, -1.0], [1.0, -1.0]) == pytest.approx(0.05, abs=1e-12)

    def test_relative_error_zero_reference(self):
        with pytest.raises(UndefinedMetricError):
            relative_error([1.0, 2.0], [0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            relative_error([1.0], [1.0, 2.0])

    def test_pearson_example(self):
        assert pearson_r([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)

    def test_pearson_extremes(self):
        assert pearson_r([1, 2, 3], [2, 4, 6]) == 1.0
        assert pearson_r([1, 2, 3], [-1, -2, -3]) == -1.0

    def test_pearson_constant(self):
        with pytest.raises(UndefinedMetricError):
            pearson_r([1, 1, 1], [1, 2, 3])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=finite))
    def test_identity(self, phi):
        if np.ptp(phi) < 1e-6:
            return
        assert relative_error(phi, phi) == 0.0
        assert pearson_r(phi, phi) == pytest.approx(1.0, abs=1e-12)
        assert lad_slope(phi, phi) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=finite), st.floats(0.1, 10))
    def test_scaling(self, phi, k):
        if np.ptp(phi) < 1e-3:
            return
        assert lad_slope(k * phi, phi) == pytest.approx(k, rel=1e-9)
        assert pearson_r(k * phi, phi) == pytest.approx(1.0, abs=1e-12)

    def test_lad_identity_and_double(self):
        phi = np.linspace(-1, 1, 11)
        a, b = lad_fit(phi, phi)
        assert b == pytest.approx(1.0, abs=1e-12) and a == pytest.approx(0.0, abs=1e-12)
        assert lad_slope(2 * phi, phi) == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_lad_against_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=100)
        y = 0.7 * x + 0.2 + rng.normal(scale=0.05, size=100)
        y[rng.choice(100, 10, replace=False)] += rng.normal(scale=5, size=10)
        a, b = lad_fit(x, y)
        obj, b_ref = lad_grid_oracle(x, y)
        assert abs(b - b_ref) <= 0.01
        assert np.abs(y - a - b * x).sum() <= obj * (1 + 1e-9)

    def test_lad_resists_outliers(self):
        x = np.arange(20.0)
        y = 3 * x
        y[[2, 15]] += 100
        assert lad_fit(x, y)[1] == pytest.approx(3.0, abs=1e-9)

    def test_lad_degenerate(self):
        with pytest.raises(UndefinedMetricError):
            lad_fit([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])


class TestOrders:
    @pytest.mark.parametrize("order", ORDERS)
    @pytest.mark.parametrize("n", [1, 2, 5, 8, 13])
    def test_permutation(self, order, n):
        phi = np.random.default_rng(n).normal(size=n)
        assert sorted(removal_order(order, n, phi, seed=0)) == list(range(n))

    def test_center_out(self):
        assert [p + 1 for p in center_out_order(8)] == [4, 5, 3, 6, 2, 7, 1, 8]
        assert [p + 1 for p in center_out_order(5)] == [3, 4, 2, 5, 1]

    def test_edges_in(self):
        assert [p + 1 for p in edges_in_order(8)] == [1, 8, 2, 7, 3, 6, 4, 5]

    def test_uniform_keeps_spread(self):
        order = uniform_order(8)
        assert order[0] not in (0, 7)
        survivors = sorted(set(range(8)) - set(order[:4]))
        assert min(np.diff(survivors)) >= 2

    def test_random_seeded(self):
        assert removal_order("random", 10, seed=3) == removal_order("random", 10, seed=3)
        assert removal_order("random", 10, seed=3) != removal_order("random", 10, seed=4)
        with pytest.raises(ValidationError):
            removal_order("random", 10)

    def test_rank_orders_and_ties(self):
        phi = np.array([0.1, 0.5, 0.1, -0.2])
        assert removal_order("esv-descending", 4, phi) == [1, 0, 2, 3]
        assert removal_order("esv-ascending", 4, phi) == [3, 0, 2, 1]

    def test_unknown(self):
        with pytest.raises(ValidationError):
            removal_order("sideways", 4)


class TestAblation:
    @pytest.mark.parametrize("order", ORDERS)
    def test_curve_shape(self, order):
        model, X = random_instance("per-scale-mlp", 2, 6)
        res = exact_esv(model, X)
        curve = ablate_by_rank(model, X, res, 1, order, seed=0)
        assert [p[0] for p in curve.points] == [6, 5, 4, 3, 2, 1]
        assert curve.points[0][1] == float(evaluate(model, X, X.full())[1])

    def test_needs_result_for_rank_orders(self):
        model, X = random_instance("linear-additive", 0, 4)
        with pytest.raises(ValidationError):
            ablate_by_rank(model, X, None, 0, "esv-descending")

    def test_descending_removal_drops_score(self):
        model = planted_distractor_model()
        X, _ = planted_distractor_sequence(8, 2, rng=np.random.default_rng(0))
        res = exact_esv(model, X, [0])
        desc = ablate_by_rank(model, X, res, 0, "esv-descending")
        asc = ablate_by_rank(model, X, res, 0, "esv-ascending")
        assert desc.points[4][1] < asc.points[4][1]
        # removing the distractors first lifts the score
        assert asc.points[1][1] > asc.points[0][1]


class TestBatchQuality:
    def test_saturated_grid(self):
        items = [EvalItem(*random_instance("mean-pool-mlp", s, 6), 0, f"v{s}") for s in range(3)]
        grid = batch_quality(items, [20], [1], [0, 1])
        rep = grid[(20, 1)]
        assert rep.relative_error == pytest.approx(0.0, abs=1e-9)
        assert rep.lad_slope == pytest.approx(1.0, abs=1e-9)
        assert rep.pearson_r == pytest.approx(1.0, abs=1e-9)
        assert len(rep.per_video) == 6 and rep.gaps == 0

    def test_filter_can_empty(self):
        items = [EvalItem(*random_instance("linear-additive", 0, 4), 0)]
        assert batch_quality(items, [4], [1], [0], min_evidential=1e9) == {}
        assert batch_quality([], [4], [1], [0]) == {}

    def test_predicted_class(self):
        model, X = random_instance("pairwise-relational", 1, 5)
        grid = batch_quality([EvalItem(model, X, None)], [4, 8], [1, 2], [0])
        assert sorted(grid) == [(4, 1), (4, 2), (8, 1), (8, 2)]
