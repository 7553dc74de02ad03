from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esv.analysis import relative_error
from esv.engine import (
    DISTRACTING,
    SUPPORTING,
    AttributionResult,
    SamplePool,
    approx_esv,
    candidate_pool,
    class_combination,
    classify_elements,
    compensated_sum,
    contrastive_esv,
    exact_esv,
    grow_candidates,
    sampled_fraction,
    singletons,
)
from esv.errors import CapacityError, ValidationError
from esv.models import CallableScorer, LinearAdditive, MultiScaleModel, evaluate, load_model, random_model_spec
from esv.sequence import FeatureSequence, brute_force_esv

from conftest import random_instance

ALL_KINDS = ["linear-additive", "mean-pool-mlp", "pairwise-relational", "per-scale-mlp"]


def constant_model(k=(0.25, -0.5)):
    return CallableScorer(lambda rows: np.asarray(k), len(k), 2, k)


class TestExact:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, kind, seed):
        n = 2 + seed
        model, X = random_instance(kind, seed, n)
        res = exact_esv(model, X)
        for k, c in enumerate(res.classes):
            np.testing.assert_allclose(res.phi[:, k], brute_force_esv(model, X, c), atol=1e-9)

    def test_additive_values(self):
        model = LinearAdditive(np.array([[0.1], [0.2], [0.3]]), [0.0])
        res = exact_esv(model, FeatureSequence(np.eye(3)))
        np.testing.assert_allclose(res.phi[:, 0], [0.1, 0.2, 0.3], atol=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_single_element(self, kind):
        model, X = random_instance(kind, 3, 1)
        res = exact_esv(model, X)
        np.testing.assert_allclose(res.phi[0], evaluate(model, X, X.full()) - model.empty_prior, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(ALL_KINDS), st.integers(0, 10_000), st.integers(1, 10))
    def test_efficiency(self, kind, seed, n):
        model, X = random_instance(kind, seed, n)
        res = exact_esv(model, X)
        np.testing.assert_allclose(res.phi.sum(axis=0), res.evidential, atol=1e-9)

    def test_efficiency_normalized(self):
        spec = random_model_spec("per-scale-mlp", 4, 3, n_max=3, seed=1, normalize=True)
        model = load_model(spec)
        X = FeatureSequence(np.random.default_rng(0).normal(size=(7, 3)))
        res = exact_esv(model, X)
        np.testing.assert_allclose(res.phi.sum(axis=0), res.evidential, atol=1e-9)
        np.testing.assert_allclose(res.phi[:, 2], brute_force_esv(model, X, 2), atol=1e-9)

    def test_duplicate_elements_get_equal_values(self):
        model, X = random_instance("mean-pool-mlp", 8, 6)
        rows = np.array(X.elements)
        rows[4] = rows[0]
        res = exact_esv(model, FeatureSequence(rows))
        np.testing.assert_allclose(res.phi[0], res.phi[4], atol=1e-9)

    def test_class_subset_and_range(self):
        model, X = random_instance("mean-pool-mlp", 0, 4)
        full = exact_esv(model, X)
        part = exact_esv(model, X, [2])
        np.testing.assert_array_equal(part.phi[:, 0], full.phi[:, 2])
        with pytest.raises(ValidationError):
            exact_esv(model, X, [3])

    def test_capacity(self):
        model, X = random_instance("linear-additive", 0, 6)
        with pytest.raises(CapacityError):
            exact_esv(model, X, limit=5)

    @pytest.mark.parametrize("n,n_max", [(8, 4), (10, 8)])
    def test_call_count(self, n, n_max):
        model, X = random_instance("per-scale-mlp", 1, n, n_max=n_max)
        res = exact_esv(model, X)
        assert res.model_calls == sum(comb(n, s) for s in range(1, n_max + 1))

    def test_reproducible(self):
        model, X = random_instance("pairwise-relational", 5, 9)
        assert exact_esv(model, X).phi.tobytes() == exact_esv(model, X).phi.tobytes()


class TestCandidates:
    def test_pairs_from_singletons(self):
        pool = singletons(3, 10, np.random.default_rng(0))
        grown = grow_candidates(pool)
        assert sorted(int(m) for m in grown.masks) == [0b011, 0b101, 0b110]

    def test_cap_not_binding(self):
        rng = np.random.default_rng(0)
        pool = SamplePool(np.array([0b0011, 0b1100], dtype=np.int64), 2, 4, 100, rng)
        grown = grow_candidates(pool)
        np.testing.assert_array_equal(grown.masks, candidate_pool(pool.masks, 4))
        assert sorted(int(m) for m in grown.masks) == [0b0111, 0b1011, 0b1101, 0b1110]

    def test_cap_binding_draws_distinct_subset(self):
        rng = np.random.default_rng(3)
        pool = singletons(10, 7, rng)
        grown = grow_candidates(pool)
        all_pairs = set(candidate_pool(pool.masks, 10).tolist())
        got = grown.masks.tolist()
        assert len(got) == 7 == len(set(got)) and set(got) <= all_pairs

    def test_seeded_pools_repeat(self):
        def run(seed):
            pool = singletons(9, 5, np.random.default_rng(seed))
            out = []
            while pool.scale < 9:
                pool = grow_candidates(pool)
                out.append(pool.masks.tolist())
            return out

        assert run(11) == run(11)
        assert run(11) != run(12)

    def test_wide_sequence_masks(self):
        pool = singletons(70, 3, np.random.default_rng(0))
        grown = grow_candidates(pool)
        assert len(grown) == 3 and all(bin(int(m)).count("1") == 2 for m in grown.masks)


class TestApprox:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_saturated_pool_is_exact(self, kind):
        model, X = random_instance(kind, 2, 8)
        ex = exact_esv(model, X)
        ap = approx_esv(model, X, m=comb(8, 4), iterations=1, seed=0)
        np.testing.assert_allclose(ap.phi, ex.phi, atol=1e-9)
        np.testing.assert_allclose(ap.evidential, ex.evidential, atol=1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_constant_model_zero(self, seed):
        X = FeatureSequence(np.random.default_rng(seed).normal(size=(9, 2)))
        res = approx_esv(constant_model(), X, m=3, iterations=2, seed=seed)
        np.testing.assert_allclose(res.phi, 0.0, atol=1e-12)

    def test_seed_required(self):
        model, X = random_instance("linear-additive", 0, 4)
        with pytest.raises(ValidationError, match="seed"):
            approx_esv(model, X, m=4, iterations=1)

    @pytest.mark.parametrize("m,it", [(0, 1), (4, 0)])
    def test_invalid_budget(self, m, it):
        model, X = random_instance("linear-additive", 0, 4)
        with pytest.raises(ValidationError):
            approx_esv(model, X, m=m, iterations=it, seed=0)

    def test_deterministic(self):
        model, X = random_instance("per-scale-mlp", 3, 12, n_max=5)
        a = approx_esv(model, X, m=20, iterations=3, seed=42)
        b = approx_esv(model, X, m=20, iterations=3, seed=42)
        assert a.phi.tobytes() == b.phi.tobytes()
        c = approx_esv(model, X, m=20, iterations=3, seed=43)
        assert a.phi.tobytes() != c.phi.tobytes()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("m,it", [(1, 1), (5, 3), (40, 2)])
    def test_call_budget(self, kind, m, it):
        n = 11
        model, X = random_instance(kind, 4, n)
        res = approx_esv(model, X, m=m, iterations=it, seed=0)
        assert res.model_calls <= m * it * n + n

    def test_strict_variant_only_differs_above_n_max(self):
        model, X = random_instance("per-scale-mlp", 6, 7, n_max=4)
        a = approx_esv(model, X, m=35, iterations=1, seed=0)
        b = approx_esv(model, X, m=35, iterations=1, seed=0, strict_alg1=True)
        assert b.strict_alg1 and not np.allclose(a.phi, b.phi)
        model, X = random_instance("per-scale-mlp", 6, 4, n_max=4)
        a = approx_esv(model, X, m=6, iterations=1, seed=0)
        b = approx_esv(model, X, m=6, iterations=1, seed=0, strict_alg1=True)
        np.testing.assert_allclose(a.phi, b.phi, atol=1e-12)

    def test_strict_variant_exact_under_saturation(self):
        model, X = random_instance("per-scale-mlp", 6, 7, n_max=3)
        strict = model.with_strict_alg1(True)
        ex = exact_esv(strict, X)
        ap = approx_esv(strict, X, m=35, iterations=1, seed=0)
        np.testing.assert_allclose(ap.phi, ex.phi, atol=1e-9)

    def test_long_sequence_runs(self):
        model = load_model(random_model_spec("mean-pool-mlp", 2, 3, seed=0))
        X = FeatureSequence(np.random.default_rng(0).normal(size=(70, 3)))
        res = approx_esv(model, X, m=4, iterations=1, seed=0)
        assert res.phi.shape == (70, 2) and np.all(np.isfinite(res.phi))

    def test_error_shrinks_as_m_grows(self):
        model = load_model(random_model_spec("per-scale-mlp", 3, 6, hidden=16, n_max=8, seed=0))
        X = FeatureSequence(np.random.default_rng(7).normal(size=(16, 6)))
        exact = exact_esv(model, X, [0]).phi[:, 0]
        means = []
        for m in (32, 64, 128, 256, 512):
            errs = [relative_error(approx_esv(model, X, [0], m=m, iterations=1, seed=s).phi[:, 0], exact)
                    for s in range(30)]
            means.append(np.mean(errs))
        inversions = sum(b > a for a, b in zip(means, means[1:]))
        assert inversions <= 1, means


class TestContrastAndLabels:
    def test_same_class_zero(self):
        model, X = random_instance("mean-pool-mlp", 0, 5)
        res = exact_esv(model, X)
        np.testing.assert_array_equal(contrastive_esv(res, res, 1, 1), 0.0)

    def test_additive_two_class(self):
        U = np.array([[0.5, -0.2], [0.1, 0.4], [-0.3, 0.3]])
        model = LinearAdditive(U, [0.5, 0.5])
        res = exact_esv(model, FeatureSequence(np.eye(3)))
        np.testing.assert_allclose(contrastive_esv(res, res, 0, 1), U[:, 0] - U[:, 1], atol=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_equals_difference_model(self, kind):
        model, X = random_instance(kind, 21, 7)
        res = exact_esv(model, X)
        diff = exact_esv(class_combination(model, [1.0, 0.0, -1.0]), X)
        np.testing.assert_allclose(contrastive_esv(res, res, 0, 2), diff.phi[:, 0], atol=1e-9)

    def test_mismatched_provenance(self):
        model, X = random_instance("linear-additive", 0, 4)
        a = exact_esv(model, X)
        b = approx_esv(model, X, m=6, iterations=1, seed=0)
        with pytest.raises(ValidationError):
            contrastive_esv(a, b, 0, 1)

    def test_labels(self):
        res = AttributionResult(np.array([[0.2], [-0.1], [0.0]]), (0,), np.array([0.1]), "exact", 0)
        assert classify_elements(res, 0) == [SUPPORTING, DISTRACTING, DISTRACTING]

    def test_all_positive_supporting(self):
        model = LinearAdditive(np.array([[0.1], [0.2]]), [0.0])
        res = exact_esv(model, FeatureSequence(np.eye(2)))
        assert classify_elements(res, 0) == [SUPPORTING, SUPPORTING]

    def test_constant_all_distracting(self):
        X = FeatureSequence(np.ones((4, 2)))
        res = exact_esv(constant_model(), X)
        assert classify_elements(res, 1) == [DISTRACTING] * 4


def test_compensated_sum_beats_naive():
    vals = np.array([1e16, 1.0, -1e16, 1.0] * 50)[:, None]
    assert compensated_sum(vals)[0] == 100.0


@pytest.mark.parametrize("m,pct", [(32, 0.68), (64, 1.32), (128, 2.56), (256, 4.71), (512, 9.01), (1024, 16.19)])
def test_sampled_fraction_table(m, pct):
    assert abs(100 * sampled_fraction(16, m) - pct) <= 0.01
