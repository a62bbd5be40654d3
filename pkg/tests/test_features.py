import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adlift.errors import (BadAlpha, DimensionMismatch, EmptyTable,
                           ZeroCellAtSmallAlpha)
from adlift.features import (ImportanceVector, SimilarityWeights, rank_factors,
                             renyi_mi, shannon_mi, weighted_hamming,
                             weights_from_importance)
from adlift.ingest import RequestRecord, build_factor_table
from adlift.synth import FactorSpec, RequestSpec, gen_requests

from conftest import make_table

# oracle: direct evaluation of the four-term definitions on [[30, 10], [20, 40]]
SHANNON_30_10_20_40 = (0.3 * math.log2(0.3 / (0.4 * 0.5))
                       + 0.1 * math.log2(0.1 / (0.4 * 0.5))
                       + 0.2 * math.log2(0.2 / (0.6 * 0.5))
                       + 0.4 * math.log2(0.4 / (0.6 * 0.5)))  # = 0.1245112497836532
RENYI2_30_10_20_40 = math.log2(0.09 / 0.2 + 0.01 / 0.2
                               + 0.04 / 0.3 + 0.16 / 0.3)  # = 0.2223924213364477


class TestShannonMi:
    def test_independence_exact_zero(self):
        assert shannon_mi(make_table([[25, 25], [25, 25]]), 0) == 0.0

    def test_perfect_dependence_one_bit(self):
        assert shannon_mi(make_table([[50, 0], [0, 50]]), 0) == 1.0

    def test_hand_evaluated_table(self):
        value = shannon_mi(make_table([[30, 10], [20, 40]]), 0)
        assert value == pytest.approx(SHANNON_30_10_20_40, abs=1e-12)
        assert value == pytest.approx(0.1245112497836532, abs=1e-12)

    def test_empty_table(self):
        with pytest.raises(EmptyTable):
            shannon_mi(make_table([[0, 0]]), 0)

    def test_bounds_on_random_tables(self, rng):
        for _ in range(50):
            levels = rng.integers(2, 6)
            counts = rng.integers(0, 40, size=(levels, 2))
            if counts.sum() == 0:
                continue
            v = shannon_mi(make_table(counts), 0)
            assert 0.0 <= v <= min(math.log2(levels), 1.0) + 1e-12

    def test_factorizing_integer_table_near_zero(self):
        # rows proportional: joint factorizes exactly in rationals
        v = shannon_mi(make_table([[2, 4], [1, 2], [3, 6]]), 0)
        assert abs(v) < 1e-12

    def test_relabel_invariance(self, rng):
        counts = rng.integers(1, 60, size=(4, 2))
        base = shannon_mi(make_table(counts), 0)
        perm = rng.permutation(4)
        assert shannon_mi(make_table(counts[perm]), 0) == pytest.approx(base, abs=1e-12)


class TestRenyiMi:
    def test_independence_zero_for_alphas(self):
        t = make_table([[25, 25], [25, 25]])
        for alpha in (1.0, 2.0, 5.0):
            assert renyi_mi(t, 0, alpha) == 0.0

    def test_hand_evaluated_alpha2(self):
        value = renyi_mi(make_table([[30, 10], [20, 40]]), 0, 2.0)
        assert value == pytest.approx(RENYI2_30_10_20_40, abs=1e-12)
        assert value == pytest.approx(0.2223924213364477, abs=1e-12)

    def test_alpha_one_dispatches_to_shannon(self):
        t = make_table([[30, 10], [20, 40]])
        assert renyi_mi(t, 0, 1.0) == shannon_mi(t, 0)

    @pytest.mark.parametrize("h", [1e-3, 1e-4])
    def test_limit_to_shannon(self, h):
        tables = [make_table([[30, 10], [20, 40]]),
                  make_table([[5, 1], [1, 5], [3, 3]]),
                  make_table([[80, 5], [10, 5]])]
        for t in tables:
            sh = shannon_mi(t, 0)
            for alpha in (1.0 + h, 1.0 - h):
                assert abs(renyi_mi(t, 0, alpha) - sh) <= 10.0 * h

    def test_bad_alpha(self):
        t = make_table([[1, 1]])
        with pytest.raises(BadAlpha):
            renyi_mi(t, 0, 0.0)
        with pytest.raises(BadAlpha):
            renyi_mi(t, 0, -1.0)

    def test_zero_cell_small_alpha_raises(self):
        t = make_table([[50, 0], [10, 40]])
        with pytest.raises(ZeroCellAtSmallAlpha):
            renyi_mi(t, 0, 0.5)
        # alpha > 1 treats the same cell as a zero contribution
        assert renyi_mi(t, 0, 2.0) > 0.0

    def test_unused_level_is_skipped_any_alpha(self):
        t = make_table([[30, 10], [20, 40], [0, 0]])
        ref = make_table([[30, 10], [20, 40]])
        assert renyi_mi(t, 0, 0.5) == pytest.approx(renyi_mi(ref, 0, 0.5), abs=1e-12)

    def test_relabel_invariance(self, rng):
        counts = rng.integers(1, 60, size=(4, 2))
        base = renyi_mi(make_table(counts), 0, 2.0)
        perm = rng.permutation(4)
        assert renyi_mi(make_table(counts[perm]), 0, 2.0) == pytest.approx(base, abs=1e-12)


class TestRankFactors:
    def test_planted_factor_ranks_first(self):
        spec = RequestSpec(n=30_000, base_rate=0.1, factors=(
            FactorSpec("noise1", ("a", "b", "c"), (1 / 3,) * 3, (0.0,) * 3),
            FactorSpec("driver", ("lo", "hi"), (0.5, 0.5), (-0.6, 0.6)),
            FactorSpec("noise2", ("x", "y"), (0.5, 0.5), (0.0, 0.0))))
        dictionary, batch = gen_requests(spec, seed=5)
        table = build_factor_table(batch, dictionary)
        for method, alpha in (("shannon", None), ("renyi", 2.0)):
            imp = rank_factors(table, method=method, alpha=alpha or 2.0)
            assert imp.ranking[0] == 1

    def test_single_factor(self):
        imp = rank_factors(make_table([[30, 10], [20, 40]]))
        assert imp.ranking.tolist() == [0]

    def test_ties_broken_by_index(self):
        counts = [[30, 10], [20, 40]]
        imp = rank_factors(make_table(counts, counts, counts))
        assert imp.ranking.tolist() == [0, 1, 2]
        assert np.allclose(imp.values, imp.values[0])

    def test_scale_free(self):
        t1 = make_table([[30, 10], [20, 40]], [[25, 25], [25, 25]])
        t2 = make_table([[300, 100], [200, 400]], [[250, 250], [250, 250]])
        v1 = rank_factors(t1).values
        v2 = rank_factors(t2).values
        assert np.allclose(v1, v2, atol=1e-12)

    def test_empty_table(self):
        with pytest.raises(EmptyTable):
            rank_factors(make_table([[0, 0]]))

    def test_error_carries_factor_identity(self):
        t = make_table([[25, 25], [25, 25]], [[50, 0], [10, 40]])
        with pytest.raises(ZeroCellAtSmallAlpha, match="f1"):
            rank_factors(t, method="renyi", alpha=0.5)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            rank_factors(make_table([[1, 1]]), method="gbm")


class TestWeightedHamming:
    def test_identity(self):
        x = RequestRecord((0, 1, 2), 0)
        w = SimilarityWeights((1.0, 2.0, 3.0))
        assert weighted_hamming(x, x, w) == 0.0

    def test_all_differ_unit_weights(self):
        x = RequestRecord((0, 0, 0), 0)
        y = RequestRecord((1, 1, 1), 0)
        w = SimilarityWeights((1.0, 1.0, 1.0))
        assert weighted_hamming(x, y, w) == 3.0

    def test_partial_difference(self):
        x = RequestRecord((0, 1, 2), 0)   # (A, B, C)
        y = RequestRecord((0, 3, 4), 0)   # (A, D, E)
        w = SimilarityWeights((5.0, 2.0, 3.0))
        assert weighted_hamming(x, y, w) == 5.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            weighted_hamming(RequestRecord((0,), 0), RequestRecord((0, 1), 0),
                             SimilarityWeights((1.0,)))

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=6),
           st.lists(st.integers(0, 3), min_size=1, max_size=6),
           st.lists(st.integers(0, 3), min_size=1, max_size=6),
           st.lists(st.floats(0.01, 10.0), min_size=6, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_metric_properties(self, xs, ys, zs, ws):
        m = min(len(xs), len(ys), len(zs))
        x = RequestRecord(tuple(xs[:m]), 0)
        y = RequestRecord(tuple(ys[:m]), 0)
        z = RequestRecord(tuple(zs[:m]), 0)
        w = SimilarityWeights(tuple(ws[:m]))
        dxy = weighted_hamming(x, y, w)
        assert dxy >= 0.0
        assert dxy == weighted_hamming(y, x, w)
        assert dxy <= weighted_hamming(x, z, w) + weighted_hamming(z, y, w) + 1e-12


class TestWeightsFromImportance:
    def test_floor_applies(self):
        imp = ImportanceVector(method="shannon", values=[0.5, 0.0])
        w = weights_from_importance(imp, floor=0.01)
        assert w.values == (0.5, 0.01)

    def test_equal_importances_equal_weights(self):
        imp = ImportanceVector(method="shannon", values=[0.2, 0.2, 0.2])
        w = weights_from_importance(imp)
        assert len(set(w.values)) == 1

    def test_planted_factor_has_largest_weight(self):
        spec = RequestSpec(n=20_000, base_rate=0.1, factors=(
            FactorSpec("noise", ("a", "b"), (0.5, 0.5), (0.0, 0.0)),
            FactorSpec("driver", ("lo", "hi"), (0.5, 0.5), (-0.8, 0.8))))
        dictionary, batch = gen_requests(spec, seed=17)
        table = build_factor_table(batch, dictionary)
        w = weights_from_importance(rank_factors(table))
        assert w.values[1] > w.values[0]

    def test_positive_floor_required(self):
        imp = ImportanceVector(method="shannon", values=[0.1])
        with pytest.raises(ValueError):
            weights_from_importance(imp, floor=0.0)


class TestImportanceVector:
    def test_ranking_is_permutation_with_index_ties(self):
        imp = ImportanceVector(method="shannon", values=[0.3, 0.7, 0.3, 0.1])
        assert imp.ranking.tolist() == [1, 0, 2, 3]
