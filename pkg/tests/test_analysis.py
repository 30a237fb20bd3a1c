import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ckd import analysis as A
from ckd.analysis import GradientFactorInput, TripleCountQuery
from ckd.losses import LogitBatch
from ckd.tensor import Tensor


def g_direct(pos, negs, tau):
    num = math.exp(pos / tau)
    return 1.0 - num / (num + sum(math.exp(n / tau) for n in negs))


class TestGFactor:
    @pytest.mark.parametrize("b", [1, 3, 10])
    def test_uniform(self, b):
        assert A.g_factor(GradientFactorInput(0.4, [0.4] * b, 0.7)) == pytest.approx(b / (b + 1), abs=1e-15)

    def test_no_negatives(self):
        assert A.g_factor(GradientFactorInput(0.5, [], 1.0)) == 0.0

    def test_closed_form(self):
        g = A.g_factor(GradientFactorInput(1.0, [-1.0], 1.0))
        assert g == pytest.approx(math.exp(-2) / (1 + math.exp(-2)), abs=1e-15)
        assert g == pytest.approx(0.119203, abs=1e-6)

    def test_matches_direct_formula(self, rng):
        for _ in range(200):
            pos, negs, tau = rng.uniform(-1, 1), rng.uniform(-1, 1, rng.integers(0, 12)), rng.uniform(0.1, 4)
            assert A.g_factor(GradientFactorInput(pos, negs, tau)) == pytest.approx(g_direct(pos, negs, tau),
                                                                                    abs=1e-13)

    def test_no_overflow_small_tau(self):
        g = A.g_factor(GradientFactorInput(-1.0, [1.0], 1e-4))
        assert g == pytest.approx(1.0) and g < 1.0

    def test_log_complement(self, rng):
        for _ in range(100):
            pos, negs, tau = rng.uniform(-1, 1), rng.uniform(-1, 1, rng.integers(1, 12)), rng.uniform(0.2, 4)
            want = math.log(1 - g_direct(pos, negs, tau))
            assert A.log_one_minus_g(GradientFactorInput(pos, negs, tau)) == pytest.approx(want, abs=1e-12)
        assert A.log_one_minus_g(GradientFactorInput(-1.0, [1.0], 0.05)) == pytest.approx(-40.0, abs=1e-12)
        assert A.log_one_minus_g(GradientFactorInput(0.3, [], 1.0)) == 0.0

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_bad_tau(self, tau):
        with pytest.raises(ValueError):
            GradientFactorInput(0.0, [0.0], tau)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            GradientFactorInput(float("nan"), [0.0])


@given(st.floats(-1, 1), st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(0.05, 5),
       st.floats(0.01, 0.5), st.data())
def test_g_monotone(pos, negs, tau, delta, data):
    inp = GradientFactorInput(pos, negs, tau)
    up = GradientFactorInput(pos + delta, negs, tau)
    k = data.draw(st.integers(0, len(negs) - 1))
    bumped = list(negs)
    bumped[k] += delta
    harder = GradientFactorInput(pos, bumped, tau)
    g = A.g_factor(inp)
    assert 0.0 <= g < 1.0
    assert A.g_factor(up) <= g <= A.g_factor(harder)
    # strict version on ln(1 - g), which keeps resolution when g is within an ulp of 1
    assert A.log_one_minus_g(up) > A.log_one_minus_g(inp)
    if A.negative_share(inp, k) * math.expm1(delta / tau) > 1e-9:
        assert A.log_one_minus_g(inp) > A.log_one_minus_g(harder)
    else:  # the bumped negative is below float64 resolution of the denominator
        assert A.log_one_minus_g(inp) >= A.log_one_minus_g(harder)


def test_g_monotone_regression_tiny_negative():
    inp = GradientFactorInput(0.0, [-1.0, 1.0], 0.05078125)
    harder = GradientFactorInput(0.0, [-0.75, 1.0], 0.05078125)
    assert A.negative_share(inp, 0) < 1e-15
    assert A.log_one_minus_g(harder) <= A.log_one_minus_g(inp)
    # the resolvable negative still gives a strict change
    assert A.log_one_minus_g(GradientFactorInput(0.0, [-1.0, 1.25], 0.05078125)) < A.log_one_minus_g(inp)


def test_negative_share():
    inp = GradientFactorInput(0.0, [0.0, 0.0, 0.0], 1.0)
    assert A.negative_share(inp, 2) == pytest.approx(0.25)


class TestApprox:
    def test_substitution(self):
        assert A.g_factor_approx(0.0, 1.0, 4) == pytest.approx(0.8, abs=1e-15)

    def test_zero_b(self):
        assert A.g_factor_approx(1.3, 0.5, 0) == 0.0

    @given(st.floats(-2, 2), st.floats(0.05, 5), st.integers(1, 200))
    def test_identity_with_exact(self, rho, tau, b):
        exact = A.g_factor(GradientFactorInput(0.3, [0.3 - rho] * b, tau))
        assert A.g_factor_approx(rho, tau, b) == pytest.approx(exact, abs=1e-12)

    def test_gap_substitution(self, rng):
        for _ in range(100):
            pos, negs, tau = rng.uniform(-1, 1), rng.uniform(-1, 1, 6), rng.uniform(0.1, 3)
            gaps = GradientFactorInput(pos, negs, tau).gaps
            via_gaps = 1 - 1 / (1 + sum(math.exp(-r / tau) for r in gaps))
            assert via_gaps == pytest.approx(g_direct(pos, negs, tau), abs=1e-12)

    def test_extreme_rho(self):
        assert A.g_factor_approx(-1e4, 1e-3, 5) == 1.0
        assert A.g_factor_approx(1e4, 1e-3, 5) == 0.0

    def test_bad_args(self):
        with pytest.raises(ValueError):
            A.g_factor_approx(0, 0, 1)
        with pytest.raises(ValueError):
            A.g_factor_approx(0, 1, -1)


class TestTrend:
    B = [2**k for k in range(11)]

    def test_strictly_increasing(self):
        tr = A.batch_size_trend(2.0, 1.0, self.B)
        assert tr.increasing and all(b > a for a, b in zip(tr.values, tr.values[1:]))

    def test_rho_monotone(self):
        assert A.g_factor_approx(0.0, 1.0, 16) > A.g_factor_approx(4.0, 1.0, 16)

    def test_pointwise(self):
        tr = A.batch_size_trend(3.0, 0.5, [64])
        assert tr.values == [A.g_factor_approx(3.0, 0.5, 64)]

    def test_non_finite_rho(self):
        with pytest.raises(ValueError):
            A.batch_size_trend(float("inf"), 1.0, [1, 2])


class TestSameClassGain:
    def test_hard_beats_easy(self):
        same, cross = A.same_class_gain(0.9, 0.85, 0.0, 1.0, 8)
        assert same > cross

    def test_equal(self):
        same, cross = A.same_class_gain(0.9, 0.2, 0.2, 1.0, 8)
        assert same == cross

    def test_ratio(self):
        same, cross = A.same_class_gain(0.9, 0.88, -0.5, 0.5, 4)
        want = g_direct(0.9, [0.88] * 4, 0.5) / g_direct(0.9, [-0.5] * 4, 0.5)
        assert same / cross == pytest.approx(want, rel=1e-12)

    def test_order_enforced(self):
        with pytest.raises(ValueError):
            A.same_class_gain(0.9, 0.0, 0.5, 1.0, 4)


class TestTauLimits:
    def test_vanishing(self):
        lim = A.tau_limits(GradientFactorInput(1.0, [0.0, 0.0, 0.0]))
        assert lim.g_tiny_tau < 1e-6 and lim.vanishes

    def test_saturating(self):
        lim = A.tau_limits(GradientFactorInput(1.0, [0.0, 0.0, 0.0]))
        assert abs(lim.g_huge_tau - 0.75) < 1e-3 and lim.saturates

    def test_tie_is_flagged(self):
        lim = A.tau_limits(GradientFactorInput(0.5, [0.5, 0.1]))
        assert not lim.tiny_tau_valid and lim.vanishes is None


class TestAlignment:
    def test_zero(self, rng):
        t = rng.normal(size=(3, 4))
        assert not A.alignment_error(LogitBatch(Tensor(t), Tensor(t), [0, 1, 2])).any()

    def test_offset(self, rng):
        s = rng.normal(size=(3, 4))
        np.testing.assert_allclose(A.alignment_error(LogitBatch(Tensor(s + 1), Tensor(s), [0, 1, 2])),
                                   np.ones((3, 4)), atol=1e-15)


def brute_counts(n, m, c):
    labels = np.repeat(np.arange(c), m)
    classic = sum(1 for a, p, q in itertools.product(range(n), repeat=3)
                  if p != a and labels[p] == labels[a] and labels[q] != labels[a])
    crd = sum(1 for q in range(n) if labels[q] != labels[0])
    ckd = len({labels[j] for j in range(n)} - {labels[0]}) + 1  # one positive plus one negative per other class
    return classic // n, crd, ckd


class TestTripleCount:
    def test_headline(self):
        assert A.triple_count(TripleCountQuery(100, 10, 10)) == {"classic": 810, "crd": 90, "ckd": 10}
        assert brute_counts(100, 10, 10) == (810, 90, 10)

    def test_singletons(self):
        assert A.triple_count(TripleCountQuery(7, 1, 7))["classic"] == 0

    def test_one_class(self):
        assert A.triple_count(TripleCountQuery(5, 5, 1))["crd"] == 0

    @pytest.mark.parametrize("n", [6, 12, 20, 24])
    def test_factorizations(self, n):
        for m in range(1, n + 1):
            if n % m == 0:
                q = TripleCountQuery(n, m, n // m)
                got = A.triple_count(q)
                assert (got["classic"], got["crd"], got["ckd"]) == brute_counts(n, m, n // m)

    def test_unbalanced(self):
        with pytest.raises(ValueError):
            TripleCountQuery(10, 3, 3)


class TestRank:
    def test_bound(self):
        assert A.rank_bound(10, 100, np.zeros((99, 10)))[0] == 10

    def test_gaussian(self, rng):
        assert A.rank_bound(10, 100, rng.normal(size=(99, 10))) == (10, 10)

    def test_rank_one(self, rng):
        m = np.outer(rng.normal(size=99), rng.normal(size=10))
        assert A.matrix_rank(m) == 1

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_matches_constructed_rank(self, r, c, k, seed):
        rng = np.random.default_rng(seed)
        k = min(k, r, c)
        m = rng.normal(size=(r, k)) @ rng.normal(size=(k, c))
        assert A.matrix_rank(m) == k

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            A.rank_bound(3, 5, np.zeros((5, 3)))
