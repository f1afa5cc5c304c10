import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfl.analysis import surrogate_stats
from hetfl.errors import AllZeroGradients, DegenerateLink
from hetfl.sampling import (
    draw_multiset,
    inverse_cdf,
    probs_fedacs,
    probs_importance,
    probs_optimal_sampling,
    probs_uniform,
)


@pytest.mark.parametrize("w", [(0.5, 0.5), (0.2, 0.8), (0.25,) * 4])
def test_importance_is_identity(w):
    np.testing.assert_array_equal(probs_importance(w), w)


@pytest.mark.parametrize("m", [1, 2, 5])
def test_uniform(m):
    np.testing.assert_allclose(probs_uniform(m), np.full(m, 1 / m), rtol=0, atol=0)


def test_optimal_sampling_examples():
    np.testing.assert_allclose(probs_optimal_sampling([0.5, 0.5], [1, 1]), [0.5, 0.5])
    np.testing.assert_allclose(probs_optimal_sampling([0.5, 0.5], [1, 3]), [0.25, 0.75])
    p = probs_optimal_sampling([0.5, 0.5], [0.0, 2.0], floor=1e-6)
    assert p[0] == pytest.approx(5e-7, rel=1e-6)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(AllZeroGradients):
        probs_optimal_sampling([0.5, 0.5], [0.0, 0.0])


def test_fedacs_examples():
    np.testing.assert_allclose(probs_fedacs([0.25] * 4, [0.2] * 4, [3.0] * 4), [0.25] * 4, atol=1e-15)
    p = probs_fedacs([0.5, 0.5], [0.5, 0.0], [1.0, 3.0])
    np.testing.assert_allclose(p, [6 / 7, 1 / 7], atol=1e-15)
    assert p[0] * 0.5 * 1 == pytest.approx(3 / 7, abs=1e-15)
    assert p[1] * 1.0 * 3 == pytest.approx(3 / 7, abs=1e-15)


def test_fedacs_rejects_dead_link():
    with pytest.raises(DegenerateLink):
        probs_fedacs([0.5, 0.5], [1.0 - 1e-10, 0.0], [1.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
def test_fedacs_balancing_makes_surrogate_consistent(m, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(m))
    q = rng.uniform(0, 0.9, m)
    a = rng.uniform(1, 50, m)
    p = probs_fedacs(w, q, a)
    ratio = p * (1 - q) * a / w
    assert np.ptp(ratio) <= 1e-10 * ratio.mean()
    assert abs(p.sum() - 1) <= 1e-10 and np.all(p > 0)
    stats = surrogate_stats(p, q, a, w)
    np.testing.assert_allclose(stats.omega_eff, w, atol=1e-10)


def test_draw_forced_outcome():
    assert draw_multiset([1.0], 3, np.random.default_rng(0)) == [0, 0, 0]


def test_draw_is_reproducible():
    a = draw_multiset([0.5, 0.5], 2, np.random.default_rng(42))
    b = draw_multiset([0.5, 0.5], 2, np.random.default_rng(42))
    assert a == b


def test_draw_frequency_matches_probability():
    rng = np.random.default_rng(7)
    hits = sum(draw_multiset([0.2, 0.8], 1, rng)[0] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.8) <= 0.005


def test_draw_frequencies_within_four_standard_errors():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    n = 100_000
    freq = np.bincount(draw_multiset(p, n, np.random.default_rng(8)), minlength=4) / n
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


def test_inverse_cdf_batched_matches_unbatched():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6), size=5)
    u = rng.random((5, 9))
    batched = inverse_cdf(p, u)
    for i in range(5):
        np.testing.assert_array_equal(batched[i], inverse_cdf(p[i], u[i]))
