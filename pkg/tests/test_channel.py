import numpy as np
import pytest

from hetfl.channel import (
    StaticSchedule,
    schedule_from_dict,
    schedule_static,
    schedule_two_group,
    schedule_uniform_random,
    transmit,
)
from hetfl.errors import BadSchedule


def test_perfect_links_deliver_everything():
    rng = np.random.default_rng(0)
    sel = [0, 1, 1, 2]
    assert transmit(sel, [0.0, 0.0, 0.0], rng) == sel


def test_duplicate_instances_with_perfect_link():
    assert transmit([1, 1], [0.3, 0.0], np.random.default_rng(1)) == [1, 1]


def test_half_failure_delivery_count():
    n = 100_000
    rng = np.random.default_rng(2)
    delivered = transmit(np.zeros(n, dtype=int), [0.5], rng)
    # binomial mean n/2 with a 4-sigma band of about 632
    assert abs(len(delivered) - n / 2) <= 700


def test_per_instance_bernoullis_are_independent():
    # A client sampled twice should sometimes get exactly one copy through.
    rng = np.random.default_rng(3)
    outcomes = {len(transmit([0, 0], [0.5], rng)) for _ in range(200)}
    assert outcomes == {0, 1, 2}


def test_delivery_rate_per_client():
    rng = np.random.default_rng(4)
    q = np.array([0.1, 0.4, 0.7])
    n = 100_000
    sel = np.repeat(np.arange(3), n)
    delivered = np.bincount(transmit(sel, q, rng), minlength=3) / n
    se = np.sqrt(q * (1 - q) / n)
    assert np.all(np.abs(delivered - (1 - q)) <= 4 * se)


def test_transmit_rejects_invalid_probability():
    with pytest.raises(BadSchedule):
        transmit([0], [1.0], np.random.default_rng(0))


def test_static_schedule_reference_values():
    s = schedule_static(15, 0.2, clients=30)
    for r in (0, 1, 10**6):
        steps, fail = s.values(r)
        assert steps.tolist() == [15] * 30
        assert fail.tolist() == [0.2] * 30


def test_minimal_static_client():
    s = schedule_static(1, 0.0)
    assert s.values(3)[0].tolist() == [1] and s.values(3)[1].tolist() == [0.0]


def test_uniform_static_draw_is_reproducible_and_in_range():
    a = schedule_uniform_random(30, (1, 30), (0.01, 0.3), per_round=False, seed=11)
    b = schedule_uniform_random(30, (1, 30), (0.01, 0.3), per_round=False, seed=11)
    sa, fa = a.values(0)
    np.testing.assert_array_equal(sa, b.values(99)[0])
    np.testing.assert_array_equal(fa, a.values(5)[1])
    assert sa.min() >= 1 and sa.max() <= 30
    assert fa.min() >= 0.01 and fa.max() <= 0.3


def test_uniform_integer_draws_cover_both_endpoints():
    s = schedule_uniform_random(1, (1, 3), (0.0, 0.0), per_round=True, seed=5)
    seen = {int(s.values(r)[0][0]) for r in range(300)}
    assert seen == {1, 2, 3}


def test_degenerate_step_range_is_constant():
    s = schedule_uniform_random(4, (5, 5), (0.1, 0.1), per_round=True, seed=3)
    for r in range(20):
        assert s.values(r)[0].tolist() == [5] * 4


def test_per_round_values_depend_only_on_seed_client_round():
    a = schedule_uniform_random(10, (1, 30), (0.0, 0.5), per_round=True, seed=9)
    b = schedule_uniform_random(10, (1, 30), (0.0, 0.5), per_round=True, seed=9)
    later = [a.values(r) for r in (7, 3, 7, 100)]
    np.testing.assert_array_equal(later[0][0], later[2][0])
    np.testing.assert_array_equal(b.values(3)[1], later[1][1])
    # a smaller population sees the same draws for its clients
    small = schedule_uniform_random(4, (1, 30), (0.0, 0.5), per_round=True, seed=9)
    np.testing.assert_array_equal(small.values(7)[1], later[0][1][:4])
    assert not np.array_equal(a.values(7)[1], a.values(8)[1])


def test_two_group_reference_parameters():
    s = schedule_two_group(30, 15, ((1, 10), (0.2, 0.4)), ((20, 30), (0.0, 0.2)), seed=12)
    for r in range(50):
        steps, fail = s.values(r)
        assert steps[:15].min() >= 1 and steps[:15].max() <= 10
        assert fail[:15].min() >= 0.2 and fail[:15].max() <= 0.4
        assert steps[15:].min() >= 20 and steps[15:].max() <= 30
        assert fail[15:].max() <= 0.2


def test_two_group_with_identical_groups_matches_uniform():
    spec = ((1, 10), (0.2, 0.4))
    two = schedule_two_group(8, 3, spec, spec, seed=4)
    uni = schedule_uniform_random(8, (1, 10), (0.2, 0.4), per_round=True, seed=4)
    for r in range(5):
        np.testing.assert_array_equal(two.values(r)[0], uni.values(r)[0])
        np.testing.assert_array_equal(two.values(r)[1], uni.values(r)[1])


def test_schedule_dict_round_trip():
    s = schedule_two_group(6, 2, ((1, 10), (0.2, 0.4)), ((20, 30), (0.0, 0.2)), seed=1)
    back = schedule_from_dict(s.to_dict())
    np.testing.assert_array_equal(back.values(17)[1], s.values(17)[1])
    st = StaticSchedule([1, 2], [0.0, 0.5])
    assert schedule_from_dict(st.to_dict()).values(0)[0].tolist() == [1, 2]
