import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfl.channel import schedule_static, schedule_uniform_random
from hetfl.errors import BadSchedule, DuplicateId, NumericalBlowup, ValidationError, WeightSumError
from hetfl.types import (
    AccumulationVector,
    ClientProfile,
    Population,
    RoundRecord,
    SolverKind,
    SolverSpec,
    as_model_vector,
    validate_population,
)


def two_clients(weights=(0.5, 0.5), failure=(0.0, 0.0), steps=(1, 1)):
    sched = schedule_static(steps, failure)
    return [ClientProfile(i, w, sched) for i, w in enumerate(weights)]


def test_valid_symmetric_population():
    validate_population(two_clients())


def test_weights_must_sum_to_one():
    with pytest.raises(WeightSumError):
        validate_population(two_clients(weights=(0.6, 0.6)))


def test_failure_probability_one_is_rejected():
    with pytest.raises(BadSchedule):
        two_clients(failure=(0.0, 1.0))


def test_zero_steps_rejected():
    with pytest.raises(BadSchedule):
        schedule_static([1, 0], [0.0, 0.0])


def test_duplicate_ids_rejected():
    sched = schedule_static([1, 1], [0.0, 0.0])
    with pytest.raises(DuplicateId):
        validate_population([ClientProfile(0, 0.5, sched), ClientProfile(0, 0.5, sched)])


def test_ids_must_be_contiguous():
    sched = schedule_static([1, 1, 1], [0.0, 0.0, 0.0])
    with pytest.raises(ValidationError):
        validate_population([ClientProfile(0, 0.5, sched), ClientProfile(2, 0.5, sched)])


def test_empty_population_rejected():
    with pytest.raises(ValidationError):
        validate_population([])


def test_weight_sum_tolerance_is_tight():
    w = 1.0 / 3.0
    validate_population(two_clients(weights=(w, 1 - w)))
    with pytest.raises(WeightSumError):
        validate_population(two_clients(weights=(0.5, 0.5 + 1e-9)))


@pytest.mark.parametrize(
    "kind,param",
    [(SolverKind.MOMENTUM, 1.0), (SolverKind.MOMENTUM, -0.1), (SolverKind.DECAYED, 1.0), (SolverKind.PROXIMAL, -1.0)],
)
def test_solver_parameter_ranges(kind, param):
    with pytest.raises(ValidationError):
        SolverSpec(kind, param)


def test_accumulation_vector_caches_l1():
    a = AccumulationVector([1.3, 1.0])
    assert a.l1 == pytest.approx(2.3, abs=1e-15)
    assert len(a) == 2
    with pytest.raises(ValidationError):
        AccumulationVector([1.0, -0.5])
    with pytest.raises(ValidationError):
        AccumulationVector([1.0, 1.0], l1=3.0)


def test_model_vector_rejects_nan():
    with pytest.raises(NumericalBlowup):
        as_model_vector([0.0, np.nan])


def test_round_record_delivered_within_selected():
    RoundRecord(0, (1, 1, 0), (1, 1), np.zeros(1), {})
    with pytest.raises(ValidationError):
        RoundRecord(0, (1, 0), (1, 1), np.zeros(1), {})


def test_population_build_defaults_to_uniform_weights():
    pop = Population.build(schedule_static([2, 3, 4], [0.1, 0.2, 0.3]))
    np.testing.assert_array_equal(pop.weights, np.full(3, 1 / 3))
    steps, fail = pop.round_values(7)
    assert steps.tolist() == [2, 3, 4]
    assert pop.max_steps == 4 and pop.is_static


@settings(max_examples=50, deadline=None)
@given(
    m=st.integers(1, 8),
    seed=st.integers(0, 2**31),
    per_round=st.booleans(),
    kind=st.sampled_from(list(SolverKind)),
    param=st.floats(0.0, 0.99),
)
def test_profile_serialization_round_trips_bit_exactly(m, seed, per_round, kind, param):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(m))
    w[-1] = 1.0 - w[:-1].sum()
    sched = schedule_uniform_random(m, (1, 30), (0.01, 0.3), per_round, seed)
    solver = SolverSpec(kind, param)
    for i in range(m):
        prof = ClientProfile(i, float(w[i]), sched, solver)
        back = ClientProfile.from_dict(json.loads(json.dumps(prof.to_dict())))
        assert back.weight == prof.weight
        assert back.solver == prof.solver
        for r in (0, 5, 123):
            assert back.link_schedule(r) == prof.link_schedule(r)
            assert back.solver_schedule(r) == prof.solver_schedule(r)
