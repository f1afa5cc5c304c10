import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfl.errors import NonContractive, NumericalBlowup
from hetfl.problems import QuadraticProblem
from hetfl.solvers import (
    GradientStream,
    LinearObjective,
    NoiseSpec,
    accumulation_vector,
    extract_coefficients,
    run_local,
)
from hetfl.types import SolverSpec


def unrolled_update(spec: SolverSpec, grads: np.ndarray, eta: float, x0: np.ndarray | None = None, grad_fn=None):
    """Plain-Python reference loop for one local run; returns the final iterate."""
    d = grads.shape[1] if grads is not None else x0.size
    x = np.zeros(d) if x0 is None else x0.astype(float).copy()
    start = x.copy()
    buf = np.zeros(d)
    steps = grads.shape[0]
    for t in range(steps):
        g = grads[t] if grad_fn is None else grad_fn(x)
        if spec.kind.value == "momentum":
            buf = spec.param * buf + g
            x = x - eta * buf
        elif spec.kind.value == "proximal":
            x = x - eta * (g + spec.param * (x - start))
        elif spec.kind.value == "decayed":
            x = x - eta * (1 - spec.param) ** t * g
        else:
            x = x - eta * g
    return x


def test_plain_sgd_vector():
    a = accumulation_vector(SolverSpec.sgd(), 3)
    assert a.coeffs.tolist() == [1.0, 1.0, 1.0] and a.l1 == 3.0


def test_momentum_vector():
    a = accumulation_vector(SolverSpec.momentum(0.3), 2)
    np.testing.assert_allclose(a.coeffs, [1.3, 1.0], rtol=0, atol=1e-15)
    assert a.l1 == pytest.approx(2.3, abs=1e-15)


def test_proximal_vector():
    a = accumulation_vector(SolverSpec.proximal(1.0), 2, eta=0.1)
    np.testing.assert_allclose(a.coeffs, [0.9, 1.0], rtol=0, atol=1e-15)
    assert a.l1 == pytest.approx(1.9, abs=1e-15)


def test_proximal_non_contractive():
    with pytest.raises(NonContractive):
        accumulation_vector(SolverSpec.proximal(10.0), 3, eta=0.1)
    with pytest.raises(NonContractive):
        extract_coefficients(SolverSpec.proximal(10.0), 3, eta=0.1)


def test_extraction_examples():
    np.testing.assert_array_equal(extract_coefficients(SolverSpec.sgd(), 2).coeffs, [1.0, 1.0])
    np.testing.assert_allclose(extract_coefficients(SolverSpec.decayed(0.5), 3).coeffs, [1, 0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(extract_coefficients(SolverSpec.momentum(0.3), 2).coeffs, [1.3, 1.0], atol=1e-15)


def test_linear_objective_gives_l1_times_gradient():
    g = np.array([0.5, -2.0, 3.0])
    res = run_local(np.zeros(3), LinearObjective(g), SolverSpec.sgd(), 4, 0.1)
    np.testing.assert_allclose(res.delta, 4 * g, rtol=1e-14)
    assert res.steps == 4 and len(res.accum) == 4


def test_hand_unrolled_quadratic():
    prob = QuadraticProblem(np.array([[1.0]]))
    res = run_local([0.0], prob.local_objective(0), SolverSpec.sgd(), 2, 0.1)
    # iterates 0 -> 0.1 -> 0.19
    assert res.delta[0] == pytest.approx(-1.9, abs=1e-14)


def test_momentum_on_stubbed_stream():
    stream = GradientStream(np.array([[1.0, 0.0], [0.0, 1.0]]))
    res = run_local(np.zeros(2), stream, SolverSpec.momentum(0.3), 2, 0.05)
    np.testing.assert_allclose(res.delta, [1.3, 1.0], atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["sgd", "momentum", "proximal", "decayed"]),
    param=st.floats(0.0, 0.95),
    steps=st.integers(1, 12),
    seed=st.integers(0, 2**32 - 1),
)
def test_stream_delta_matches_reference_loop_and_coefficients(kind, param, steps, seed):
    rng = np.random.default_rng(seed)
    spec = SolverSpec(kind, param)
    eta = 0.05
    grads = rng.standard_normal((steps, 3))
    res = run_local(np.zeros(3), GradientStream(grads), spec, steps, eta)
    x_ref = unrolled_update(spec, grads, eta)
    np.testing.assert_allclose(res.delta, -x_ref / eta, rtol=1e-10, atol=1e-12)
    a = accumulation_vector(spec, steps, eta)
    np.testing.assert_allclose(res.delta, a.coeffs @ grads, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("spec", [SolverSpec.sgd(), SolverSpec.momentum(0.3), SolverSpec.proximal(1.0), SolverSpec.decayed(0.005)])
def test_final_iterate_is_start_minus_eta_delta(spec):
    prob = QuadraticProblem(np.array([[1.0, -2.0]]))
    start = np.array([0.3, 0.4])
    eta = 0.1
    res = run_local(start, prob.local_objective(0), spec, 7, eta)
    x_ref = unrolled_update(spec, np.zeros((7, 2)), eta, x0=start, grad_fn=lambda x: x - prob.centers[0])
    np.testing.assert_allclose(start - eta * res.delta, x_ref, rtol=1e-10)


def test_noise_variance_matches_accumulation():
    spec = SolverSpec.momentum(0.3)
    steps, sigma_sq, n = 5, 0.8, 10_000
    rng = np.random.default_rng(0)
    deltas = np.array(
        [run_local(np.zeros(4), LinearObjective(np.ones(4)), spec, steps, 0.01, NoiseSpec(sigma_sq), rng).delta for _ in range(n)]
    )
    a = accumulation_vector(spec, steps).coeffs
    total_var = deltas.var(axis=0, ddof=1).sum()
    assert total_var == pytest.approx(sigma_sq * (a**2).sum(), rel=0.10)
    np.testing.assert_allclose(deltas.mean(axis=0), a.sum() * np.ones(4), atol=0.05)


def test_reproducible_with_same_seed():
    spec = SolverSpec.decayed(0.1)
    obj = LinearObjective(np.array([1.0, 2.0]))
    a = run_local([0, 0], obj, spec, 6, 0.1, NoiseSpec(1.0), np.random.default_rng(5))
    b = run_local([0, 0], obj, spec, 6, 0.1, NoiseSpec(1.0), np.random.default_rng(5))
    assert a.delta.tobytes() == b.delta.tobytes()


def test_guard_raises_blowup():
    obj = LinearObjective(np.array([1e9]))
    with pytest.raises(NumericalBlowup):
        run_local([0.0], obj, SolverSpec.sgd(), 3, 1e3, guard=1e10)
