import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drsls.blocks import induced1
from drsls.errors import ValidationError
from drsls.lti_model import (
    InnovationModel,
    PastWindow,
    free_response_offset,
    horizon_operators,
    load_model,
    predictor_decay_check,
    predictor_markov_params,
    save_model,
    stacked_operators,
)

from support import benchmark_model, random_model, scalar_model

# Frozen from 25 explicit multiplications of (A - L C) for the benchmark plant.
BENCHMARK_DECAY_TAU25 = 8.040457e-3


def test_scalar_markov_bank():
    bank = predictor_markov_params(scalar_model(), 2)
    assert [b.item() for b in bank.psi_u] == [1.0, 0.25]
    assert [b.item() for b in bank.psi_y] == [0.25, 0.0625]


def test_tau_one_bank_is_base_case(rng):
    model = random_model(rng)
    bank = predictor_markov_params(model, 1)
    np.testing.assert_array_equal(bank.psi_u[0], model.B - model.L @ model.D)
    np.testing.assert_array_equal(bank.psi_y[0], model.L)


def test_benchmark_bank_decays_geometrically():
    model = benchmark_model()
    bank = predictor_markov_params(model, 25)
    ratio = induced1(model.predictor)
    for k in range(24):
        assert induced1(bank.psi_u[k + 1]) <= ratio * induced1(bank.psi_u[k]) + 1e-15
        assert induced1(bank.psi_y[k + 1]) <= ratio * induced1(bank.psi_y[k]) + 1e-15


def test_scalar_stacked_operators():
    ops = stacked_operators(scalar_model(), 1)
    np.testing.assert_array_equal(ops.G, [[0, 0], [1, 0]])
    np.testing.assert_array_equal(ops.Theta, [[1, 0], [0.25, 1]])
    np.testing.assert_array_equal(ops.Gamma, [[1], [0.5]])


def test_zero_input_path_gives_zero_g():
    model = InnovationModel(A=np.eye(2) * 0.5, B=np.zeros((2, 1)), C=[[1.0, 1.0]], D=0.0,
                            L=[[0.1], [0.2]])
    assert not stacked_operators(model, 4).G.any()


def test_benchmark_g_matches_impulse_response():
    model = benchmark_model()
    T = 15
    ops = stacked_operators(model, T)
    for j in range(T + 1):
        x = np.zeros(2)
        ys = []
        for t in range(T + 1):
            u = 1.0 if t == j else 0.0
            ys.append((model.C @ x + model.D[:, 0] * u).item())
            x = model.A @ x + model.B[:, 0] * u
        np.testing.assert_allclose(ops.G[:, j], ys, atol=1e-14)


def test_recomputation_identity(rng):
    for _ in range(20):
        ops = stacked_operators(random_model(rng), int(rng.integers(1, 6)))
        assert np.array_equal(ops.G, ops.Cblk @ ops.Tu + ops.Dblk)
        assert np.array_equal(ops.Theta, ops.Cblk @ ops.Te + np.eye(ops.Theta.shape[0]))


def test_free_response_zero_window(rng):
    model = random_model(rng)
    ops, bank, y0 = horizon_operators(model, 3, 4, PastWindow.zeros(4, model.m, model.q))
    assert not y0.any()


def test_scalar_free_response():
    model = scalar_model()
    _, _, y0 = horizon_operators(model, 1, 2, PastWindow([0.0, 1.0], [0.0, 0.0]))
    np.testing.assert_allclose(y0, [1.0, 0.5])


def test_free_response_matches_observer_recursion(rng):
    model = benchmark_model()
    tau, T = 25, 15
    ops = stacked_operators(model, T)
    bank = predictor_markov_params(model, tau)
    for _ in range(10):
        u = rng.uniform(-1, 1, tau)
        y = rng.normal(size=tau)
        xh = np.zeros(2)
        bu, by = (model.B - model.L @ model.D)[:, 0], model.L[:, 0]
        for t in range(tau):
            xh = model.predictor @ xh + bu * u[t] + by * y[t]
        expect = []
        for _ in range(T + 1):
            expect.append((model.C @ xh).item())
            xh = model.A @ xh
        got = free_response_offset(ops, bank, PastWindow(u, y))
        np.testing.assert_allclose(got, expect, atol=1e-12)


def test_window_length_mismatch_rejected():
    model = scalar_model()
    ops = stacked_operators(model, 1)
    bank = predictor_markov_params(model, 2)
    with pytest.raises(ValidationError) as err:
        free_response_offset(ops, bank, PastWindow([0.0], [0.0, 0.0]))
    assert err.value.field == "u_minus"


def test_decay_scalar():
    assert predictor_decay_check(scalar_model(), 2) == pytest.approx(0.0625, abs=1e-15)


def test_decay_deadbeat():
    model = InnovationModel(A=0.5, B=1.0, C=1.0, D=0.0, L=0.5)
    assert predictor_decay_check(model, 1) == 0.0


def test_decay_benchmark_frozen():
    model = benchmark_model()
    P = np.linalg.matrix_power(model.predictor, 25)
    assert induced1(P) == pytest.approx(BENCHMARK_DECAY_TAU25, rel=1e-6)
    assert predictor_decay_check(model, 25) == pytest.approx(BENCHMARK_DECAY_TAU25, rel=1e-6)


def test_bad_horizon_rejected():
    with pytest.raises(ValidationError):
        stacked_operators(scalar_model(), 0)
    with pytest.raises(ValidationError):
        predictor_markov_params(scalar_model(), 1.5)


def test_model_shape_checked():
    with pytest.raises(ValidationError) as err:
        InnovationModel(A=np.eye(2), B=[[1.0], [0.0]], C=[[1.0, 0.0]], D=0.0, L=[[1.0, 2.0]])
    assert err.value.field == "L"


def test_model_file_round_trip(tmp_path, rng):
    model = random_model(rng)
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    for name in "ABCDL":
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))


def test_corrupted_model_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"n": 2, "m": 1, "q": 1, "A": [1, 2, 3]}')
    with pytest.raises(ValidationError):
        load_model(path)
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        load_model(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(ValidationError):
        load_model(path)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), tau=st.integers(1, 8))
def test_stacked_model_matches_simulation(seed, T, tau):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    n, m, q = model.n, model.m, model.q
    u_past = rng.normal(size=(tau, m))
    e_past = rng.normal(size=(tau, q))
    u = rng.normal(size=(T + 1, m))
    e = rng.normal(size=(T + 1, q))
    # Start so the predictor state equals the true state after the window.
    x = np.zeros(n)
    xh = np.zeros(n)
    F = model.predictor
    y_past = []
    for t in range(tau):
        y = model.C @ x + model.D @ u_past[t] + e_past[t]
        y_past.append(y)
        x = model.A @ x + model.B @ u_past[t] + model.L @ e_past[t]
        xh = F @ xh + (model.B - model.L @ model.D) @ u_past[t] + model.L @ y
    ys = []
    for t in range(T + 1):
        ys.append(model.C @ x + model.D @ u[t] + e[t])
        x = model.A @ x + model.B @ u[t] + model.L @ e[t]
    window = PastWindow(u_past.ravel(), np.concatenate(y_past))
    ops, _, y0 = horizon_operators(model, T, tau, window)
    pred = ops.G @ u.ravel() + y0 + ops.Theta @ e.ravel()
    np.testing.assert_allclose(pred, np.concatenate(ys), atol=1e-8)
