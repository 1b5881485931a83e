import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drsls.blocks import induced1, lower_mask
from drsls.errors import ConditioningError, InternalConsistencyError, ValidationError
from drsls.lti_model import stacked_operators
from drsls.sls_core import (
    AffinePolicy,
    MismatchRealization,
    SlsParam,
    extract_policy,
    neumann_inverse,
    params_from_policy,
    random_mismatch,
    response_from_param,
    response_from_policy,
    true_param_under_mismatch,
    true_response_under_mismatch,
    validate_structure,
    validate_subspace,
)

from support import random_model, random_policy, scalar_model

K1 = [[0.0, 0.0], [2.0, 0.0]]
P1 = [0.3, -0.1]


def scalar_param():
    return SlsParam(np.eye(2), K1, [0.0, 0.3], P1, T=1, m=1, q=1)


def test_identity_param_is_structured():
    assert validate_structure(SlsParam.identity(3, 2, 1))


def test_diagonal_phi_u_breaks_structure():
    param = SlsParam.identity(2, 1, 1)
    Phi_u = param.Phi_u.copy()
    Phi_u[1, 1] = 0.5
    assert not validate_structure(SlsParam(param.Phi_y, Phi_u, param.phi_y, param.phi_u, 2, 1, 1))


def test_phi_y_diagonal_must_be_identity():
    param = SlsParam.identity(2, 1, 1)
    Phi_y = param.Phi_y.copy()
    Phi_y[0, 0] = 1.1
    assert not validate_structure(SlsParam(Phi_y, param.Phi_u, param.phi_y, param.phi_u, 2, 1, 1))


def test_subspace_zero_feedback(rng):
    G = rng.normal(size=(4, 8)) * lower_mask(4, 1, 2)
    assert validate_subspace(G, SlsParam.identity(3, 2, 1)) == 0.0
    c = rng.normal(size=8)
    param = SlsParam(np.eye(4), np.zeros((8, 4)), G @ c, c, 3, 2, 1)
    assert validate_subspace(G, param) <= 1e-14


def test_extract_zero_policy():
    policy = extract_policy(SlsParam.identity(2, 1, 2))
    assert not policy.K.any() and not policy.p.any()


def test_scalar_extract_and_build():
    G = stacked_operators(scalar_model(), 1).G
    policy = extract_policy(scalar_param())
    np.testing.assert_array_equal(policy.K, K1)
    np.testing.assert_array_equal(policy.p, P1)
    param = params_from_policy(AffinePolicy(K1, P1, 1, 1, 1), G)
    ref = scalar_param()
    for name in ("Phi_y", "Phi_u", "phi_y", "phi_u"):
        np.testing.assert_allclose(getattr(param, name), getattr(ref, name), atol=1e-15)


def test_open_loop_param(rng):
    model = random_model(rng)
    T = 3
    G = stacked_operators(model, T).G
    p = rng.normal(size=(T + 1) * model.m)
    param = params_from_policy(AffinePolicy(np.zeros((G.shape[1], G.shape[0])), p, T,
                                            model.m, model.q), G)
    np.testing.assert_allclose(param.Phi_y, np.eye(G.shape[0]), atol=1e-14)
    assert not param.Phi_u.any()
    np.testing.assert_allclose(param.phi_y, G @ p, atol=1e-12)
    np.testing.assert_allclose(param.phi_u, p, atol=1e-14)


def test_scalar_response():
    y0 = np.array([1.0, 0.5])
    G = stacked_operators(scalar_model(), 1).G
    Theta = np.eye(2)
    r = response_from_param(scalar_param(), y0, Theta, np.zeros(2))
    np.testing.assert_allclose(r.y, [1.0, 0.8])
    np.testing.assert_allclose(r.u, [0.3, 1.9])
    s = response_from_policy(AffinePolicy(K1, P1, 1, 1, 1), G, y0, Theta, np.zeros(2))
    np.testing.assert_allclose(s.y, [1.0, 0.8])
    np.testing.assert_allclose(s.u, [0.3, 1.9])


def test_free_response_param(rng):
    param = SlsParam.identity(2, 1, 1)
    y0 = rng.normal(size=3)
    r = response_from_param(param, y0, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(r.y, y0)
    assert not r.u.any()


def test_extract_rejects_acausal_param():
    param = scalar_param()
    Phi_u = np.array([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(InternalConsistencyError):
        extract_policy(SlsParam(param.Phi_y, Phi_u, param.phi_y, param.phi_u, 1, 1, 1))


def test_param_shape_checked():
    with pytest.raises(ValidationError) as err:
        SlsParam(np.eye(2), np.zeros((2, 3)), np.zeros(2), np.zeros(2), 1, 1, 1)
    assert err.value.field == "Phi_u"


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 8))
def test_round_trip_and_responses(seed, T):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    G = stacked_operators(model, T).G
    policy = random_policy(rng, T, model.m, model.q, scale=0.5)
    param = params_from_policy(policy, G)
    assert validate_structure(param)
    assert validate_subspace(G, param) <= 1e-10 * max(1.0, induced1(param.Phi))
    back = extract_policy(param)
    np.testing.assert_allclose(back.K, policy.K, atol=1e-8)
    np.testing.assert_allclose(back.p, policy.p, atol=1e-8)
    y0 = rng.normal(size=G.shape[0])
    Theta = np.eye(G.shape[0]) + rng.normal(size=G.shape[0]**2).reshape(G.shape[0], -1) \
        * lower_mask(T + 1, model.q, model.q, strict=True)
    e = rng.normal(size=G.shape[0])
    a = response_from_param(param, y0, Theta, e)
    b = response_from_policy(policy, G, y0, Theta, e)
    scale = max(1.0, np.abs(a.eta).max())
    np.testing.assert_allclose(a.eta, b.eta, atol=1e-8 * scale)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6))
def test_feedback_map_factorization(seed, T):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    G = stacked_operators(model, T).G
    policy = random_policy(rng, T, model.m, model.q)
    param = params_from_policy(policy, G)
    np.testing.assert_allclose(param.Phi_u, policy.K @ param.Phi_y, atol=1e-8 * max(
        1.0, np.abs(param.Phi_u).max()))


def test_zero_mismatch_is_identity(rng):
    model = random_model(rng)
    T = 3
    ops = stacked_operators(model, T)
    param = params_from_policy(random_policy(rng, T, model.m, model.q), ops.G)
    mm = MismatchRealization.zero(T, model.m, model.q)
    y0 = rng.normal(size=ops.G.shape[0])
    e = rng.normal(size=ops.G.shape[0])
    resp, true = true_response_under_mismatch(param, mm, y0, ops.Theta, e)
    for name in ("Phi_y", "Phi_u", "phi_y", "phi_u"):
        np.testing.assert_array_equal(getattr(true, name), getattr(param, name))
    np.testing.assert_array_equal(resp.eta, response_from_param(param, y0, ops.Theta, e).eta)


def test_mismatch_that_annihilates_feedback():
    param = scalar_param()
    Delta = np.array([[0.0, 0.0], [0.7, 0.0]])
    assert not (Delta @ param.Phi_u).any()
    true = true_param_under_mismatch(param, Delta)
    np.testing.assert_array_equal(true.Phi_y, param.Phi_y)
    np.testing.assert_array_equal(true.Phi_u, param.Phi_u)
    np.testing.assert_allclose(true.phi_y, param.phi_y + param.Phi_y @ Delta @ param.phi_u)


def _direct_mismatch_check(rng, T):
    model = random_model(rng)
    m, q = model.m, model.q
    ops = stacked_operators(model, T)
    policy = random_policy(rng, T, m, q)
    param = params_from_policy(policy, ops.G)
    mm = random_mismatch(T, m, q, (1.0, 0.5, 0.5), rng, strict_delta=False)
    target = 0.5 / max(induced1(param.Phi_u), 1e-12)
    Delta = mm.Delta * (target * rng.uniform() / max(induced1(mm.Delta), 1e-12))
    mm = MismatchRealization(Delta, mm.Theta_tilde, mm.y0_tilde)
    y0 = rng.normal(size=ops.G.shape[0])
    e = rng.normal(size=ops.G.shape[0])
    resp, _ = true_response_under_mismatch(param, mm, y0, ops.Theta, e)
    direct = response_from_policy(extract_policy(param), ops.G + Delta, y0 + mm.y0_tilde,
                                  ops.Theta + mm.Theta_tilde, e)
    scale = max(1.0, np.abs(direct.eta).max())
    return float(np.abs(resp.eta - direct.eta).max()) / scale


def test_mismatch_matches_direct_simulation(rng):
    for T in (1, 2, 3, 5):
        assert _direct_mismatch_check(rng, T) <= 1e-8


def test_neumann_matches_inverse(rng):
    for _ in range(20):
        T = int(rng.integers(1, 6))
        model = random_model(rng)
        param = params_from_policy(random_policy(rng, T, model.m, model.q),
                                   stacked_operators(model, T).G)
        Delta = rng.normal(size=(param.Phi_y.shape[0], param.Phi_u.shape[0]))
        Delta *= lower_mask(T + 1, model.q, model.m)
        Delta *= 0.5 / max(induced1(Delta @ param.Phi_u), 1e-12)
        X = Delta @ param.Phi_u
        ref = np.linalg.inv(np.eye(X.shape[0]) - X)
        approx = neumann_inverse(X, terms=200)
        np.testing.assert_allclose(approx, ref, atol=1e-10)
        true = true_param_under_mismatch(param, Delta)
        np.testing.assert_allclose(true.Phi_u, param.Phi_u @ ref, atol=1e-9)


def test_neumann_exact_for_nilpotent(rng):
    X = np.tril(rng.normal(size=(5, 5)), k=-1)
    np.testing.assert_allclose(neumann_inverse(X), np.linalg.inv(np.eye(5) - X), atol=1e-10)


def test_near_singular_mismatch_rejected():
    param = SlsParam(np.eye(2), [[1.0, 0.0], [0.0, 0.0]], np.zeros(2), np.zeros(2), 1, 1, 1)
    with pytest.raises(ConditioningError):
        true_param_under_mismatch(param, np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_random_mismatch_within_budget(rng):
    gamma = (0.01, 0.02, 0.03)
    for _ in range(200):
        mm = random_mismatch(4, 2, 1, gamma, rng)
        n1, n2, n3 = mm.norms()
        assert n1 <= gamma[0] + 1e-15 and n2 <= gamma[1] + 1e-15 and n3 <= gamma[2] + 1e-15
        assert not mm.Delta[~lower_mask(5, 1, 2, strict=True)].any()
        assert not mm.Theta_tilde[~lower_mask(5, 1, 1, strict=True)].any()


def test_policy_causality_flag(rng):
    policy = random_policy(rng, 3, 1, 2)
    assert policy.is_causal()
    K = policy.K.copy()
    K[0, 0] = 1.0
    assert not AffinePolicy(K, policy.p, 3, 1, 2).is_causal()


def test_serialization_round_trip(rng):
    policy = random_policy(rng, 2, 2, 1)
    back = AffinePolicy.from_dict(policy.to_dict())
    np.testing.assert_array_equal(back.K, policy.K)
    param = params_from_policy(policy, rng.normal(size=(3, 6)) * lower_mask(3, 1, 2))
    back = SlsParam.from_dict(param.to_dict())
    np.testing.assert_array_equal(back.Phi, param.Phi)
    np.testing.assert_array_equal(back.phi, param.phi)
