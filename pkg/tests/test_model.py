import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_control, random_hermitian, random_model
from lindqoc.errors import ConfigError, DomainError, SingularRescalingError, ValidationError
from lindqoc.model import (SIGMA_MINUS, SIGMA_X, SIGMA_Y, SIGMA_Z, ControlField, DensityState,
                           LindbladModel, Observable, TimeRescaling, assert_valid, be_norm,
                           be_norm_l1, control_from_dict, control_to_dict, hamiltonian_at,
                           load_model, model_from_dict, model_to_dict, trace_distance)

H0 = 0.3 * SIGMA_Z


def test_hamiltonian_zero_controls():
    m = LindbladModel(H0, [SIGMA_X])
    u = ControlField.zeros(1, 5, 2.0)
    for t in (0.0, 0.7, 2.0):
        np.testing.assert_array_equal(hamiltonian_at(m, u, t), H0)


def test_hamiltonian_constant_control():
    m = LindbladModel(H0, [SIGMA_X])
    u = ControlField(1.0, np.ones(4))
    np.testing.assert_allclose(hamiltonian_at(m, u, 0.37), H0 + SIGMA_X, atol=1e-15)


def test_hamiltonian_hat_interpolation():
    m = LindbladModel(H0, [SIGMA_X])
    u = ControlField(1.0, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(hamiltonian_at(m, u, 0.25), H0 + 0.5 * SIGMA_X, atol=1e-15)


def test_hamiltonian_outside_horizon():
    m = LindbladModel(H0, [SIGMA_X])
    u = ControlField(1.0, [0.0, 1.0, 0.0])
    with pytest.raises(DomainError):
        hamiltonian_at(m, u, 1.5)
    with pytest.raises(DomainError):
        hamiltonian_at(m, u, -0.1)


def test_control_nodes_exact(rng):
    u = random_control(rng, n_c=2, N=6, T=3.0)
    np.testing.assert_array_equal(u(u.grid), u.nodes)


def test_hamiltonian_affine_in_nodes(rng):
    m = random_model(rng, n_c=2)
    a, b, c = (random_control(rng, 2, 5, 1.0) for _ in range(3))
    t = rng.uniform(0, 1, 7)
    d1 = hamiltonian_at(m, ControlField(1.0, a.nodes + c.nodes), t) - hamiltonian_at(m, a, t)
    d2 = hamiltonian_at(m, ControlField(1.0, b.nodes + c.nodes), t) - hamiltonian_at(m, b, t)
    np.testing.assert_allclose(d1, d2, atol=1e-13)


def test_model_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        LindbladModel(SIGMA_MINUS)
    with pytest.raises(ValidationError):
        LindbladModel(SIGMA_Z, [SIGMA_MINUS])


def test_model_rejects_mismatched_dims():
    with pytest.raises(ValidationError):
        LindbladModel(SIGMA_Z, [np.eye(4)])


def test_normalization_flag():
    LindbladModel(SIGMA_Z, [SIGMA_X], [SIGMA_MINUS], normalized=True)
    with pytest.raises(ValidationError):
        LindbladModel(2 * SIGMA_Z, normalized=True)
    with pytest.raises(ValidationError):
        Observable(2 * SIGMA_Z, normalized=True)


@pytest.mark.parametrize("h, jumps, expected", [
    (SIGMA_Z, [], 1.0),
    (np.zeros((2, 2)), [np.sqrt(2) * SIGMA_MINUS], 1.0),
    (SIGMA_X, [SIGMA_MINUS, SIGMA_MINUS.T], 2.0),
])
def test_be_norm_examples(h, jumps, expected):
    m = LindbladModel(h, [], jumps)
    u = ControlField.zeros(0, 1, 1.0)
    assert be_norm(m, u, 0.5) == pytest.approx(expected, abs=1e-14)


def test_be_norm_unitary_invariance(rng):
    m = random_model(rng, d=4, n_c=2, m=2)
    u = random_control(rng, 2, 4, 1.0)
    w, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    t = np.linspace(0, 1, 9)
    np.testing.assert_allclose(be_norm(m.conjugated(w), u, t), be_norm(m, u, t), rtol=1e-12)


def test_be_norm_l1_constant():
    m = LindbladModel(SIGMA_Z, [], [SIGMA_MINUS])
    u = ControlField.zeros(0, 1, 3.0)
    assert be_norm_l1(m, u, 3.0) == pytest.approx(1.5 * 3.0, rel=1e-14)


def test_be_norm_l1_zero_model():
    m = LindbladModel(np.zeros((2, 2)))
    assert be_norm_l1(m, ControlField.zeros(0, 1, 2.0), 2.0) == 0.0


def test_be_norm_l1_matches_fine_trapezoid(rng):
    m = LindbladModel(0.2 * SIGMA_Z, [SIGMA_X], [0.5 * SIGMA_MINUS])
    u = ControlField(2.0, [0.0, 1.3, -0.4, 0.9, 0.2])
    t = np.linspace(0, 2.0, 400001)
    ref = np.trapezoid(be_norm(m, u, t), t)
    assert be_norm_l1(m, u, 2.0) == pytest.approx(ref, rel=1e-6)


def test_be_norm_l1_monotone(rng):
    m = random_model(rng)
    u = random_control(rng, 1, 6, 2.0)
    vals = [be_norm_l1(m, u, T) for T in np.linspace(0.1, 2.0, 12)]
    assert np.all(np.diff(vals) >= 0)


def test_var_constant_rate():
    m = LindbladModel(2 * SIGMA_Z)
    r = TimeRescaling(m, ControlField.zeros(0, 1, 2.0))
    assert r(1.0) == pytest.approx(2.0, rel=1e-14)
    assert r.inverse(3.0) == pytest.approx(1.5, abs=1e-12)


def test_var_round_trip(rng):
    m = random_model(rng)
    u = random_control(rng, 1, 5, 2.0, amp=2.0)
    r = TimeRescaling(m, u)
    t = rng.uniform(0, 2.0, 100)
    np.testing.assert_allclose(r.inverse(r(t)), t, atol=1e-10)
    x = rng.uniform(0, r.total, 100)
    np.testing.assert_allclose(r(r.inverse(x)), x, atol=1e-8)


def test_var_strictly_increasing(rng):
    m = random_model(rng)
    r = TimeRescaling(m, random_control(rng, 1, 5, 2.0, amp=2.0))
    assert np.all(np.diff(r(np.linspace(0, 2.0, 1001))) > 0)


def test_var_ramped_control_matches_trapezoid():
    m = LindbladModel(0.1 * SIGMA_Z, [SIGMA_X], [])
    u = ControlField(1.0, [0.0, 2.0])
    t = np.linspace(0, 0.6, 200001)
    ref = np.trapezoid(be_norm(m, u, t), t)
    assert TimeRescaling(m, u)(0.6) == pytest.approx(ref, rel=1e-8)


def test_var_singular():
    with pytest.raises(SingularRescalingError):
        TimeRescaling(LindbladModel(np.zeros((2, 2))), ControlField.zeros(0, 1, 1.0))


def test_density_state_invariants():
    DensityState(np.eye(2) / 2)
    with pytest.raises(ValidationError):
        DensityState(np.eye(2))
    with pytest.raises(ValidationError):
        DensityState(np.diag([1.5, -0.5]))
    with pytest.raises(ValidationError):
        DensityState(np.array([[0.5, 0.1], [0.2, 0.5]]))
    assert_valid(DensityState.pure([1, 1j]).rho)


def test_trace_distance():
    assert trace_distance(np.diag([1, 0]), np.diag([0, 1])) == pytest.approx(2.0)
    assert trace_distance(np.eye(2) / 2, np.eye(2) / 2) == 0.0


def test_model_json_round_trip(rng, tmp_path):
    m = random_model(rng, d=4, n_c=2, m=2)
    doc = json.loads(json.dumps(model_to_dict(m)))
    back = model_from_dict(doc)
    for a, b in ((m.h0, back.h0), (m.mu, back.mu), (m.jumps, back.jumps)):
        np.testing.assert_array_equal(a, b)
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    np.testing.assert_array_equal(load_model(path).h0, m.h0)


def test_control_json_round_trip(rng):
    u = random_control(rng, 2, 3, 1.5)
    back = control_from_dict(json.loads(json.dumps(control_to_dict(u))))
    np.testing.assert_array_equal(back.nodes, u.nodes)
    assert back.T == u.T


@pytest.mark.parametrize("doc, field", [
    ({"dim": 2, "h0": [[[1, 0], [0, 0]], [[0, 0], [-1, 0]]], "mu": "x", "jumps": []}, "mu"),
    ({"dim": 2, "mu": [], "jumps": []}, "h0"),
    ({"dim": 3, "h0": [[[1, 0], [0, 0]], [[0, 0], [-1, 0]]], "mu": [], "jumps": []}, "h0"),
    ({"dim": 2, "h0": [[1, 0], [0, 1]], "mu": [], "jumps": []}, "h0"),
    ({"dim": 2, "h0": [[[1, 0], [0, 0]], [[0, 0], [-1, 0]]], "mu": [],
      "jumps": [[[0, 0], [1, 0]]]}, "jumps[0]"),
    ({"dim": 0, "h0": [], "mu": [], "jumps": []}, "dim"),
])
def test_model_json_errors_name_field(doc, field):
    with pytest.raises(ConfigError) as info:
        model_from_dict(doc)
    assert info.value.field is not None and info.value.field.startswith(field)


def test_load_model_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_model(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(0.1, 5))
def test_control_continuous_and_bounded(vals, T):
    u = ControlField(T, vals)
    t = np.linspace(0, T, 257)
    y = u(t)[:, 0]
    assert y.max() <= max(vals) + 1e-12 and y.min() >= min(vals) - 1e-12
    assert np.max(np.abs(np.diff(y))) <= (max(vals) - min(vals)) * (len(vals) - 1) / 256 + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_effective_hamiltonian_dissipative(seed):
    from lindqoc.propagator import effective_hamiltonian
    r = np.random.default_rng(seed)
    m = random_model(r, d=2, n_c=1, m=2)
    u = random_control(r, 1, 3, 1.0)
    J = effective_hamiltonian(m, u, r.uniform(0, 1))
    herm = 0.5 * (J + J.conj().T)
    assert np.linalg.eigvalsh(herm).max() <= 1e-12


def test_pauli_algebra():
    np.testing.assert_allclose(SIGMA_X @ SIGMA_Y, 1j * SIGMA_Z)
    assert random_hermitian(np.random.default_rng(0), 3).shape == (3, 3)
