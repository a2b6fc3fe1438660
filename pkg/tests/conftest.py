import numpy as np
import pytest

from lindqoc.model import SIGMA_MINUS, SIGMA_X, SIGMA_Z, ControlField, LindbladModel


def random_hermitian(rng, d, scale=1.0):
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    h = (a + a.conj().T) / 2
    return scale * h / np.linalg.norm(h, 2)


def random_matrix(rng, d, scale=1.0):
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return scale * a / np.linalg.norm(a, 2)


def random_model(rng, d=2, n_c=1, m=1, h_scale=1.0, mu_scale=0.5, l_scale=0.4):
    return LindbladModel(random_hermitian(rng, d, h_scale),
                         [random_hermitian(rng, d, mu_scale) for _ in range(n_c)],
                         [random_matrix(rng, d, l_scale) for _ in range(m)])


def random_control(rng, n_c=1, N=4, T=1.0, amp=1.0):
    return ControlField(T, rng.uniform(-amp, amp, (N + 1, n_c)))


def random_state(rng, d=2):
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def damped_qubit():
    """H = sz + u sx, L = 0.3 s-."""
    return LindbladModel(SIGMA_Z, [SIGMA_X], [0.3 * SIGMA_MINUS])
