import numpy as np
import pytest

from smfsim.model import ModelSpec


def random_projector(rng, m, n, real=False):
    a = rng.normal(size=(m, n))
    if not real:
        a = a + 1j * rng.normal(size=(m, n))
    q, _ = np.linalg.qr(a)
    return q @ q.conj().T, q


def random_hermitian(rng, m):
    a = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    return 0.5 * (a + a.conj().T)


def commuting_operators(rng, m, k):
    _, basis = np.linalg.eigh(random_hermitian(rng, m))
    return tuple(basis @ np.diag(rng.normal(size=m)) @ basis.conj().T for _ in range(k))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_grid():
    return ModelSpec(n_grid=16, dx=0.8, n_orbitals=2, t3=3000.0, g0=500.0)
