"""Random instances for dissipator and unraveling tests."""
import numpy as np

from conftest import commuting_operators, random_projector
from smfsim.lindblad import PHInteraction
from smfsim.meanfield import SlaterState
from smfsim.model import ABSTRACT, ModelSpec


def random_commuting_instance(rng):
    m = int(rng.integers(3, 7))
    n = int(rng.integers(1, min(3, m - 1) + 1))
    k = int(rng.integers(1, 4))
    rho, q = random_projector(rng, m, n)
    ops = commuting_operators(rng, m, k)
    strengths = tuple(rng.uniform(-2.0, 2.0, size=k))
    return rho, q, PHInteraction(strengths, ops)


def unraveling_instance(seed=7, m=6, n=2, scale=1.0):
    """Abstract model, commuting interaction and initial determinant used by consistency runs."""
    rng = np.random.default_rng(seed)
    h0 = rng.normal(size=(m, m))
    h0 = 5.0 * (h0 + h0.T)
    model = ModelSpec(kind=ABSTRACT, h0=h0, n_orbitals=n, degeneracy=1, t0=0.0, t3=0.0, tau=0.01)
    interaction = PHInteraction((300.0 * scale, 200.0 * scale), commuting_operators(rng, m, 2))
    _, q = random_projector(rng, m, n)
    return model, interaction, SlaterState(q)
