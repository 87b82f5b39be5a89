"""Structural invariant checks on small instances, runnable from the command line.

The idempotency scaling uses the noise-averaged defect ||E[rho'^2 - rho']||,
where rho' is the density before the biorthogonal or Lowdin correction.
rho'^2 is at most quadratic in each standard normal, so a 3-point
Gauss-Hermite tensor rule gives the expectation exactly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .lindblad import PHInteraction, build_dissipator_spec, lindblad_step, unravel_increment, unravel_step
from .meanfield import SlaterState, idempotency_defect, midpoint_propagator, one_body_entropy, solve_chf
from .model import ABSTRACT, ModelSpec, NoiseStream
from .pair import BiorthogonalPair, NoiseDraw, noise_increments, pair_step

TRACE_TOL = 1e-10
OVERLAP_TOL = 1e-8
RATIO_WINDOW = (3.5, 4.5)
GAMMA_TOL = -1e-12
ENTROPY_TOL = 1e-8
OCCUPATION_TOL = 1e-8

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(3)
_GH_W = _GH_W / _GH_W.sum()


@dataclass
class Check:
    name: str
    value: float
    limit: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} ({self.limit})"


def _gauss_hermite(n_vars: int):
    for idx in itertools.product(range(len(_GH_X)), repeat=n_vars):
        yield _GH_X[list(idx)], float(np.prod(_GH_W[list(idx)]))


def small_grid_model(**kw) -> ModelSpec:
    base = dict(n_grid=16, dx=0.8, n_orbitals=2, t3=3000.0, g0=500.0)
    base.update(kw)
    return ModelSpec(**base)


def small_abstract_instance(m: int = 6, n: int = 2, seed: int = 7):
    """Random abstract model with a commuting two-term particle-hole interaction."""
    rng = np.random.default_rng(seed)
    h0 = rng.normal(size=(m, m))
    h0 = 5.0 * (h0 + h0.T)
    model = ModelSpec(kind=ABSTRACT, h0=h0, n_orbitals=n, degeneracy=1, t0=0.0, t3=0.0, tau=0.01)
    _, basis = np.linalg.eigh(_random_hermitian(rng, m))
    ops = tuple(basis @ np.diag(rng.normal(size=m)) @ basis.conj().T for _ in range(2))
    interaction = PHInteraction((300.0, 200.0), ops)
    phi = np.linalg.qr(rng.normal(size=(m, n)) + 1j * rng.normal(size=(m, n)))[0]
    return model, interaction, SlaterState(phi)


def _random_hermitian(rng, m):
    a = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    return 0.5 * (a + a.conj().T)


def pair_mean_idempotency(model: ModelSpec, pair: BiorthogonalPair, dt: float) -> float:
    u = midpoint_propagator(model, pair.kets, pair.bras, dt)
    acc = np.zeros((model.dim, model.dim), complex)
    for (xa, xb), w in _gauss_hermite(2):
        noise = NoiseDraw(np.array([xa]), np.array([xb]), model.tau, dt, model.hbar)
        da, dbeta = noise_increments(model, pair.kets, pair.bras, noise)
        rho = (u @ pair.kets + da) @ (u @ pair.bras + dbeta).conj().T
        acc += w * (rho @ rho - rho)
    return float(np.abs(acc).max())


def jump_mean_idempotency(model: ModelSpec, interaction: PHInteraction, state: SlaterState, dt: float) -> float:
    spec = build_dissipator_spec(state.density, interaction, model.tau)
    u = midpoint_propagator(model, state.orbitals, state.orbitals, dt)
    acc = np.zeros((model.dim, model.dim), complex)
    for xs, w in _gauss_hermite(len(spec.rates)):
        phi = u @ state.orbitals + unravel_increment(model, state, spec, dt, xs)
        rho = phi @ phi.conj().T
        acc += w * (rho @ rho - rho)
    return float(np.abs(acc).max())


def _halving_ratio(defect, dt: float) -> float:
    return defect(dt) / defect(dt / 2)


def check_pair_run(steps: int = 200, dt: float = 0.5) -> tuple[list[Check], BiorthogonalPair]:
    model = small_grid_model()
    pair = BiorthogonalPair.from_slater(solve_chf(model))
    stream = NoiseStream(11, 0)
    n = model.n_orbitals
    worst_tr = worst_ov = worst_s = 0.0
    for k in range(steps):
        pair = pair_step(model, pair, NoiseDraw.draw(model, stream, k, dt), dt)
        rho = pair.density
        worst_tr = max(worst_tr, abs(np.trace(rho).real - n) / n, abs(np.trace(rho).imag))
        worst_ov = max(worst_ov, pair.biorthogonality_defect())
        worst_s = max(worst_s, abs(one_body_entropy(rho)))
    ratio = _halving_ratio(lambda h: pair_mean_idempotency(model, pair, h), 0.2)
    return [
        Check("smf-pair trace defect per step", worst_tr, f"< {TRACE_TOL:g}", worst_tr < TRACE_TOL),
        Check("smf-pair biorthogonality defect per step", worst_ov, f"< {OVERLAP_TOL:g}", worst_ov < OVERLAP_TOL),
        Check("smf-pair path entropy", worst_s, f"< {ENTROPY_TOL:g}", worst_s < ENTROPY_TOL),
        Check("smf-pair pre-correction idempotency dt-halving ratio", ratio,
              f"in {list(RATIO_WINDOW)}", RATIO_WINDOW[0] <= ratio <= RATIO_WINDOW[1]),
    ], pair


def check_jump_run(steps: int = 200, dt: float = 0.2) -> list[Check]:
    model, interaction, state = small_abstract_instance()
    stream = NoiseStream(13, 0)
    n = model.n_orbitals
    worst_tr = worst_ov = worst_s = 0.0
    gamma_min = np.inf
    for k in range(steps):
        spec = build_dissipator_spec(state.density, interaction, model.tau)
        scale = max(1.0, float(np.abs(spec.gamma).max()))
        gamma_min = min(gamma_min, float(np.linalg.eigvalsh(spec.gamma).min()) / scale)
        state = unravel_step(model, state, interaction, dt, stream.normal(k, len(interaction), 2))
        rho = state.density
        worst_tr = max(worst_tr, abs(np.trace(rho).real - n) / n)
        worst_ov = max(worst_ov, state.overlap_defect())
        worst_s = max(worst_s, abs(one_body_entropy(rho)))
    ratio = _halving_ratio(lambda h: jump_mean_idempotency(model, interaction, state, h), 0.2)
    return [
        Check("lindblad-jump trace defect per step", worst_tr, f"< {TRACE_TOL:g}", worst_tr < TRACE_TOL),
        Check("lindblad-jump orthonormality defect per step", worst_ov, f"< {OVERLAP_TOL:g}", worst_ov < OVERLAP_TOL),
        Check("lindblad-jump path entropy", worst_s, f"< {ENTROPY_TOL:g}", worst_s < ENTROPY_TOL),
        Check("Gamma minimum eigenvalue (relative)", gamma_min, f">= {GAMMA_TOL:g}", gamma_min >= GAMMA_TOL),
        Check("lindblad-jump pre-correction idempotency dt-halving ratio", ratio,
              f"in {list(RATIO_WINDOW)}", RATIO_WINDOW[0] <= ratio <= RATIO_WINDOW[1]),
    ]


def check_lindblad_window(steps: int = 300, dt: float = 0.2) -> list[Check]:
    model, interaction, state = small_abstract_instance(seed=8)
    rho = state.density
    worst = 0.0
    for _ in range(steps):
        rho = lindblad_step(model, rho, interaction, dt)
        occ = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
        worst = max(worst, -occ.min(), occ.max() - 1.0, 0.0)
    return [Check("lindblad-det occupations outside [0, 1]", worst, f"<= {OCCUPATION_TOL:g}",
                  worst <= OCCUPATION_TOL)]


def collect_checks() -> list[Check]:
    pair_checks, _ = check_pair_run()
    return pair_checks + check_jump_run() + check_lindblad_window()


def run_selftest(verbose: bool = False) -> bool:
    checks = collect_checks()
    if verbose:
        for c in checks:
            print(c.line())
    return all(c.passed for c in checks)
