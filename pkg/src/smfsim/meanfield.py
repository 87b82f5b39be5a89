"""Constrained Hartree-Fock preparation, TDHF propagation and one-body observables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, eigh_tridiagonal

from .errors import ConvergenceError, NumericalStateError
from .model import (
    GRID,
    ModelSpec,
    build_mean_field,
    check_density,
    density_of_orbitals,
    kinetic_prefactor,
    local_potential,
)

_DEGENERACY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SlaterState:
    """N orthonormal orbitals (columns of an M x N array) at time t."""

    orbitals: np.ndarray
    t: float = 0.0

    @property
    def n_occupied(self) -> int:
        return self.orbitals.shape[1]

    @property
    def density(self) -> np.ndarray:
        return self.orbitals @ self.orbitals.conj().T

    def overlap_defect(self) -> float:
        s = self.orbitals.conj().T @ self.orbitals
        return float(np.abs(s - np.eye(self.n_occupied)).max())


def mean_field_spectrum(model: ModelSpec, n: np.ndarray, constraint: bool = False, check: bool = True):
    """Eigenpairs of h[n] ascending; uses the tridiagonal solver on the grid."""
    if check:
        check_density(n)
    local = local_potential(model, n, constraint)
    if model.kind == GRID:
        c = kinetic_prefactor(model.mass) / model.dx**2
        return eigh_tridiagonal(2.0 * c + local, np.full(model.dim - 1, -c))
    h = np.array(model.h0, dtype=complex)
    h[np.diag_indices(model.dim)] += local
    return np.linalg.eigh(h)


def propagator(model: ModelSpec, n: np.ndarray, dt: float, constraint: bool = False,
               check: bool = True) -> np.ndarray:
    """exp(-i h[n] dt / hbar) by eigendecomposition."""
    w, v = mean_field_spectrum(model, n, constraint, check)
    return (v * np.exp(-1j * w * dt / model.hbar)) @ v.conj().T


def midpoint_propagator(model, kets, bras, dt, constraint=False) -> np.ndarray:
    """Self-consistent exponential-midpoint propagator for rho = sum |ket><bra|.

    The non-negativity check is skipped for pair densities, whose real part
    may dip marginally below zero where both families are tiny.
    """
    check = bras is kets
    n0 = density_of_orbitals(model, kets, bras)
    if model.t0 == 0.0 and model.t3 == 0.0:
        return propagator(model, n0, dt, constraint, check)
    half = propagator(model, n0, dt / 2, constraint, check)
    n_half = density_of_orbitals(model, half @ kets, half @ bras)
    return propagator(model, n_half, dt, constraint, check)


def tdhf_step(model: ModelSpec, state: SlaterState, dt: float, constraint: bool = False) -> SlaterState:
    model.check_dt(dt)
    u = midpoint_propagator(model, state.orbitals, state.orbitals, dt, constraint)
    return SlaterState(u @ state.orbitals, state.t + dt)


# -- CHF ---------------------------------------------------------------------------

def node_count(v: np.ndarray) -> int:
    """Sign changes of a (phase-fixed) vector, ignoring negligible entries."""
    v = np.asarray(v)
    if np.iscomplexobj(v):
        k = int(np.argmax(np.abs(v)))
        v = (v * np.exp(-1j * np.angle(v[k]))).real
    keep = v[np.abs(v) > 1e-8 * np.abs(v).max()]
    return int(np.count_nonzero(np.diff(np.sign(keep))))


def occupied_indices(energies: np.ndarray, vectors: np.ndarray, n: int) -> np.ndarray:
    """Lowest n levels; exact ties broken by ascending node count."""
    order = np.argsort(energies, kind="stable")
    scale = max(1.0, float(np.abs(energies).max()))
    groups = []
    for i in order:
        if groups and abs(energies[i] - energies[groups[-1][0]]) <= _DEGENERACY_TOL * scale:
            groups[-1].append(i)
        else:
            groups.append([i])
    ranked = [j for g in groups for j in sorted(g, key=lambda j: node_count(vectors[:, j]))]
    return np.array(ranked[:n])


def _fix_phase(v: np.ndarray) -> np.ndarray:
    """Make the first significant entry of each column real positive."""
    v = v.astype(complex)
    for j in range(v.shape[1]):
        col = v[:, j]
        k = int(np.argmax(np.abs(col) > 1e-8 * np.abs(col).max()))
        v[:, j] = col * np.exp(-1j * np.angle(col[k]))
    return v


@dataclass
class ChfReport:
    state: SlaterState
    energies: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)


def solve_chf_detailed(model: ModelSpec, mix: float = 0.3, tol: float = 1e-8,
                       max_iter: int = 20000) -> ChfReport:
    """Self-consistent ground state of h[n] + constraint * x^2 with linear density mixing."""
    n_occ = model.n_orbitals
    if model.kind == GRID:
        w, v = mean_field_spectrum(model.with_(t0=0.0, t3=0.0, constraint=0.5), np.zeros(model.dim), True)
    else:
        w, v = eigh(np.array(model.h0))
    phi = v[:, occupied_indices(w, v, n_occ)]
    n_in = density_of_orbitals(model, phi)
    residuals = []
    for it in range(1, max_iter + 1):
        w, v = mean_field_spectrum(model, n_in, True)
        idx = occupied_indices(w, v, n_occ)
        phi = v[:, idx]
        n_out = density_of_orbitals(model, phi)
        rho = phi @ phi.conj().T
        h = build_mean_field(model, rho, True)
        res = float(np.abs(h @ rho - rho @ h).max())
        residuals.append(res)
        if res < tol:
            return ChfReport(SlaterState(_fix_phase(phi)), w[idx], it, residuals)
        n_in = (1.0 - mix) * n_in + mix * n_out
    raise ConvergenceError(f"CHF not converged after {max_iter} iterations", residuals[-1])


def solve_chf(model: ModelSpec, **kw) -> SlaterState:
    """Constrained Hartree-Fock state using the model's constraint strength."""
    return solve_chf_detailed(model, **kw).state


# -- observables --------------------------------------------------------------------

def mean_square_radius(model: ModelSpec, rho: np.ndarray) -> float:
    tr = np.real(np.trace(rho))
    if abs(tr) < 1e-300:
        raise NumericalStateError("zero-trace density")
    return float(np.real(np.sum(model.x**2 * np.diagonal(rho))) / tr)


def rms_radius(model: ModelSpec, rho: np.ndarray) -> float:
    """sqrt(Tr(x^2 rho) / Tr rho) in fm."""
    return float(np.sqrt(mean_square_radius(model, rho)))


def orbital_msr(model: ModelSpec, kets: np.ndarray, bras: np.ndarray | None = None) -> float:
    """Tr(x^2 rho)/Tr(rho) for rho = sum |ket><bra| (real part)."""
    bras = kets if bras is None else bras
    occ = np.einsum("xi,xi->x", kets, bras.conj()).real
    return float(np.dot(model.x**2, occ) / np.sum(occ))


def idempotency_defect(rho: np.ndarray) -> float:
    return float(np.abs(rho @ rho - rho).max())


def quantal_variance(rho: np.ndarray, op: np.ndarray) -> float:
    """Tr(O rho O (1 - rho)): variance of sum_i O_i in a Slater determinant."""
    if idempotency_defect(rho) > 1e-6:
        raise NumericalStateError("quantal_variance requires a projector density")
    q = np.eye(rho.shape[0]) - rho
    return float(np.real(np.trace(op @ rho @ op @ q)))


def occupation_numbers(rho: np.ndarray) -> np.ndarray:
    """Eigenvalues of rho; general solver when rho is not Hermitian."""
    if np.abs(rho - rho.conj().T).max() <= 1e-12:
        return np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    ev = np.linalg.eigvals(rho)
    if np.abs(ev.imag).max() > 1e-8:
        raise NumericalStateError("complex occupation numbers")
    return np.sort(ev.real)


def one_body_entropy(rho: np.ndarray) -> float:
    """-sum[n ln n + (1-n) ln(1-n)] over occupation numbers (k_B = 1)."""
    occ = occupation_numbers(rho)
    if occ.min() < -1e-8 or occ.max() > 1 + 1e-8:
        raise NumericalStateError(f"occupation numbers outside [0, 1]: [{occ.min():.3e}, {occ.max():.3e}]")
    occ = np.clip(occ, 0.0, 1.0)
    s = 0.0
    for p in (occ, 1.0 - occ):
        p = p[p > 0]
        s -= float(np.sum(p * np.log(p)))
    return s
