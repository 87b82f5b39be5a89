"""Quantum jumps on a biorthogonal pair of Slater determinants (fluctuations without dissipation).

The pair carries rho = sum_i |alpha_i><beta_i|. Both families are stored as
ket arrays (M x N); the bra <beta_j| is the conjugate transpose of column j
of ``bras``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .errors import TrajectoryAbort, UnsupportedOperation
from .meanfield import SlaterState, midpoint_propagator
from .model import ModelSpec, NoiseStream, apply_onebody, build_mean_field

PIVOT_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class BiorthogonalPair:
    kets: np.ndarray
    bras: np.ndarray
    t: float = 0.0

    @classmethod
    def from_slater(cls, state: SlaterState) -> "BiorthogonalPair":
        return cls(state.orbitals.copy(), state.orbitals.copy(), state.t)

    @property
    def density(self) -> np.ndarray:
        return self.kets @ self.bras.conj().T

    def biorthogonality_defect(self) -> float:
        s = self.bras.conj().T @ self.kets
        return float(np.abs(s - np.eye(s.shape[0])).max())


@dataclass(frozen=True, eq=False)
class NoiseDraw:
    """Independent variables for the ket (a) and dual (b) families."""

    sigma_a: np.ndarray
    sigma_b: np.ndarray
    tau: float
    dt: float
    hbar: float

    @property
    def amplitude(self) -> complex:
        """dB = i sqrt(tau dt) / hbar."""
        return 1j * np.sqrt(self.tau * self.dt) / self.hbar

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.sigma_a) or np.any(self.sigma_b))

    @classmethod
    def draw(cls, model: ModelSpec, stream: NoiseStream, step: int, dt: float) -> "NoiseDraw":
        k = model.ensemble.n_components
        return cls(stream.normal(step, k, 0), stream.normal(step, k, 1), model.tau, dt, model.hbar)

    @classmethod
    def zero(cls, model: ModelSpec, dt: float) -> "NoiseDraw":
        k = model.ensemble.n_components
        return cls(np.zeros(k), np.zeros(k), model.tau, dt, model.hbar)


def _noise_active(model: ModelSpec, noise: NoiseDraw) -> bool:
    ens = model.ensemble
    if noise.is_zero:
        return False
    if ens.form == "contact":
        return ens.g0 != 0.0
    return any(s != 0.0 for s in ens.strengths)


def noise_increments(model: ModelSpec, kets, bras, noise: NoiseDraw):
    """Jump parts of the single-particle updates, evaluated on the given pair.

    d|alpha> = dB (1 - rho) U(sigma_a) |alpha>
    d|beta>  = dB (1 - rho)^dagger U'(sigma_b)^dagger |beta>
    """
    rho = kets @ bras.conj().T
    ens = model.ensemble
    ua = ens.potential(model, rho, noise.sigma_a)
    ub = ens.potential(model, rho, noise.sigma_b)
    ub_dag = ub if np.ndim(ub) == 1 else ub.conj().T
    db = noise.amplitude
    ua_a = apply_onebody(ua, kets)
    ub_b = apply_onebody(ub_dag, bras)
    da = db * (ua_a - kets @ (bras.conj().T @ ua_a))
    dbeta = db * (ub_b - bras @ (kets.conj().T @ ub_b))
    return da, dbeta


def jump_increments(model: ModelSpec, pair: BiorthogonalPair, noise: NoiseDraw, dt: float,
                    constraint: bool = False):
    """Plain Euler increments of both families including the mean-field term."""
    rho = pair.density
    h = build_mean_field(model, rho, constraint)
    da, dbeta = noise_increments(model, pair.kets, pair.bras, noise)
    da = da + dt / (1j * model.hbar) * (h @ pair.kets)
    # <dbeta| = -dt/(i hbar) <beta| h  =>  |dbeta> += dt/(i hbar) h |beta> for Hermitian h
    dbeta = dbeta + dt / (1j * model.hbar) * (h @ pair.bras)
    return da, dbeta


def rebiorthogonalize(kets: np.ndarray, bras: np.ndarray) -> np.ndarray:
    """Return bras' with bras'^dagger kets = 1; kets are left untouched."""
    s = bras.conj().T @ kets
    with warnings.catch_warnings():
        # singular overlaps are reported through the pivot check below
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(s, check_finite=True)
    if np.abs(np.diagonal(lu)).min() < PIVOT_FLOOR:
        raise TrajectoryAbort("near-singular pair overlap")
    # bras' = bras S^{-dagger}
    return lu_solve((lu, piv), bras.conj().T, trans=0).conj().T


def pair_step(model: ModelSpec, pair: BiorthogonalPair, noise: NoiseDraw, dt: float,
              constraint: bool = False) -> BiorthogonalPair:
    """Mean field by exponential midpoint, jumps by Euler-Maruyama on the pre-step pair."""
    model.check_dt(dt)
    a, b = pair.kets, pair.bras
    u = midpoint_propagator(model, a, b, dt, constraint)
    a1 = u @ a
    b1 = u @ b
    if _noise_active(model, noise):
        da, dbeta = noise_increments(model, a, b, noise)
        a1 = a1 + da
        b1 = rebiorthogonalize(a1, b1 + dbeta)
    return BiorthogonalPair(a1, b1, pair.t + dt)


def density_step(model: ModelSpec, rho: np.ndarray, noise: NoiseDraw, dt: float,
                 constraint: bool = False) -> np.ndarray:
    """Euler step of the stochastic one-body equation, at matrix level.

    drho = dt/(i hbar)[h, rho] + dB (1-rho) U_a rho + dB* rho U'_b (1-rho)
    """
    h = build_mean_field(model, rho, constraint)
    ens = model.ensemble
    q = np.eye(rho.shape[0]) - rho
    ua = ens.potential(model, rho, noise.sigma_a)
    ub = ens.potential(model, rho, noise.sigma_b)
    ua = np.diag(ua) if np.ndim(ua) == 1 else ua
    ub = np.diag(ub) if np.ndim(ub) == 1 else ub
    db = noise.amplitude
    drho = dt / (1j * model.hbar) * (h @ rho - rho @ h)
    drho = drho + db * (q @ ua @ rho) + np.conj(db) * (rho @ ub @ q)
    return rho + drho


def exchange_operator(m: int) -> np.ndarray:
    """P12 on the M^2-dimensional two-particle space (kron layout)."""
    p = np.zeros((m * m, m * m))
    for a in range(m):
        for b in range(m):
            p[a * m + b, b * m + a] = 1.0
    return p


def correlation_increment(model: ModelSpec, rho: np.ndarray, dt: float) -> np.ndarray:
    """Beyond-mean-field two-body increment accumulated in one step.

    dC = -(tau dt / hbar^2) [ (1-rho)(1-rho) E[U U] rho12 + rho12 E[U'U'] (1-rho)(1-rho) ]
    with rho12 = rho (x) rho (1 - P12). Returned as an M^2 x M^2 matrix.
    """
    ens = model.ensemble
    if ens.form not in ("contact", "separable"):
        raise UnsupportedOperation(f"no closed-form second moment for {ens.form!r}")
    m = rho.shape[0]
    q = np.eye(m) - rho
    qq = np.kron(q, q)
    rho12 = np.kron(rho, rho) @ (np.eye(m * m) - exchange_operator(m))
    moment = ens.second_moment(model, rho)
    pref = -model.tau * dt / model.hbar**2
    return pref * (qq @ moment @ rho12 + rho12 @ moment @ qq)
