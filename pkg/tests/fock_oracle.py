"""Brute-force many-body reference for the dissipator: <j|D|i> = <Phi|[[a_i^+ a_j, dv], dv]|Phi>.

Operators are built with a Jordan-Wigner representation on the full 2^M Fock
space and then restricted to the N-particle sector, which every
number-conserving operator used here leaves invariant.
"""
import itertools

import numpy as np


class FockSector:
    def __init__(self, m, n):
        self.m, self.n = m, n
        z = np.diag([1.0, -1.0])
        low = np.array([[0.0, 1.0], [0.0, 0.0]])
        ann = []
        for k in range(m):
            op = np.array([[1.0]])
            for f in [z] * k + [low] + [np.eye(2)] * (m - k - 1):
                op = np.kron(op, f)
            ann.append(op)
        number = sum(a.T @ a for a in ann)
        self.sector = np.flatnonzero(np.isclose(np.diag(number), n))
        self.hops = {(i, j): (ann[i].T @ ann[j])[np.ix_(self.sector, self.sector)]
                     for i in range(m) for j in range(m)}
        self._ann = ann

    @property
    def dim(self):
        return len(self.sector)

    def one_body(self, op):
        return sum(op[i, j] * self.hops[i, j] for i in range(self.m) for j in range(self.m))

    def slater(self, orbitals):
        full = np.zeros(2 ** self.m, complex)
        full[0] = 1.0  # all modes empty in this Jordan-Wigner ordering
        for k in range(orbitals.shape[1]):
            full = sum(orbitals[p, k] * (self._ann[p].T @ full) for p in range(self.m))
        state = full[self.sector]
        return state / np.linalg.norm(state)

    def density(self, state):
        return np.array([[state.conj() @ self.hops[i, j] @ state for i in range(self.m)]
                         for j in range(self.m)])

    def double_commutator(self, state, dv):
        out = np.zeros((self.m, self.m), complex)
        for i, j in itertools.product(range(self.m), repeat=2):
            c = self.hops[i, j] @ dv - dv @ self.hops[i, j]
            out[j, i] = state.conj() @ (c @ dv - dv @ c) @ state
        return out


def ph_residual(sector, rho, strengths, operators, prefactor=-0.5):
    """2p-2h residual interaction prefactor * sum_n lambda_n (B_n^2 + B_n^+2), B_n = (1-rho) O_n rho.

    The prefactor -1/2 is the normalization for which the double commutator
    reproduces the covariance-matrix dissipator on two-level instances.
    """
    q = np.eye(rho.shape[0]) - rho
    dv = 0
    for lam, o in zip(strengths, operators):
        b = sector.one_body(q @ o @ rho)
        dv = dv + prefactor * lam * (b @ b + b.conj().T @ b.conj().T)
    return dv


def fock_dissipator(sector, orbitals, strengths, operators, prefactor=-0.5):
    """Double commutator with the full residual interaction (one shared Gaussian amplitude)."""
    state = sector.slater(orbitals)
    rho = orbitals @ orbitals.conj().T
    return sector.double_commutator(state, ph_residual(sector, rho, strengths, operators, prefactor))


def two_level_operator(rng, rho, scale=1.3):
    """Hermitian O whose particle-hole block is proportional to a unitary (needs M = 2N)."""
    w, v = np.linalg.eigh(rho)
    holes, parts = v[:, w > 0.5], v[:, w < 0.5]
    n = holes.shape[1]
    u, _ = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    b = scale * parts @ u @ holes.conj().T
    return b + b.conj().T
