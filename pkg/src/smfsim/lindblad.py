"""Dissipative stochastic mean field: dissipator construction, Lindblad reference and its unraveling.

Two-body operators are M^2 x M^2 matrices in kron layout: the element
``v[a*M + c, b*M + d]`` is <a c| v |b d> with particle 1 going b -> a and
particle 2 going d -> c, so ``np.kron(O, O)`` is the product O(1) O(2).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.linalg import eigh

from .errors import ConfigurationError, NumericalStateError, TrajectoryAbort
from .meanfield import SlaterState, midpoint_propagator, tdhf_step
from .model import HBARC, ModelSpec, build_mean_field, matrix_from_json, matrix_to_json

GAMMA_FLOOR = 1e-12
ORTHO_FLOOR = 1e-10


def project_ph(op: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Particle-hole part (1-rho) Q rho + rho Q (1-rho) of a one-body operator."""
    q = np.eye(rho.shape[0]) - rho
    return q @ op @ rho + rho @ op @ q


def hermitian_basis(m: int) -> np.ndarray:
    """Columns are vec(E_k) for a Frobenius-orthonormal basis of Hermitian m x m matrices."""
    cols = []
    for a in range(m):
        e = np.zeros((m, m), complex)
        e[a, a] = 1.0
        cols.append(e.ravel())
    s = 1.0 / np.sqrt(2.0)
    for a in range(m):
        for b in range(a + 1, m):
            e = np.zeros((m, m), complex)
            e[a, b] = e[b, a] = s
            cols.append(e.ravel())
            e = np.zeros((m, m), complex)
            e[a, b], e[b, a] = 1j * s, -1j * s
            cols.append(e.ravel())
    return np.array(cols).T


@dataclass(frozen=True, eq=False)
class PHInteraction:
    """Residual interaction v = sum_n lambda_n O_n (x) O_n.

    The stored operators are bare Hermitian matrices; on use they are
    restricted to the particle-hole blocks of the current density.
    """

    strengths: tuple
    operators: tuple

    def __post_init__(self):
        ops = tuple(np.array(o, dtype=complex) for o in self.operators)
        if len(ops) != len(self.strengths):
            raise ConfigurationError("strengths and operators differ in length")
        if not ops:
            raise ConfigurationError("interaction needs at least one term")
        m = ops[0].shape[0]
        for i, o in enumerate(ops):
            if o.shape != (m, m):
                raise ConfigurationError(f"operator {i}: shape {o.shape} != ({m}, {m})")
            if np.abs(o - o.conj().T).max() > 1e-12:
                raise ConfigurationError(f"operator {i}: not Hermitian")
            o.setflags(write=False)
        object.__setattr__(self, "operators", ops)
        object.__setattr__(self, "strengths", tuple(float(s) for s in self.strengths))

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]

    def __len__(self) -> int:
        return len(self.operators)

    def commutation_defect(self) -> float:
        worst = 0.0
        for i, a in enumerate(self.operators):
            for b in self.operators[i + 1:]:
                worst = max(worst, float(np.abs(a @ b - b @ a).max()))
        return worst

    def projected(self, rho: np.ndarray) -> list:
        return [project_ph(o, rho) for o in self.operators]

    def two_body(self, rho: np.ndarray | None = None, antisymmetrized: bool = False) -> np.ndarray:
        """sum_n lambda_n O_n (x) O_n, optionally times (1 - P12)."""
        ops = self.operators if rho is None else self.projected(rho)
        m = self.dim
        v = np.zeros((m * m, m * m), complex)
        for lam, o in zip(self.strengths, ops):
            v += lam * np.kron(o, o)
        if antisymmetrized:
            v = antisymmetrize(v)
        return v

    @classmethod
    def from_two_body(cls, v: np.ndarray, tol: float = 1e-10) -> "PHInteraction":
        """Recover {lambda_n, O_n} from a two-body matrix of separable Hermitian form.

        The supermatrix W[(a,b),(d,c)] = <a c|v|b d> equals sum_n lambda_n o_n o_n^dagger
        with o_n = vec(O_n); its eigenvectors in a Hermitian-matrix basis give the O_n.
        Commutation of the result is reported by :meth:`commutation_defect`, not assumed.
        """
        v = np.asarray(v, dtype=complex)
        m = int(round(np.sqrt(v.shape[0])))
        if v.shape != (m * m, m * m):
            raise ConfigurationError(f"two-body matrix shape {v.shape} is not M^2 x M^2")
        w = v.reshape(m, m, m, m).transpose(0, 2, 3, 1).reshape(m * m, m * m)
        scale = max(1.0, float(np.abs(w).max()))
        if np.abs(w - w.conj().T).max() > tol * scale:
            raise ConfigurationError("two-body matrix is not of separable Hermitian form")
        basis = hermitian_basis(m)
        wr = basis.conj().T @ w @ basis
        if np.abs(wr.imag).max() > tol * scale:
            raise ConfigurationError("two-body matrix does not map Hermitian operators to Hermitian operators")
        lam, vec = np.linalg.eigh(0.5 * (wr.real + wr.real.T))
        keep = np.abs(lam) > tol * scale
        ops = [(basis @ vec[:, k]).reshape(m, m) for k in np.flatnonzero(keep)]
        ops = [0.5 * (o + o.conj().T) for o in ops]
        out = cls(tuple(lam[keep]), tuple(ops))
        if np.abs(out.two_body() - v).max() > 1e3 * tol * scale:
            raise ConfigurationError("decomposition does not reproduce the two-body matrix")
        return out

    # -- JSON -------------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {"terms": [{"lambda": lam, "operator": matrix_to_json(o)}
                          for lam, o in zip(self.strengths, self.operators)]}

    @classmethod
    def from_dict(cls, data: Any, path: str = "interaction") -> "PHInteraction":
        if not isinstance(data, dict) or set(data) != {"terms"}:
            raise ConfigurationError(f"{path}: expected an object with exactly the key 'terms'")
        lams, ops = [], []
        for i, term in enumerate(data["terms"]):
            p = f"{path}.terms[{i}]"
            if not isinstance(term, dict):
                raise ConfigurationError(f"{p}: expected an object")
            extra = set(term) - {"lambda", "operator"}
            if extra:
                raise ConfigurationError(f"{p}.{sorted(extra)[0]}: unknown key")
            if "lambda" not in term or "operator" not in term:
                raise ConfigurationError(f"{p}: requires 'lambda' and 'operator'")
            lams.append(float(term["lambda"]))
            ops.append(matrix_from_json(term["operator"], f"{p}.operator"))
        return cls(tuple(lams), tuple(ops))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PHInteraction":
        return cls.from_dict(json.loads(text))


def exchange_matrix(m: int) -> np.ndarray:
    p = np.zeros((m * m, m * m))
    idx = np.arange(m)
    p[(idx[:, None] * m + idx[None, :]).ravel(), (idx[None, :] * m + idx[:, None]).ravel()] = 1.0
    return p


def antisymmetrize(v: np.ndarray) -> np.ndarray:
    m = int(round(np.sqrt(v.shape[0])))
    return v - v @ exchange_matrix(m)


def partial_trace_2(x: np.ndarray, m: int) -> np.ndarray:
    return np.einsum("acbc->ab", x.reshape(m, m, m, m))


def dissipator_direct(rho: np.ndarray, v) -> np.ndarray:
    """D(rho) = Tr_2 [v, F12] with F12 = 1/2 {(1-rho)(1-rho) v rho rho - rho rho v (1-rho)(1-rho)}.

    ``v`` is a :class:`PHInteraction` (projected on the current density) or
    an explicit M^2 x M^2 two-body matrix.
    """
    m = rho.shape[0]
    if isinstance(v, PHInteraction):
        if v.dim != m:
            raise ConfigurationError(f"interaction dimension {v.dim} != density dimension {m}")
        v = v.two_body(rho)
    v = np.asarray(v, dtype=complex)
    if v.shape != (m * m, m * m):
        raise ConfigurationError(f"two-body matrix shape {v.shape} inconsistent with M={m}")
    q = np.eye(m) - rho
    rr = np.kron(rho, rho)
    qq = np.kron(q, q)
    f = 0.5 * (qq @ v @ rr - rr @ v @ qq)
    return partial_trace_2(v @ f - f @ v, m)


@dataclass(frozen=True, eq=False)
class DissipatorSpec:
    """Covariance matrix Gamma of the projected operators and its eigen-decomposition."""

    gamma: np.ndarray          # K x K covariance matrix
    operators: tuple           # projected O_n used to build gamma
    rates: np.ndarray          # kept eigenvalues gamma_k > floor
    lindblad_ops: tuple        # A_k = sum_n V_nk O_n for kept k
    eigvecs: np.ndarray        # all eigenvectors V (columns)
    eigvals: np.ndarray        # all eigenvalues after clamping
    coupling: float            # g = tau / hbar^2
    rho: np.ndarray            # density the decomposition was built from

    def reconstruct(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.conj().T

    def check_fresh(self, rho: np.ndarray) -> None:
        if rho.shape != self.rho.shape or not np.array_equal(rho, self.rho):
            raise NumericalStateError("dissipator spec was built from a different density")


def build_dissipator_spec(rho: np.ndarray, interaction: PHInteraction, tau: float) -> DissipatorSpec:
    m = rho.shape[0]
    if interaction.dim != m:
        raise ConfigurationError(f"interaction dimension {interaction.dim} != density dimension {m}")
    ops = interaction.projected(rho)
    lam = np.array(interaction.strengths)
    q = np.eye(m) - rho
    k = len(ops)
    right = np.stack([q @ o @ rho for o in ops])
    gamma = 0.5 * np.outer(lam, lam) * np.einsum("aij,bji->ab", np.stack(ops), right)
    scale = max(1.0, float(np.abs(gamma).max()))
    if np.abs(gamma - gamma.conj().T).max() > 1e-12 * scale:
        raise NumericalStateError("covariance matrix is not Hermitian")
    w, vecs = eigh(0.5 * (gamma + gamma.conj().T))
    if w.min() < -GAMMA_FLOOR * scale:
        raise NumericalStateError(f"covariance matrix not positive: min eigenvalue {w.min():.3e}")
    w = np.where(w < GAMMA_FLOOR * scale, 0.0, w)
    keep = np.flatnonzero(w > 0)
    a_ops = tuple(sum(vecs[n, kk] * ops[n] for n in range(k)) for kk in keep)
    frozen = np.array(rho, copy=True)
    frozen.setflags(write=False)
    return DissipatorSpec(gamma, tuple(ops), w[keep], a_ops, vecs, w, tau / HBARC**2, frozen)


def dissipator_lindblad(rho: np.ndarray, spec: DissipatorSpec, form: str = "diagonal") -> np.ndarray:
    """Lindblad-form dissipator.

    form="covariance": sum_mn Gamma_mn [O_n O_m rho + rho O_n O_m - 2 O_m rho O_n]
    form="diagonal":   sum_k gamma_k [A_k^+ A_k rho + rho A_k^+ A_k - 2 A_k rho A_k^+]
    """
    spec.check_fresh(rho)
    out = np.zeros_like(rho, dtype=complex)
    if form == "covariance":
        ops = spec.operators
        for a, om in enumerate(ops):
            for b, on in enumerate(ops):
                g = spec.gamma[a, b]
                if g != 0:
                    out += g * (on @ om @ rho + rho @ on @ om - 2 * om @ rho @ on)
        return out
    if form != "diagonal":
        raise ValueError(f"unknown form {form!r}")
    for g, a in zip(spec.rates, spec.lindblad_ops):
        ad = a.conj().T
        out += g * (ad @ a @ rho + rho @ ad @ a - 2 * a @ rho @ ad)
    return out


def lindblad_rhs(model: ModelSpec, rho: np.ndarray, interaction: PHInteraction,
                 constraint: bool = False) -> np.ndarray:
    """(1/i hbar)[h(rho), rho] - (g/2) D(rho)."""
    h = build_mean_field(model, rho, constraint)
    spec = build_dissipator_spec(rho, interaction, model.tau)
    d = dissipator_lindblad(rho, spec)
    return (h @ rho - rho @ h) / (1j * model.hbar) - 0.5 * spec.coupling * d


def lindblad_step(model: ModelSpec, rho: np.ndarray, interaction: PHInteraction, dt: float,
                  constraint: bool = False) -> np.ndarray:
    """Classical RK4 step of the deterministic dissipative one-body equation."""
    model.check_dt(dt)
    k1 = lindblad_rhs(model, rho, interaction, constraint)
    k2 = lindblad_rhs(model, rho + 0.5 * dt * k1, interaction, constraint)
    k3 = lindblad_rhs(model, rho + 0.5 * dt * k2, interaction, constraint)
    k4 = lindblad_rhs(model, rho + dt * k3, interaction, constraint)
    return rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def unravel_increment(model: ModelSpec, state: SlaterState, spec: DissipatorSpec, dt: float,
                      normals: np.ndarray) -> np.ndarray:
    """Noise and Ito-drift parts of the single-particle update on the pre-step orbitals.

    sum_k dW_k (1-rho) A_k |phi> - (g dt/2) sum_k gamma_k [A^+A rho + rho A rho A^+ - 2 A rho A^+] |phi>
    with dW_k = -i dxi_k sqrt(g gamma_k), dxi_k = sqrt(dt) * normal_k.
    """
    phi = state.orbitals
    g = spec.coupling
    out = np.zeros_like(phi, dtype=complex)
    proj = lambda x: phi @ (phi.conj().T @ x)  # rho @ x
    for k, (rate, a) in enumerate(zip(spec.rates, spec.lindblad_ops)):
        ad = a.conj().T
        a_phi = a @ phi
        dw = -1j * np.sqrt(dt) * normals[k] * np.sqrt(g * rate)
        out += dw * (a_phi - proj(a_phi))
        ad_phi = ad @ phi
        rho_ad_phi = proj(ad_phi)
        drift = ad @ a_phi + proj(a @ rho_ad_phi) - 2.0 * (a @ rho_ad_phi)
        out -= 0.5 * g * dt * rate * drift
    return out


def lowdin(phi: np.ndarray) -> np.ndarray:
    """Symmetric orthonormalization phi S^{-1/2}."""
    s = phi.conj().T @ phi
    w, u = np.linalg.eigh(0.5 * (s + s.conj().T))
    if w.min() < ORTHO_FLOOR:
        raise TrajectoryAbort("rank loss during orthonormalization")
    return phi @ ((u / np.sqrt(w)) @ u.conj().T)


def unravel_step(model: ModelSpec, state: SlaterState, interaction: PHInteraction, dt: float,
                 normals: np.ndarray, constraint: bool = False, orthonormalize: bool = True) -> SlaterState:
    """One stochastic step; ``normals`` holds one standard normal per interaction term.

    With no active rate the step is exactly :func:`tdhf_step`.
    """
    spec = build_dissipator_spec(state.density, interaction, model.tau)
    if spec.rates.size == 0:
        return tdhf_step(model, state, dt, constraint)
    model.check_dt(dt)
    u = midpoint_propagator(model, state.orbitals, state.orbitals, dt, constraint)
    phi = u @ state.orbitals + unravel_increment(model, state, spec, dt, normals)
    if orthonormalize:
        phi = lowdin(phi)
    return SlaterState(phi, state.t + dt)
