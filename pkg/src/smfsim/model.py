"""Single-particle representation, mean-field functional and residual-interaction ensemble.

Units: energies in MeV, lengths in fm, times in fm/c, so that hbar = HBARC in
MeV*(fm/c). Entropy is dimensionless (k_B = 1).

Density convention
------------------
Every local quantity (mean field, contact noise, energy) is evaluated on the
*physical* density returned by :func:`physical_density`. On the 1D grid the
orbitals live along x and the system is treated as a slab of transverse area
``area`` (fm^2)::

    n(x) = degeneracy * Re rho(x, x) / (dx * area)        [fm^-3]

so couplings carry volume units (t0, g0 in MeV fm^3, t3 in MeV fm^6). For
abstract-matrix models the density is ``degeneracy * Re rho_ii``
(dimensionless) and the couplings are plain energies.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigurationError, NumericalStateError, UnsupportedOperation

HBARC = 197.327  # MeV fm
NUCLEON_MASS = 938.9  # MeV/c^2
STABILITY_SAFETY = 0.5

GRID = "grid-1d"
ABSTRACT = "abstract-matrix"
_KINDS = (GRID, ABSTRACT)

_NEG_DENSITY_TOL = 1e-12


def kinetic_prefactor(mass: float) -> float:
    """hbar^2 / 2m in MeV fm^2."""
    return HBARC**2 / (2.0 * mass)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Physical system definition. Immutable; safe to share across threads.

    ``n_orbitals`` is the particle number per degeneracy channel, so the
    total particle number is ``n_orbitals * degeneracy``.
    """

    kind: str = GRID
    n_grid: int = 48
    dx: float = 0.4
    n_orbitals: int = 5
    degeneracy: int = 4
    mass: float = NUCLEON_MASS
    t0: float = -1000.0
    t3: float = 6000.0
    constraint: float = 0.25
    g0: float = 500.0
    tau: float = 0.01
    area: float = 12.5
    # abstract-matrix only
    h0: np.ndarray | None = None
    positions: np.ndarray | None = None
    noise_operators: tuple = ()
    noise_strengths: tuple = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"kind: expected one of {_KINDS}, got {self.kind!r}")
        if not (self.dx > 0):
            raise ConfigurationError("dx: must be > 0")
        if not (self.tau > 0):
            raise ConfigurationError("tau: must be > 0")
        if not (self.mass > 0):
            raise ConfigurationError("mass: must be > 0")
        if not (self.area > 0):
            raise ConfigurationError("area: must be > 0")
        if self.n_orbitals < 1 or self.degeneracy < 1:
            raise ConfigurationError("n_orbitals and degeneracy must be >= 1")
        if self.kind == GRID:
            if self.n_grid < 8:
                raise ConfigurationError("n_grid: must be >= 8")
            if self.h0 is not None or self.noise_operators:
                raise ConfigurationError("h0/noise_operators only apply to abstract-matrix models")
        else:
            if self.h0 is None:
                raise ConfigurationError("h0: required for abstract-matrix models")
            h0 = np.asarray(self.h0, dtype=complex)
            if h0.ndim != 2 or h0.shape[0] != h0.shape[1]:
                raise ConfigurationError("h0: must be a square matrix")
            if np.abs(h0 - h0.conj().T).max() > 1e-12:
                raise ConfigurationError("h0: must be Hermitian")
            object.__setattr__(self, "h0", _readonly(h0))
            object.__setattr__(self, "n_grid", h0.shape[0])
            m = h0.shape[0]
            pos = np.arange(m) - (m - 1) / 2 if self.positions is None else self.positions
            pos = np.asarray(pos, dtype=float)
            if pos.shape != (m,):
                raise ConfigurationError("positions: must have one entry per basis state")
            object.__setattr__(self, "positions", _readonly(pos))
            ops = tuple(_readonly(np.asarray(o, dtype=complex)) for o in self.noise_operators)
            for i, o in enumerate(ops):
                if o.shape != (m, m) or np.abs(o - o.conj().T).max() > 1e-12:
                    raise ConfigurationError(f"noise_operators[{i}]: must be Hermitian {m}x{m}")
            strengths = tuple(float(s) for s in self.noise_strengths) or (1.0,) * len(ops)
            if len(strengths) != len(ops):
                raise ConfigurationError("noise_strengths: length must match noise_operators")
            object.__setattr__(self, "noise_operators", ops)
            object.__setattr__(self, "noise_strengths", strengths)
        if self.n_orbitals * self.degeneracy > self.dim:
            raise ConfigurationError(
                f"Pauli feasibility: n_orbitals*degeneracy={self.n_orbitals * self.degeneracy} "
                f"exceeds basis dimension {self.dim}"
            )

    @property
    def hbar_c(self) -> float:
        return HBARC

    @property
    def hbar(self) -> float:
        """hbar in MeV (fm/c)."""
        return HBARC

    @property
    def dim(self) -> int:
        return int(self.n_grid)

    @property
    def n_particles(self) -> int:
        return self.n_orbitals * self.degeneracy

    @property
    def x(self) -> np.ndarray:
        """Coordinates of the basis states (fm on the grid)."""
        if self.kind == GRID:
            return (np.arange(self.n_grid) - (self.n_grid - 1) / 2) * self.dx
        return np.asarray(self.positions)

    @property
    def volume_element(self) -> float:
        """Weight turning a sum over basis sites into a volume integral."""
        return self.dx * self.area if self.kind == GRID else 1.0

    @property
    def ensemble(self) -> "ResidualEnsemble":
        if self.kind == GRID:
            return ResidualEnsemble(form="contact", g0=self.g0)
        return ResidualEnsemble(
            form="separable", operators=self.noise_operators, strengths=self.noise_strengths
        )

    def max_stable_dt(self) -> float:
        if self.kind != GRID:
            return math.inf
        return self.dx**2 * self.mass / HBARC * STABILITY_SAFETY

    def check_dt(self, dt: float) -> None:
        if not (dt > 0):
            raise ConfigurationError("dt: must be > 0")
        if dt >= self.max_stable_dt():
            raise ConfigurationError(
                f"dt={dt} violates the stability bound dt < {self.max_stable_dt():.4g} fm/c"
            )

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    # -- JSON -----------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "h0":
                if v is not None:
                    out["h0"] = matrix_to_json(v)
            elif f.name == "positions":
                if self.kind == ABSTRACT:
                    out["positions"] = [float(p) for p in v]
            elif f.name == "noise_operators":
                if v:
                    out["noise_operators"] = [matrix_to_json(o) for o in v]
            elif f.name == "noise_strengths":
                if v:
                    out["noise_strengths"] = list(v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], path: str = "model") -> "ModelSpec":
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected an object")
        allowed = {f.name for f in fields(cls)} | {"hbar_c"}
        for key in data:
            if key not in allowed:
                raise ConfigurationError(f"{path}.{key}: unknown key")
        kw = dict(data)
        if "hbar_c" in kw:
            if float(kw.pop("hbar_c")) != HBARC:
                raise ConfigurationError(f"{path}.hbar_c: fixed at {HBARC} MeV fm")
        if "h0" in kw:
            kw["h0"] = matrix_from_json(kw["h0"], f"{path}.h0")
        if "noise_operators" in kw:
            kw["noise_operators"] = tuple(
                matrix_from_json(o, f"{path}.noise_operators[{i}]")
                for i, o in enumerate(kw["noise_operators"])
            )
        if "noise_strengths" in kw:
            kw["noise_strengths"] = tuple(kw["noise_strengths"])
        int_keys = {"n_grid", "n_orbitals", "degeneracy"}
        for key, value in kw.items():
            if key in int_keys and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigurationError(f"{path}.{key}: expected an integer")
            if key in {"dx", "mass", "t0", "t3", "constraint", "g0", "tau", "area"}:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigurationError(f"{path}.{key}: expected a number")
                kw[key] = float(value)
        try:
            return cls(**kw)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        return cls.from_json(Path(path).read_text())


def matrix_to_json(a: np.ndarray) -> list:
    """Row-major nested list of [re, im] pairs."""
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def matrix_from_json(data: Any, path: str = "matrix") -> np.ndarray:
    try:
        arr = np.asarray(data, dtype=float)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{path}: expected nested [re, im] pairs") from None
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigurationError(f"{path}: expected a square matrix of [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


# -- densities --------------------------------------------------------------------

def physical_density(model: ModelSpec, site_occupation: np.ndarray) -> np.ndarray:
    """Map per-channel site occupations Re rho_ii to the physical density.

    This is the only place the normalization convention is defined.
    """
    return model.degeneracy * np.real(site_occupation) / model.volume_element


def density_of(model: ModelSpec, rho: np.ndarray) -> np.ndarray:
    """Physical density from a one-body density matrix."""
    rho = np.asarray(rho)
    if rho.shape != (model.dim, model.dim):
        raise ConfigurationError(f"density matrix shape {rho.shape} != ({model.dim}, {model.dim})")
    return physical_density(model, np.diagonal(rho).real)


def density_of_orbitals(model: ModelSpec, kets: np.ndarray, bras: np.ndarray | None = None) -> np.ndarray:
    """Physical density of rho = sum_i |ket_i><bra_i| without forming rho."""
    bras = kets if bras is None else bras
    occ = np.einsum("xi,xi->x", kets, bras.conj()).real
    return physical_density(model, occ)


def check_density(n: np.ndarray) -> None:
    if np.min(n) < -_NEG_DENSITY_TOL:
        raise NumericalStateError(f"negative spatial density {np.min(n):.3e}")


# -- mean field -------------------------------------------------------------------

def kinetic_matrix(model: ModelSpec) -> np.ndarray:
    """3-point hard-wall Laplacian times -hbar^2/2m, or h0 for abstract models."""
    if model.kind == ABSTRACT:
        return np.array(model.h0)
    m = model.dim
    c = kinetic_prefactor(model.mass) / model.dx**2
    return c * (2.0 * np.eye(m) - np.eye(m, k=1) - np.eye(m, k=-1))


def local_potential(model: ModelSpec, n: np.ndarray, constraint: bool = False) -> np.ndarray:
    """Diagonal part of the mean field for physical density n."""
    v = model.t0 * n + model.t3 * n**2
    if constraint:
        v = v + model.constraint * model.x**2
    return v


def build_mean_field(model: ModelSpec, rho: np.ndarray, constraint: bool = False) -> np.ndarray:
    """Dense Hermitian mean-field Hamiltonian h[rho] in MeV.

    Only the real part of the diagonal enters, so h stays Hermitian for pair
    densities too; the non-negativity check applies to Hermitian rho only.
    """
    n = density_of(model, rho)
    if np.abs(rho - rho.conj().T).max() <= 1e-12:
        check_density(n)
    h = kinetic_matrix(model).astype(complex)
    h[np.diag_indices(model.dim)] += local_potential(model, n, constraint)
    return h


def energy_functional(model: ModelSpec, rho: np.ndarray, constraint: bool = False) -> float:
    """Total energy of a (pair or mixed) density; h is its derivative per channel."""
    n = density_of(model, rho)
    one = kinetic_matrix(model)
    e = model.degeneracy * float(np.real(np.trace(one @ rho)))
    e += model.volume_element * float(np.sum(model.t0 / 2 * n**2 + model.t3 / 3 * n**3))
    if constraint:
        e += model.constraint * model.degeneracy * float(np.real(np.sum(model.x**2 * np.diagonal(rho))))
    return e


# -- residual ensemble ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ResidualEnsemble:
    """Gaussian ensemble of residual interactions delta v(sigma).

    contact: U(sigma) = sigma * g0 * n(x), one shared variable.
    separable: delta v = sum_i sigma_i s_i O_i (x) O_i, so
    U(sigma) = sum_i sigma_i s_i Re Tr(O_i rho) O_i.
    """

    form: str = "contact"
    g0: float = 0.0
    operators: tuple = field(default=())
    strengths: tuple = field(default=())

    @property
    def n_components(self) -> int:
        return 1 if self.form == "contact" else len(self.operators)

    def potential(self, model: ModelSpec, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        """U(rho, sigma); a 1D array stands for a diagonal matrix."""
        if self.form == "contact":
            return float(sigma[0]) * self.g0 * density_of(model, rho)
        return self.potential_from_expectations(
            sigma, [np.real(np.trace(o @ rho)) for o in self.operators]
        )

    def potential_from_expectations(self, sigma, expectations) -> np.ndarray:
        u = np.zeros_like(self.operators[0]) if self.operators else 0.0
        for s, lam, ex, o in zip(sigma, self.strengths, expectations, self.operators):
            u = u + s * lam * ex * o
        return u

    def second_moment(self, model: ModelSpec, rho: np.ndarray) -> np.ndarray:
        """E[U (x) U] as an M^2 x M^2 two-body matrix (kron layout)."""
        if self.form == "contact":
            d = self.g0 * density_of(model, rho)
            return np.diag(np.kron(d, d)).astype(complex)
        m = model.dim
        out = np.zeros((m * m, m * m), dtype=complex)
        for lam, o in zip(self.strengths, self.operators):
            c = lam * np.real(np.trace(o @ rho))
            out += c * c * np.kron(o, o)
        return out


def apply_onebody(op: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """op @ vecs where a 1D op is a diagonal matrix."""
    if np.ndim(op) == 1:
        return op[:, None] * vecs
    return op @ vecs


def contact_potential(model: ModelSpec, rho: np.ndarray, sigma: float) -> np.ndarray:
    """Diagonal contact noise matrix U = sigma * g0 * n(x)."""
    if model.kind != GRID:
        raise UnsupportedOperation("contact potential requires a grid model")
    return np.diag(sigma * model.g0 * density_of(model, rho)).astype(complex)


# -- random streams ---------------------------------------------------------------

class NoiseStream:
    """Counter-based normal draws keyed by (seed, trajectory, step, purpose).

    Any draw can be regenerated in isolation, which keeps ensembles
    reproducible under arbitrary scheduling.
    """

    def __init__(self, seed: int, trajectory: int):
        self.seed = int(seed)
        self.trajectory = int(trajectory)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.trajectory,))
        self._key = ss.generate_state(2, dtype=np.uint64)

    def normal(self, step: int, count: int, purpose: int = 0) -> np.ndarray:
        counter = np.array([0, 0, purpose, step], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=self._key, counter=counter))
        return gen.standard_normal(count)


def sample_sigma(stream: NoiseStream, n_sigma: int, step: int = 0, purpose: int = 0) -> np.ndarray:
    """n_sigma independent standard normal variables for the given step."""
    return stream.normal(step, n_sigma, purpose)
