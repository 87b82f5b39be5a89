"""Trajectory ensembles, order-independent statistics and the saturation fit."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, DataError, ExcessiveAborts, NumericalStateError, TrajectoryAbort
from .lindblad import PHInteraction, lindblad_step, unravel_step
from .meanfield import (
    SlaterState,
    idempotency_defect,
    one_body_entropy,
    orbital_msr,
    quantal_variance,
    solve_chf,
    tdhf_step,
)
from .model import ModelSpec, NoiseStream
from .pair import BiorthogonalPair, NoiseDraw, pair_step

SCHEMES = ("tdhf", "smf-pair", "lindblad-det", "lindblad-jump")
STOCHASTIC = ("smf-pair", "lindblad-jump")
ABORT_LIMIT = 0.10
THREADS_ENV = "SMFSIM_WORKERS"
_JUMP_PURPOSE = 2


@dataclass(frozen=True)
class TrajectoryConfig:
    scheme: str = "smf-pair"
    dt: float = 0.3
    t_end: float = 300.0
    stride: int = 25
    n_traj: int = 200
    seed: int = 12345
    release_constraint: bool = True
    keep_density: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme: expected one of {SCHEMES}, got {self.scheme!r}")
        if self.n_traj < 1:
            raise ConfigurationError("n_traj: must be >= 1")
        if self.stride < 1:
            raise ConfigurationError("stride: must be >= 1")
        if not (self.dt > 0 and self.t_end > 0):
            raise ConfigurationError("dt and t_end must be > 0")
        n_out = self.t_end / (self.dt * self.stride)
        if abs(n_out - round(n_out)) > 1e-9 * max(1.0, n_out):
            raise ConfigurationError("t_end must be a whole number of output intervals dt*stride")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(0, self.n_steps + 1, self.stride) * self.dt

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any], path: str = "trajectory") -> "TrajectoryConfig":
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected an object")
        allowed = {f.name for f in fields(cls)}
        for key in data:
            if key not in allowed:
                raise ConfigurationError(f"{path}.{key}: unknown key")
        try:
            return cls(**data)
        except (TypeError, ConfigurationError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from None


@dataclass
class TrajectoryRecord:
    """Observables at output times plus per-interval maxima of invariant defects."""

    trajectory: int
    msr: np.ndarray
    entropy: np.ndarray
    trace_defect: np.ndarray
    idem_defect: np.ndarray
    overlap_defect: np.ndarray
    occupation_excess: np.ndarray
    densities: np.ndarray | None = None
    aborted_at: float | None = None
    abort_reason: str = ""


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean_rms: np.ndarray
    se_rms: np.ndarray
    mean_msr: np.ndarray
    delta_r: np.ndarray
    mean_entropy: np.ndarray
    trace_defect: np.ndarray
    idem_defect: np.ndarray
    overlap_defect: np.ndarray
    occupation_excess: np.ndarray
    n_alive: int
    n_aborted: int
    sigma_mf: float
    fit: tuple | None = None
    mean_density: np.ndarray | None = None
    se_density: np.ndarray | None = None
    records: list = field(default_factory=list, repr=False)


def _initial_state(model: ModelSpec) -> SlaterState:
    return solve_chf(model)


def _density_defects(rho: np.ndarray, n: int) -> tuple[float, float]:
    trace = abs(float(np.real(np.trace(rho))) - n) / n
    return trace, idempotency_defect(rho)


def run_trajectory(model: ModelSpec, cfg: TrajectoryConfig, initial: SlaterState, trajectory: int,
                   interaction: PHInteraction | None = None) -> TrajectoryRecord:
    """One path; reproducible in isolation from (seed, trajectory id)."""
    constraint = not cfg.release_constraint
    stream = NoiseStream(cfg.seed, trajectory)
    n_out = len(cfg.times)
    msr = np.zeros(n_out)
    ent = np.zeros(n_out)
    tr_def = np.zeros(n_out)
    id_def = np.zeros(n_out)
    ov_def = np.zeros(n_out)
    occ_ex = np.zeros(n_out)
    dens = np.zeros((n_out, model.dim, model.dim), complex) if cfg.keep_density else None
    n = initial.n_occupied
    scheme = cfg.scheme

    state: Any
    if scheme == "smf-pair":
        state = BiorthogonalPair.from_slater(initial)
    elif scheme == "lindblad-det":
        state = initial.density
    else:
        state = initial

    def density(s):
        if scheme == "lindblad-det":
            return s
        return s.density

    def observe(slot, s):
        rho = density(s)
        if scheme == "smf-pair":
            msr[slot] = orbital_msr(model, s.kets, s.bras)
        elif scheme == "lindblad-det":
            msr[slot] = float(np.real(np.sum(model.x**2 * np.diagonal(rho))) / np.real(np.trace(rho)))
        else:
            msr[slot] = orbital_msr(model, s.orbitals)
        ent[slot] = one_body_entropy(rho)
        if dens is not None:
            dens[slot] = rho

    def defects(slot, s):
        rho = density(s)
        t, i = _density_defects(rho, n)
        tr_def[slot] = max(tr_def[slot], t)
        id_def[slot] = max(id_def[slot], i)
        if scheme == "lindblad-det":
            # mixed density: monitor the occupation window [0, 1] instead of orbital overlaps
            occ = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
            occ_ex[slot] = max(occ_ex[slot], -occ.min(), occ.max() - 1.0, 0.0)
        else:
            ov = s.biorthogonality_defect() if scheme == "smf-pair" else s.overlap_defect()
            ov_def[slot] = max(ov_def[slot], ov)

    observe(0, state)
    defects(0, state)
    record = TrajectoryRecord(trajectory, msr, ent, tr_def, id_def, ov_def, occ_ex, dens)
    for step in range(cfg.n_steps):
        slot = step // cfg.stride + 1
        try:
            if scheme == "tdhf":
                state = tdhf_step(model, state, cfg.dt, constraint)
            elif scheme == "smf-pair":
                state = pair_step(model, state, NoiseDraw.draw(model, stream, step, cfg.dt), cfg.dt, constraint)
            elif scheme == "lindblad-det":
                state = lindblad_step(model, state, interaction, cfg.dt, constraint)
            else:
                normals = stream.normal(step, len(interaction), _JUMP_PURPOSE)
                state = unravel_step(model, state, interaction, cfg.dt, normals, constraint)
            defects(slot, state)
            if (step + 1) % cfg.stride == 0:
                observe(slot, state)
        except (TrajectoryAbort, NumericalStateError) as exc:
            if scheme not in STOCHASTIC:
                raise
            record.aborted_at = (step + 1) * cfg.dt
            record.abort_reason = str(exc)
            break
    return record


def _worker(args):
    model, cfg, initial, ids, interaction = args
    with threadpool_limits(limits=1):
        return [run_trajectory(model, cfg, initial, i, interaction) for i in ids]


def _exact_mean(values: np.ndarray) -> np.ndarray:
    """Mean along axis 0, independent of summation order and exact for identical samples."""
    flat = values.reshape(values.shape[0], -1)
    base = flat.min(axis=0)
    shifted = np.array([math.fsum(col) for col in (flat - base).T]) / values.shape[0]
    return (base + shifted).reshape(values.shape[1:])


def _exact_std(values: np.ndarray, mean: np.ndarray, ddof: int = 0) -> np.ndarray:
    dev = (values - mean) ** 2
    n = values.shape[0]
    if n - ddof <= 0:
        return np.zeros_like(mean)
    return np.sqrt(_exact_mean(dev) * n / (n - ddof))


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get(THREADS_ENV)
        workers = int(env) if env else 1
    return max(1, int(workers))


def run_ensemble(model: ModelSpec, cfg: TrajectoryConfig, interaction: PHInteraction | None = None,
                 workers: int | None = None, initial: SlaterState | None = None) -> EnsembleStats:
    """Run ``cfg.n_traj`` paths and reduce them; the result does not depend on ``workers``."""
    if cfg.scheme in ("lindblad-det", "lindblad-jump") and interaction is None:
        raise ConfigurationError(f"scheme {cfg.scheme} requires an interaction")
    if interaction is not None and interaction.dim != model.dim:
        raise ConfigurationError("interaction dimension does not match the model basis")
    model.check_dt(cfg.dt)
    workers = resolve_workers(workers)
    with threadpool_limits(limits=1):
        initial = initial if initial is not None else _initial_state(model)
    ids = list(range(cfg.n_traj))
    if workers == 1:
        records = _worker((model, cfg, initial, ids, interaction))
    else:
        chunks = [ids[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_worker, [(model, cfg, initial, c, interaction) for c in chunks])
            records = [r for part in parts for r in part]
    records.sort(key=lambda r: r.trajectory)
    return reduce_records(model, cfg, initial, records)


def reduce_records(model: ModelSpec, cfg: TrajectoryConfig, initial: SlaterState,
                   records: list[TrajectoryRecord]) -> EnsembleStats:
    alive = [r for r in records if r.aborted_at is None]
    n_aborted = len(records) - len(alive)
    if n_aborted > ABORT_LIMIT * len(records):
        reasons = sorted({r.abort_reason for r in records if r.aborted_at is not None})
        raise ExcessiveAborts(f"{n_aborted}/{len(records)} trajectories aborted: {'; '.join(reasons)}")
    msr = np.array([r.msr for r in alive])
    rms = np.sqrt(msr)
    mean_msr = _exact_mean(msr)
    delta_r = _exact_std(msr, mean_msr)
    mean_rms = _exact_mean(rms)
    se_rms = _exact_std(rms, mean_rms, ddof=1) / math.sqrt(len(alive))
    x2 = np.diag(model.x**2)
    stats = EnsembleStats(
        times=cfg.times,
        mean_rms=mean_rms,
        se_rms=se_rms,
        mean_msr=mean_msr,
        delta_r=delta_r,
        mean_entropy=_exact_mean(np.array([r.entropy for r in alive])),
        trace_defect=np.max([r.trace_defect for r in records], axis=0),
        idem_defect=np.max([r.idem_defect for r in records], axis=0),
        overlap_defect=np.max([r.overlap_defect for r in records], axis=0),
        occupation_excess=np.max([r.occupation_excess for r in records], axis=0),
        n_alive=len(alive),
        n_aborted=n_aborted,
        sigma_mf=math.sqrt(quantal_variance(initial.density, x2)),
        records=records,
    )
    if cfg.keep_density:
        d = np.array([r.densities for r in alive])
        mean_re, mean_im = _exact_mean(d.real), _exact_mean(d.imag)
        stats.mean_density = mean_re + 1j * mean_im
        var = _exact_mean(np.abs(d - stats.mean_density) ** 2)
        stats.se_density = np.sqrt(var * len(alive) / max(1, len(alive) - 1) / len(alive))
    if cfg.scheme in STOCHASTIC and len(cfg.times) >= 20 and np.any(delta_r > 0):
        stats.fit = fit_saturation(cfg.times, delta_r)
    return stats


# -- saturation fit -------------------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f, lo: float, hi: float, iters: int = 80) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_saturation(times, series) -> tuple[float, float, float]:
    """Least-squares fit of series = amp * (1 - exp(-rate * t)).

    For fixed rate the best amplitude is a linear least-squares solution, so
    only log(rate) is searched: three zooming 41-point grids, then a
    golden-section refinement inside the best cell. Returns (amp, rate, R^2).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise DataError("times and series must be 1D arrays of equal length")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise DataError("non-finite input to saturation fit")
    if len(t) < 20:
        raise DataError("saturation fit needs at least 20 points")
    if t[0] != 0.0:
        raise DataError("saturation fit expects the series to start at t = 0")
    t_max = float(t.max())

    def profile(log_rate):
        f = 1.0 - np.exp(-math.exp(log_rate) * t)
        amp = float(np.dot(f, y) / np.dot(f, f))
        r = y - amp * f
        return float(np.dot(r, r)), amp

    lo, hi = math.log(0.1 / t_max), math.log(200.0 / t_max)
    for _ in range(3):
        grid = np.linspace(lo, hi, 41)
        j = int(np.argmin([profile(v)[0] for v in grid]))
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, 40)]
    lr = _golden_min(lambda v: profile(v)[0], lo, hi, iters=100)
    sse, amp = profile(lr)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - sse / ss_tot if ss_tot > 0 else 0.0
    return float(amp), float(math.exp(lr)), float(r2)
