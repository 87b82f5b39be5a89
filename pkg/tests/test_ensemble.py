import math

import numpy as np
import pytest
from scipy.optimize import curve_fit

from smfsim.ensemble import (
    EnsembleStats,
    TrajectoryConfig,
    fit_saturation,
    reduce_records,
    resolve_workers,
    run_ensemble,
    run_trajectory,
)
from smfsim.errors import ConfigurationError, DataError, ExcessiveAborts
from smfsim.meanfield import solve_chf
from smfsim.model import ModelSpec

TINY = ModelSpec(n_grid=16, dx=0.8, n_orbitals=2, t3=3000.0, g0=500.0)


def _cfg(**kw):
    base = dict(scheme="smf-pair", dt=0.5, t_end=20.0, stride=2, n_traj=12, seed=3)
    base.update(kw)
    return TrajectoryConfig(**base)


def _same(a: EnsembleStats, b: EnsembleStats):
    for name in ("times", "mean_rms", "se_rms", "mean_msr", "delta_r", "mean_entropy",
                 "trace_defect", "idem_defect", "overlap_defect"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.sigma_mf == b.sigma_mf and a.fit == b.fit


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrajectoryConfig(scheme="nope")
    with pytest.raises(ConfigurationError):
        TrajectoryConfig(n_traj=0)
    with pytest.raises(ConfigurationError):
        TrajectoryConfig(dt=0.4, t_end=300.0, stride=7)
    with pytest.raises(ConfigurationError, match="trajectory.bogus"):
        TrajectoryConfig.from_dict({"bogus": 1})
    assert TrajectoryConfig.from_dict(_cfg().to_dict()) == _cfg()


def test_tdhf_has_no_spread():
    stats = run_ensemble(TINY, _cfg(scheme="tdhf", n_traj=5))
    assert np.all(np.abs(stats.delta_r) <= 1e-12)
    assert all(np.array_equal(r.msr, stats.records[0].msr) for r in stats.records)
    assert stats.fit is None


def test_lindblad_scheme_requires_interaction():
    with pytest.raises(ConfigurationError):
        run_ensemble(TINY, _cfg(scheme="lindblad-jump"))


def test_trajectory_reproducible_in_isolation():
    cfg = _cfg()
    init = solve_chf(TINY)
    stats = run_ensemble(TINY, cfg, initial=init)
    alone = run_trajectory(TINY, cfg, init, 7)
    assert np.array_equal(alone.msr, stats.records[7].msr)


def test_worker_count_does_not_change_results():
    cfg = _cfg(n_traj=9)
    _same(run_ensemble(TINY, cfg, workers=1), run_ensemble(TINY, cfg, workers=3))


def test_env_var_sets_workers(monkeypatch):
    monkeypatch.setenv("SMFSIM_WORKERS", "4")
    assert resolve_workers(None) == 4
    assert resolve_workers(2) == 2


def test_reduction_is_order_independent():
    cfg = _cfg()
    init = solve_chf(TINY)
    records = [run_trajectory(TINY, cfg, init, i) for i in range(cfg.n_traj)]
    a = reduce_records(TINY, cfg, init, records)
    b = reduce_records(TINY, cfg, init, records[::-1])
    _same(a, b)


def test_statistics_match_definitions():
    stats = run_ensemble(TINY, _cfg())
    msr = np.array([r.msr for r in stats.records])
    assert np.allclose(stats.delta_r, np.sqrt(np.mean((msr - msr.mean(0)) ** 2, 0)), rtol=1e-12, atol=1e-15)
    assert np.allclose(stats.mean_rms, np.sqrt(msr).mean(0), rtol=1e-14)
    assert np.all(stats.delta_r >= 0)
    assert stats.n_alive == 12 and stats.n_aborted == 0
    assert np.all(stats.trace_defect < 1e-10)
    assert np.all(stats.overlap_defect < 1e-8)


def test_excessive_aborts_fail():
    cfg = _cfg(n_traj=10)
    init = solve_chf(TINY)
    records = [run_trajectory(TINY, cfg, init, i) for i in range(10)]
    for r in records[:2]:
        r.aborted_at, r.abort_reason = 1.0, "near-singular pair overlap"
    with pytest.raises(ExcessiveAborts, match="near-singular"):
        reduce_records(TINY, cfg, init, records)
    records[1].aborted_at = None
    stats = reduce_records(TINY, cfg, init, records)
    assert stats.n_aborted == 1 and stats.n_alive == 9


def test_standard_error_shrinks_as_inverse_sqrt():
    se = {}
    for n in (50, 200, 800):
        stats = run_ensemble(TINY, _cfg(n_traj=n, t_end=10.0, stride=4))
        se[n] = float(np.mean(stats.se_rms[1:]))
    assert 1.5 <= se[50] / se[200] <= 2.7
    assert 1.5 <= se[200] / se[800] <= 2.7


def _curve(t, amp, rate):
    return amp * (1 - np.exp(-rate * t))


def test_fit_exact_curve():
    t = np.linspace(0, 300, 31)
    amp, rate, r2 = fit_saturation(t, _curve(t, 2.0, 0.05))
    assert amp == pytest.approx(2.0, rel=1e-4)
    assert rate == pytest.approx(0.05, rel=1e-4)
    assert r2 > 0.999999


@pytest.mark.parametrize("seed", [4, 5, 6])
def test_fit_noisy_curve(seed):
    t = np.linspace(0, 100, 41)
    y = _curve(t, 2.0, 0.05)
    y = y + 0.05 * y * np.random.default_rng(seed).standard_normal(len(t))
    amp, rate, r2 = fit_saturation(t, y)
    assert amp == pytest.approx(2.0, rel=0.05)
    assert rate == pytest.approx(0.05, rel=0.05)
    assert r2 > 0.95
    ref, _ = curve_fit(_curve, t, y, p0=[1.0, 0.1])
    assert np.allclose([amp, rate], ref, rtol=1e-4)
    ssr = lambda p: float(np.sum((y - _curve(t, *p)) ** 2))
    assert ssr((amp, rate)) <= ssr(ref) * (1 + 1e-6)


@pytest.mark.parametrize("t,y", [
    (np.linspace(0, 1, 25), np.r_[np.ones(24), np.nan]),
    (np.linspace(0, 1, 10), np.ones(10)),
    (np.linspace(1, 2, 25), np.ones(25)),
])
def test_fit_rejects_bad_input(t, y):
    with pytest.raises(DataError):
        fit_saturation(t, y)


def test_sigma_mf_is_quantal_width():
    stats = run_ensemble(TINY, _cfg(scheme="tdhf", n_traj=1))
    rho = solve_chf(TINY).density
    x2 = np.diag(TINY.x**2)
    expected = math.sqrt(np.trace(x2 @ rho @ x2 @ (np.eye(TINY.dim) - rho)).real)
    assert stats.sigma_mf == pytest.approx(expected, rel=1e-12)


def test_default_run_stays_weakly_coupled():
    st = run_ensemble(ModelSpec(), TrajectoryConfig(n_traj=12, seed=5))
    assert st.times[-1] == 300.0 and len(st.times) >= 20
    assert np.all(st.delta_r >= 0)
    assert st.delta_r.max() / st.sigma_mf < 0.5
