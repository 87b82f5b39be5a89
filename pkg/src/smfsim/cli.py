"""Command-line front end: run, fit, compare, selftest."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .ensemble import EnsembleStats, TrajectoryConfig, fit_saturation, resolve_workers, run_ensemble
from .errors import ConfigurationError, DataError, ExcessiveAborts, SimulationError
from .lindblad import PHInteraction
from .model import ModelSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ABORTS = 0, 2, 3, 4
CSV_HEADER = ["t_fm_c", "mean_rms_fm", "delta_r_fm2", "entropy", "trace_defect", "idem_defect", "n_alive"]
_MODEL_KEYS = {f.name for f in fields(ModelSpec)} | {"hbar_c"}
_TRAJ_KEYS = {f.name for f in fields(TrajectoryConfig)}
_ALIASES = {"lambda": "constraint"}


@dataclass
class RunManifest:
    config_path: str
    model: ModelSpec
    trajectory: TrajectoryConfig
    interaction: PHInteraction | None
    version: str
    seed: int
    output_dir: str
    wall_time_s: float | None = None

    def to_dict(self) -> dict[str, Any]:
        """Deterministic part only; wall time goes to run.log so outputs stay byte-stable."""
        out = {
            "model": self.model.to_dict(),
            "trajectory": self.trajectory.to_dict(),
            "manifest": {
                "config_path": self.config_path,
                "version": self.version,
                "seed": self.seed,
                "output_dir": self.output_dir,
            },
        }
        if self.interaction is not None:
            out["interaction"] = self.interaction.to_dict()
        return out


# -- configuration --------------------------------------------------------------------

def _local_interaction(model: ModelSpec, terms: Any, path: str) -> PHInteraction:
    """Diagonal operators x^power with given strengths (a commuting set)."""
    if not isinstance(terms, list) or not terms:
        raise ConfigurationError(f"{path}: expected a non-empty list")
    lams, ops = [], []
    for i, term in enumerate(terms):
        p = f"{path}[{i}]"
        if not isinstance(term, dict) or set(term) - {"lambda", "power"} or "lambda" not in term:
            raise ConfigurationError(f"{p}: expected {{'lambda': float, 'power': int}}")
        lams.append(float(term["lambda"]))
        ops.append(np.diag(model.x ** int(term.get("power", 2))).astype(complex))
    return PHInteraction(tuple(lams), tuple(ops))


def config_from_dict(data: Any) -> tuple[ModelSpec, TrajectoryConfig, PHInteraction | None]:
    if not isinstance(data, dict) or not data:
        raise ConfigurationError("config: expected a non-empty JSON object")
    model_d: dict[str, Any] = {}
    traj_d: dict[str, Any] = {}
    inter_d = None
    for key, value in data.items():
        if key == "model":
            if not isinstance(value, dict):
                raise ConfigurationError("model: expected an object")
            for k, v in value.items():
                model_d[_ALIASES.get(k, k)] = v
        elif key == "trajectory":
            if not isinstance(value, dict):
                raise ConfigurationError("trajectory: expected an object")
            traj_d.update(value)
        elif key == "interaction":
            inter_d = value
        elif key == "manifest":
            if not isinstance(value, dict):
                raise ConfigurationError("manifest: expected an object")
        elif _ALIASES.get(key, key) in _MODEL_KEYS:
            model_d[_ALIASES.get(key, key)] = value
        elif key in _TRAJ_KEYS:
            traj_d[key] = value
        else:
            raise ConfigurationError(f"{key}: unknown key")
    model = ModelSpec.from_dict(model_d)
    cfg = TrajectoryConfig.from_dict(traj_d)
    interaction = None
    if inter_d is not None:
        if isinstance(inter_d, dict) and set(inter_d) == {"local"}:
            interaction = _local_interaction(model, inter_d["local"], "interaction.local")
        else:
            interaction = PHInteraction.from_dict(inter_d)
        if interaction.dim != model.dim:
            raise ConfigurationError(f"interaction: dimension {interaction.dim} != model dimension {model.dim}")
    if cfg.scheme in ("lindblad-det", "lindblad-jump") and interaction is None:
        raise ConfigurationError(f"trajectory.scheme: {cfg.scheme} requires an 'interaction' section")
    model.check_dt(cfg.dt)
    return model, cfg, interaction


def parse_config(path: str | Path) -> tuple[ModelSpec, TrajectoryConfig, PHInteraction | None]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"{path}: no such config file")
    text = path.read_text()
    if not text.strip():
        raise ConfigurationError(f"{path}: empty config file")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


# -- output ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17e}"


def _dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def preflight(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from None


def summary_dict(stats: EnsembleStats, cfg: TrajectoryConfig) -> dict[str, Any]:
    fit = None
    if stats.fit is not None:
        fit = {"delta0_fm2": stats.fit[0], "gamma0_per_fm_c": stats.fit[1], "r2": stats.fit[2]}
    return {
        "scheme": cfg.scheme,
        "n_traj": cfg.n_traj,
        "n_alive": stats.n_alive,
        "n_aborted": stats.n_aborted,
        "sigma_mf_fm2": stats.sigma_mf,
        "fit": fit,
        "max_delta_r_fm2": float(stats.delta_r.max()),
        "max_trace_defect": float(stats.trace_defect.max()),
        "max_idem_defect": float(stats.idem_defect.max()),
        "max_overlap_defect": float(stats.overlap_defect.max()),
        "version": __version__,
    }


PLOT_SCRIPT = """# gnuplot script: rms evolution and fluctuation growth
set datafile separator ','
set terminal pngcairo size 800,900
set output 'panels.png'
set multiplot layout 2,1
set xlabel 't (fm/c)'
set ylabel 'rms (fm)'
plot 'timeseries.csv' every ::1 using 1:2 with linespoints pt 7 title 'mean rms'
set ylabel 'Delta_r (fm^2)'
f(x) = d0*(1-exp(-g0*x))
d0 = {d0}
g0 = {g0}
plot 'timeseries.csv' every ::1 using 1:3 with points pt 6 title 'Delta_r', f(x) title 'saturation fit'
unset multiplot
"""


def emit_results(stats: EnsembleStats, manifest: RunManifest, plot: bool = True,
                 dump_trajectories: bool = False) -> None:
    out = Path(manifest.output_dir)
    with open(out / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k, t in enumerate(stats.times):
            w.writerow([_fmt(t), _fmt(stats.mean_rms[k]), _fmt(stats.delta_r[k]), _fmt(stats.mean_entropy[k]),
                        _fmt(stats.trace_defect[k]), _fmt(stats.idem_defect[k]), str(stats.n_alive)])
    _dump_json(out / "summary.json", summary_dict(stats, manifest.trajectory))
    if dump_trajectories:
        with open(out / "trajectories.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trajectory", "aborted"] + [f"msr_t{_fmt(t)}" for t in stats.times])
            for r in stats.records:
                w.writerow([r.trajectory, int(r.aborted_at is not None)] + [_fmt(v) for v in r.msr])
    if plot:
        d0, g0 = stats.fit[:2] if stats.fit else (0.0, 0.0)
        (out / "plot.gp").write_text(PLOT_SCRIPT.format(d0=repr(d0), g0=repr(g0)))


def read_timeseries(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise DataError(f"{path}: unexpected CSV header")
    cols = list(zip(*rows[1:]))
    return {name: np.array(col, dtype=float) for name, col in zip(CSV_HEADER, cols)}


# -- commands -------------------------------------------------------------------------

def _apply_overrides(model, cfg, args):
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.traj is not None:
        changes["n_traj"] = args.traj
    if args.scheme is not None:
        changes["scheme"] = args.scheme
    try:
        cfg = replace(cfg, **changes)
    except ConfigurationError as exc:
        raise ConfigurationError(f"command line: {exc}") from None
    return model, cfg


def _execute(config_path: str, model, cfg, interaction, out: Path, workers, plot, dump) -> EnsembleStats:
    if cfg.scheme in ("lindblad-det", "lindblad-jump") and interaction is None:
        raise ConfigurationError(f"scheme {cfg.scheme} requires an interaction section")
    preflight(out)
    workers = resolve_workers(workers)
    manifest = RunManifest(config_path, model, cfg, interaction, __version__, cfg.seed, str(out))
    _dump_json(out / "manifest.json", manifest.to_dict())
    start = time.perf_counter()
    stats = run_ensemble(model, cfg, interaction, workers=workers)
    manifest.wall_time_s = time.perf_counter() - start
    emit_results(stats, manifest, plot=plot, dump_trajectories=dump)
    (out / "run.log").write_text(f"wall_time_s {manifest.wall_time_s:.3f}\nworkers {workers}\n")
    return stats


def cmd_run(args) -> int:
    model, cfg, interaction = parse_config(args.config)
    model, cfg = _apply_overrides(model, cfg, args)
    stats = _execute(args.config, model, cfg, interaction, Path(args.out), args.workers,
                     not args.no_plot, args.dump_trajectories)
    print(json.dumps(summary_dict(stats, cfg), sort_keys=True))
    return EXIT_OK


def cmd_fit(args) -> int:
    data = read_timeseries(args.csv)
    amp, rate, r2 = fit_saturation(data["t_fm_c"], data["delta_r_fm2"])
    print(json.dumps({"delta0_fm2": amp, "gamma0_per_fm_c": rate, "r2": r2}, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    model, cfg, interaction = parse_config(args.config)
    model, cfg = _apply_overrides(model, cfg, args)
    out = Path(args.out)
    preflight(out)
    g0s = [float(g) for g in args.g0.split(",")]
    rows = []
    for g in g0s:
        stats = _execute(args.config, model.with_(g0=g), cfg, interaction, out / f"g0_{g:g}", args.workers,
                         not args.no_plot, False)
        if stats.fit is None:
            raise DataError("compare needs a stochastic scheme with a saturation fit")
        rows.append({"g0": g, "delta0_fm2": stats.fit[0], "gamma0_per_fm_c": stats.fit[1], "r2": stats.fit[2],
                     "max_delta_r_over_sigma_mf": float(stats.delta_r.max() / stats.sigma_mf)})
    base = rows[0]
    for r in rows:
        r["delta0_ratio"] = r["delta0_fm2"] / base["delta0_fm2"]
        r["g0_ratio"] = r["g0"] / base["g0"]
    rates = [r["gamma0_per_fm_c"] for r in rows]
    result = {"runs": rows, "gamma0_spread": (max(rates) - min(rates)) / (sum(rates) / len(rates))}
    _dump_json(out / "comparison.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(verbose=True)
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smfsim", description="Stochastic mean-field simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out=True):
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override master seed")
        sp.add_argument("--traj", type=int, help="override number of trajectories")
        sp.add_argument("--scheme", help="override scheme (tdhf, smf-pair, lindblad-det, lindblad-jump)")
        sp.add_argument("--out", required=need_out, help="output directory")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $SMFSIM_WORKERS or 1)")
        sp.add_argument("--no-plot", action="store_true", help="skip the gnuplot script")

    r = sub.add_parser("run", help="run one ensemble and write timeseries.csv + summary.json")
    common(r)
    r.add_argument("--dump-trajectories", action="store_true", help="also write per-trajectory <x^2> series")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit", help="fit the saturation law to the delta_r column of a timeseries.csv")
    f.add_argument("--csv", required=True)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="run several g0 values and compare fitted amplitudes")
    common(c)
    c.add_argument("--g0", default="100,250,500", help="comma-separated g0 values")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", help="run the structural invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExcessiveAborts as exc:
        print(f"excessive aborts: {exc}", file=sys.stderr)
        return EXIT_ABORTS
    except (SimulationError, OSError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
