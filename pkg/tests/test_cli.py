import csv
import json
import shutil

import numpy as np
import pytest

from smfsim import cli
from smfsim.errors import ConfigurationError, ExcessiveAborts, NumericalStateError

TINY_MODEL = {"n_grid": 16, "dx": 0.8, "n_orbitals": 2, "t3": 3000.0, "g0": 500.0}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def tiny_config(**traj):
    trajectory = {"scheme": "smf-pair", "dt": 0.5, "t_end": 20.0, "stride": 1, "n_traj": 8, "seed": 9}
    trajectory.update(traj)
    return {"model": dict(TINY_MODEL), "trajectory": trajectory}


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def test_empty_file_is_a_parse_error(tmp_path, capsys):
    path = write_config(tmp_path, "   \n")
    with pytest.raises(ConfigurationError, match="empty"):
        cli.parse_config(path)
    assert run_cli("run", "--config", path, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigurationError, match="no such"):
        cli.parse_config(tmp_path / "absent.json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        cli.parse_config(write_config(tmp_path, "{not json"))


def test_unknown_key_names_its_path(tmp_path):
    data = tiny_config()
    data["model"]["t4"] = 1.0
    with pytest.raises(ConfigurationError, match="t4"):
        cli.parse_config(write_config(tmp_path, data))
    data = tiny_config(bogus=1)
    with pytest.raises(ConfigurationError, match="trajectory.bogus"):
        cli.parse_config(write_config(tmp_path, data))


def test_lindblad_without_interaction_is_rejected(tmp_path):
    for scheme in ("lindblad-jump", "lindblad-det"):
        with pytest.raises(ConfigurationError, match="interaction"):
            cli.parse_config(write_config(tmp_path, tiny_config(scheme=scheme)))


def test_flat_config_with_lambda_alias(tmp_path):
    path = write_config(tmp_path, {"g0": 500, "tau": 0.01, "lambda": 0.25, "n_traj": 200})
    model, cfg, interaction = cli.parse_config(path)
    assert model.g0 == 500.0 and model.tau == 0.01 and model.constraint == 0.25
    assert cfg.n_traj == 200 and cfg.scheme == "smf-pair"
    assert interaction is None


def test_local_interaction_section(tmp_path):
    data = tiny_config(scheme="lindblad-jump", n_traj=2, t_end=2.0)
    data["interaction"] = {"local": [{"lambda": 2.0, "power": 2}, {"lambda": 1.0, "power": 1}]}
    model, cfg, interaction = cli.parse_config(write_config(tmp_path, data))
    assert len(interaction) == 2
    assert interaction.commutation_defect() == 0.0
    assert np.allclose(np.diag(interaction.operators[0]), model.x**2)


def test_unstable_dt_is_a_config_error(tmp_path):
    path = write_config(tmp_path, tiny_config(dt=5.0, t_end=20.0))
    assert run_cli("run", "--config", path, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_bad_scheme_override(tmp_path):
    path = write_config(tmp_path, tiny_config())
    assert run_cli("run", "--config", path, "--out", tmp_path / "o", "--scheme", "nope") == cli.EXIT_CONFIG


def test_tdhf_run_has_zero_fluctuations(tmp_path, capsys):
    path = write_config(tmp_path, tiny_config(scheme="tdhf", n_traj=3))
    out = tmp_path / "tdhf"
    assert run_cli("run", "--config", path, "--out", out) == cli.EXIT_OK
    data = cli.read_timeseries(out / "timeseries.csv")
    assert np.all(data["delta_r_fm2"] == 0.0)
    summary = json.loads(capsys.readouterr().out)
    assert summary["fit"] is None and summary["n_alive"] == 3


def test_outputs_and_csv_round_trip(tmp_path):
    path = write_config(tmp_path, tiny_config())
    out = tmp_path / "pair"
    assert run_cli("run", "--config", path, "--out", out, "--dump-trajectories") == cli.EXIT_OK
    for name in ("timeseries.csv", "summary.json", "manifest.json", "run.log", "plot.gp", "trajectories.csv"):
        assert (out / name).is_file()
    series = cli.read_timeseries(out / "timeseries.csv")
    with open(out / "trajectories.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    msr = np.array([[float(v) for v in row[2:]] for row in rows if row[1] == "0"])
    assert msr.shape == (8, len(series["t_fm_c"]))
    delta = np.sqrt(np.mean((msr - msr.mean(axis=0)) ** 2, axis=0))
    assert np.abs(delta - series["delta_r_fm2"]).max() < 1e-12
    assert np.abs(np.sqrt(msr).mean(axis=0) - series["mean_rms_fm"]).max() < 1e-12
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["trajectory"]["seed"] == 9
    assert manifest["model"]["g0"] == 500.0
    assert "wall_time_s" not in json.dumps(manifest)


def test_rerun_from_manifest_is_bit_exact(tmp_path):
    path = write_config(tmp_path, tiny_config())
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--config", path, "--out", first) == cli.EXIT_OK
    assert run_cli("run", "--config", first / "manifest.json", "--out", second) == cli.EXIT_OK
    for name in ("timeseries.csv", "summary.json", "plot.gp"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    model, cfg, _ = cli.parse_config(first / "manifest.json")
    model0, cfg0, _ = cli.parse_config(path)
    assert model.to_dict() == model0.to_dict() and cfg == cfg0


def test_outputs_identical_across_worker_counts(tmp_path):
    path = write_config(tmp_path, tiny_config(n_traj=6))
    out = tmp_path / "run"
    names = ("timeseries.csv", "summary.json", "manifest.json")
    snapshots = []
    for workers in (1, 3):
        if out.exists():
            shutil.rmtree(out)
        assert run_cli("run", "--config", path, "--out", out, "--workers", workers) == cli.EXIT_OK
        snapshots.append({n: (out / n).read_bytes() for n in names})
    assert snapshots[0] == snapshots[1]


def test_env_var_sets_workers(tmp_path, monkeypatch):
    path = write_config(tmp_path, tiny_config(n_traj=4))
    monkeypatch.setenv("SMFSIM_WORKERS", "2")
    assert run_cli("run", "--config", path, "--out", tmp_path / "e") == cli.EXIT_OK
    assert "workers 2" in (tmp_path / "e" / "run.log").read_text()


def test_seed_and_traj_overrides(tmp_path, capsys):
    path = write_config(tmp_path, tiny_config())
    assert run_cli("run", "--config", path, "--out", tmp_path / "s", "--seed", 4, "--traj", 3) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["n_traj"] == 3
    assert json.loads((tmp_path / "s" / "manifest.json").read_text())["trajectory"]["seed"] == 4


def test_unwritable_output_fails_before_running(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")
    called = []
    monkeypatch.setattr(cli, "run_ensemble", lambda *a, **k: called.append(1))
    path = write_config(tmp_path, tiny_config())
    assert run_cli("run", "--config", path, "--out", blocker / "sub") == cli.EXIT_CONFIG
    assert not called


@pytest.mark.parametrize("exc, code", [
    (NumericalStateError("bad density"), cli.EXIT_NUMERICAL),
    (ExcessiveAborts("3/8 trajectories aborted"), cli.EXIT_ABORTS),
])
def test_failure_exit_codes(tmp_path, monkeypatch, exc, code):
    def boom(*a, **k):
        raise exc
    monkeypatch.setattr(cli, "run_ensemble", boom)
    path = write_config(tmp_path, tiny_config())
    assert run_cli("run", "--config", path, "--out", tmp_path / "x") == code


def test_fit_command(tmp_path, capsys):
    path = write_config(tmp_path, tiny_config(n_traj=6, t_end=20.0))
    out = tmp_path / "f"
    assert run_cli("run", "--config", path, "--out", out) == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert run_cli("fit", "--csv", out / "timeseries.csv") == cli.EXIT_OK
    fit = json.loads(capsys.readouterr().out)
    assert fit["delta0_fm2"] == pytest.approx(summary["fit"]["delta0_fm2"], rel=1e-9)
    assert fit["gamma0_per_fm_c"] == pytest.approx(summary["fit"]["gamma0_per_fm_c"], rel=1e-9)


def test_fit_rejects_foreign_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert run_cli("fit", "--csv", bad) == cli.EXIT_NUMERICAL


def test_compare_reports_amplitude_ratio(tmp_path, capsys):
    path = write_config(tmp_path, tiny_config(n_traj=6))
    out = tmp_path / "cmp"
    assert run_cli("compare", "--config", path, "--out", out, "--g0", "100,400", "--no-plot") == cli.EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert [r["g0"] for r in result["runs"]] == [100.0, 400.0]
    assert result["runs"][1]["g0_ratio"] == 4.0
    assert result["runs"][0]["delta0_ratio"] == 1.0
    assert result["runs"][1]["delta0_ratio"] > 1.0
    assert json.loads((out / "comparison.json").read_text()) == result
    assert (out / "g0_100" / "timeseries.csv").is_file()


def test_selftest_command(capsys):
    assert run_cli("selftest") == cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
