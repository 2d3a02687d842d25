import json

import numpy as np
import pytest

from rhbsde import cli
from rhbsde.config import ConfigError, Expr, build_experiment, load_config
from rhbsde.io import read_bundle, read_csv, write_bundle, write_csv
from rhbsde.paths import Deterministic, ExitOfBox, TimeGrid, VolatilitySpec, simulate_paths
from rhbsde.runner import RunContext, convergence_sweep


def _raw(**over):
    raw = {
        "schema_version": 1,
        "experiment": {"name": "t", "kind": "bsde", "seed": 3},
        "problem": {
            "generator": {"expr": "-mu*y", "lipschitz_L": 0.5, "monotone_mu": 0.5},
            "constants": {"mu": 0.5},
            "terminal": {"expr": "1.0"},
            "stopping": {"kind": "deterministic", "horizon": 1.0},
        },
        "numerics": {"n_steps": 16, "n_paths": 400, "basis": {"kind": "polynomial", "degree": 1}},
    }
    for k, v in over.items():
        sec, key = k.split("__")
        raw[sec][key] = v
    return raw


SMALL_BSDE = """
schema_version = 1
[experiment]
kind = "bsde"
seed = 4
[problem]
generator = { expr = "0" }
terminal = { expr = "x**2" }
stopping = { kind = "deterministic", horizon = 1.0 }
[numerics]
n_steps = 8
n_paths = 500
basis = { kind = "polynomial", degree = 2 }
[[checks]]
name = "value_reference"
expected = %s
rel_tol = 0.1
"""


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# --- configuration ------------------------------------------------------------------


def test_build_experiment_defaults():
    exp = build_experiment(_raw())
    assert exp.kind == "bsde" and exp.seed == 3 and exp.grid.n_steps == 16
    assert isinstance(exp.rule, Deterministic)
    assert exp.gen.lipschitz_L == 0.5 and exp.gen.monotone_mu == 0.5
    assert exp.config_hash == build_experiment(_raw()).config_hash


def test_exit_box_and_family():
    raw = _raw(problem__stopping={"kind": "exit_box", "lower": -1.0, "upper": 1.0})
    raw["numerics"]["horizon_cap"] = 4.0
    assert isinstance(build_experiment(raw).rule, ExitOfBox)
    raw2 = _raw(experiment__kind="2bsde", problem__family={"sigmas": [1.0, 2.0]})
    assert len(build_experiment(raw2).family.members) == 2


@pytest.mark.parametrize("over, fragment", [
    ({"experiment__seed": None}, "seed is required"),
    ({"experiment__seed": -1}, "nonnegative"),
    ({"experiment__kind": "3bsde"}, "experiment.kind"),
    ({"experiment__kind": "2bsde"}, "needs a [problem.family]"),
    ({"numerics__n_paths": 1}, "n_paths"),
    ({"numerics__z_mode": "finite"}, "z_mode"),
    ({"numerics__step_h": 0.9}, "Picard guard"),
])
def test_config_errors(over, fragment):
    raw = _raw(**over)
    if over.get("experiment__seed", 0) is None:
        del raw["experiment"]["seed"]
    with pytest.raises(ConfigError) as exc:
        build_experiment(raw)
    assert any(fragment in p for p in exc.value.problems)


def test_unknown_check_and_window():
    raw = _raw()
    raw["checks"] = [{"name": "nonsense"}, {"name": "apriori", "p": 2.0, "etas": [-0.9]}]
    with pytest.raises(ConfigError) as exc:
        build_experiment(raw)
    msgs = " ".join(exc.value.problems)
    assert "unknown check" in msgs and "eta=-0.9" in msgs


def test_schema_version_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        build_experiment(dict(_raw(), schema_version=2))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "not = [valid"))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_expression_whitelist():
    e = Expr("maximum(x - k, 0) + exp(-t)", ("x", "t"), {"k": 1.0})
    np.testing.assert_allclose(e(x=np.array([0.0, 2.0]), t=0.0), [1.0, 2.0])
    for bad in ("__import__('os')", "x.real", "open('f')", "[x for x in y]", "lambda: 1", "z + 1", "1 +"):
        with pytest.raises(ConfigError):
            Expr(bad, ("x", "t"))


def test_shipped_configs_load(configs_dir):
    for path in sorted(configs_dir.glob("*.toml")):
        exp = load_config(path)
        assert exp.seed >= 0 and exp.grid.n_steps > 0


# --- io ---------------------------------------------------------------------------------


@pytest.mark.parametrize("rule", [Deterministic(1.0), ExitOfBox([-0.5], [0.5])])
def test_bundle_round_trip(tmp_path, rule):
    b = simulate_paths(VolatilitySpec.from_constant(0.7), rule, TimeGrid(0.1, 10), 50, 9, initial_offset=[0.1])
    write_bundle(b, tmp_path / "b.rhbp")
    r = read_bundle(tmp_path / "b.rhbp")
    np.testing.assert_array_equal(r.X, b.X)
    np.testing.assert_array_equal(r.W, b.W)
    np.testing.assert_array_equal(r.stop_index, b.stop_index)
    np.testing.assert_array_equal(np.asarray(r.sigma_samples), np.asarray(b.sigma_samples))
    assert r.grid == b.grid and r.seed == b.seed
    (tmp_path / "junk").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        read_bundle(tmp_path / "junk")


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": 1.5}]
    write_csv(rows, tmp_path / "t.csv")
    back = read_csv(tmp_path / "t.csv")
    assert [float(r["b"]) for r in back] == [0.5, 1.5]


# --- CLI -----------------------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, SMALL_BSDE % "1.0", "good.toml")
    bad = _write(tmp_path, SMALL_BSDE % "5.0", "bad.toml")
    broken = _write(tmp_path, SMALL_BSDE.replace("seed = 4", "") % "1.0", "broken.toml")
    assert cli.main(["check", "--config", good, "--out", str(tmp_path / "g")]) == 0
    assert cli.main(["check", "--config", bad, "--out", str(tmp_path / "b")]) == 1
    assert cli.main(["check", "--config", broken, "--out", str(tmp_path / "x")]) == 2
    assert "seed is required" in capsys.readouterr().err
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["checks"][0]["passed"] is False


def test_list_checks(capsys):
    assert cli.main(["list-checks"]) == 0
    out = capsys.readouterr().out
    for name in ("comparison_bsde", "skorokhod", "dpp", "minimality", "doob", "determinism"):
        assert name in out


def test_simulate_writes_bundle(tmp_path):
    cfg = _write(tmp_path, SMALL_BSDE % "1.0")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    b = read_bundle(tmp_path / "s" / "paths.rhbp")
    assert b.n_paths == 500 and b.grid.n_steps == 8


def test_manifest_rerun_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL_BSDE % "1.0")
    assert cli.main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "a"), "--format", "json"]) == 0
    man = tmp_path / "a" / "manifest.json"
    assert json.loads(man.read_text())["seed"] == 4
    assert cli.main(["solve-bsde", "--config", str(man), "--out", str(tmp_path / "b"), "--format", "json"]) == 0
    for name in ("summary.json", "surface.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_result(tmp_path):
    cfg = _write(tmp_path, SMALL_BSDE % "1.0")
    cli.main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "a"), "--format", "json"])
    cli.main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "b"), "--format", "json", "--seed", "99"])
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert a != b


def test_smoke_config(configs_dir, tmp_path, capsys):
    assert cli.main(["run", "--config", str(configs_dir / "smoke.toml"), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["solution"]["Y0_mean"] == 1.0
    assert (tmp_path / "surface.csv").exists() and (tmp_path / "checks.csv").exists()


def test_g_heat_config_with_plots(configs_dir, tmp_path):
    raw_text = (configs_dir / "g_heat.toml").read_text().replace("n_paths = 100000", "n_paths = 20000")
    cfg = _write(tmp_path, raw_text)
    assert cli.main(["solve-2bsde", "--config", cfg, "--out", str(tmp_path / "o"), "--plots"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["solution"]["V0"] == pytest.approx(4.0, rel=0.05)
    assert (tmp_path / "o" / "value_surface.png").stat().st_size > 0


def test_bsde_plots(tmp_path):
    cfg = _write(tmp_path, SMALL_BSDE % "1.0")
    assert cli.main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "p"), "--plots"]) == 0
    for name in ("paths.png", "value_surface.png"):
        assert (tmp_path / "p" / name).stat().st_size > 0


def test_rbsde_plots(configs_dir, tmp_path):
    text = (configs_dir / "obstacle_exit.toml").read_text().replace("n_paths = 4000", "n_paths = 300")
    text = text.replace("horizon_cap = 16.0", "horizon_cap = 2.0")
    cfg = _write(tmp_path, text)
    cli.main(["solve-rbsde", "--config", cfg, "--out", str(tmp_path / "r"), "--plots"])
    assert (tmp_path / "r" / "obstacle.png").stat().st_size > 0


# --- sweeps ---------------------------------------------------------------------------------


def test_h_sweep_order(configs_dir):
    exp = load_config(configs_dir / "discounting.toml").with_overrides(n_paths=200)
    sw = convergence_sweep(exp, "h")
    assert sw.order >= 0.8
    assert sw.errors == sorted(sw.errors, reverse=True)


def test_n_paths_sweep_order(configs_dir):
    exp = load_config(configs_dir / "martingale.toml")
    exp.sweep["n_paths"] = [2000, 8000, 32000]
    exp = exp.with_overrides(grid=TimeGrid(1 / 16, 16))
    sw = convergence_sweep(exp, "n_paths")
    assert 0.4 <= sw.order <= 0.6


def test_truncation_sweep_monotone(configs_dir):
    exp = load_config(configs_dir / "obstacle_exit.toml").with_overrides(n_paths=1000)
    sw = convergence_sweep(exp, "truncation")
    assert sw.extra["strictly_decreasing"]
    with pytest.raises(ValueError):
        convergence_sweep(exp, "mesh")


def test_run_context_caches(configs_dir):
    ctx = RunContext(load_config(configs_dir / "smoke.toml"))
    assert ctx.bundle is ctx.bundle and ctx.solution is ctx.solution
