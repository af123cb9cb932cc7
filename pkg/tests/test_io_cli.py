import json

import numpy as np
import pytest

from aisil.cli import main
from aisil.io import DataError, load_config, load_returns, run_experiment, write_matrix_csv
from aisil.ssm import ConfigError
from aisil.sv import simulate_sv

# -- CSV ingestion ----------------------------------------------------------------------------


def write(path, text):
    path.write_text(text)
    return path


def test_prices_become_log_returns(tmp_path):
    p = write(tmp_path / "p.csv", "a,b\n100,50\n110,50\n99,25\n")
    y, names = load_returns(p, "prices")
    assert names == ["a", "b"]
    expect = np.diff(np.log([[100, 50], [110, 50], [99, 25]]), axis=0)
    assert np.array_equal(y, expect)


def test_returns_mode_is_bitwise_pass_through(tmp_path):
    vals = np.random.default_rng(0).standard_normal((7, 3)) * 1e-2
    write_matrix_csv(tmp_path / "r.csv", ["x", "y", "z"], vals)
    y, _ = load_returns(tmp_path / "r.csv", "returns")
    assert np.array_equal(y, vals)


def test_prices_shape(tmp_path):
    prices = np.exp(np.cumsum(np.random.default_rng(1).standard_normal((1001, 26)) * 0.01, axis=0))
    write_matrix_csv(tmp_path / "p.csv", [f"s{i}" for i in range(26)], prices)
    y, names = load_returns(tmp_path / "p.csv", "prices")
    assert y.shape == (1000, 26) and len(names) == 26


@pytest.mark.parametrize("body,line", [("1,2\n3\n", 3), ("1,2\n3,x\n", 3), ("1,2\n3,2\nnan,1\n", 4), ("1,\n", 2)])
def test_malformed_rows_report_line(tmp_path, body, line):
    p = write(tmp_path / "bad.csv", "a,b\n" + body)
    with pytest.raises(DataError, match=f":{line}:"):
        load_returns(p, "returns")


def test_non_positive_prices_rejected(tmp_path):
    with pytest.raises(DataError):
        load_returns(write(tmp_path / "p.csv", "a\n1\n0\n2\n"), "prices")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_returns(tmp_path / "nope.csv")


# -- configuration ----------------------------------------------------------------------------


def test_config_overrides_and_defaults(tmp_path):
    p = write(tmp_path / "c.toml", 'kernel = "hmc"\nn_cloud = 40\nseeds = [3, 4]\n')
    cfg = load_config(p, {"n_cloud": 60, "n_moves": None})
    assert cfg.kernel == "hmc" and cfg.n_cloud == 60 and cfg.seeds == [3, 4] and cfg.n_moves == 10


@pytest.mark.parametrize("text", ['kernel = "nuts"\n', "n_cloud = 0\n", "seeds = [1, 1]\n", "frobnicate = 3\n",
                                  "n_cloud = = 3\n"])
def test_bad_config_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "c.toml", text))


# -- simulation via the CLI --------------------------------------------------------------------


def test_flat_volatility_simulation_has_lognormal_scale():
    y, _ = simulate_sv({"mu": np.log(4.0), "phi": 0.5, "tau2": 0.0}, 200_000, np.random.default_rng(0))
    assert abs(y.var() / 4.0 - 1) < 4 * np.sqrt(2 / y.size)


def test_simulate_round_trip_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--T", "50", "--seed", "9", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "y.csv").read_bytes() == (tmp_path / "b" / "y.csv").read_bytes()
    y, names = load_returns(tmp_path / "a" / "y.csv")
    assert y.shape == (50, 1) and names == ["y"]


def test_simulate_factor_with_zero_loadings(tmp_path):
    theta = write(tmp_path / "t.json", json.dumps({"beta": 0.0}))
    assert main(["simulate", "--model", "factor", "--T", "3000", "--S", "3", "--K", "1", "--theta", str(theta),
                 "--out", str(tmp_path / "f")]) == 0
    y, _ = load_returns(tmp_path / "f" / "y.csv")
    states = np.loadtxt(tmp_path / "f" / "states.csv", delimiter=",", skiprows=1)
    f = states[:, -1]
    assert y.shape == (3000, 3)
    for s in range(3):
        assert abs(np.corrcoef(y[:, s], f)[0, 1]) < 4 / np.sqrt(3000)


def test_simulate_bad_factor_count(tmp_path):
    assert main(["simulate", "--model", "factor", "--S", "2", "--K", "3", "--out", str(tmp_path / "x")]) == 2


# -- fitting -----------------------------------------------------------------------------------


@pytest.fixture
def small_data(tmp_path):
    main(["simulate", "--T", "40", "--seed", "3", "--out", str(tmp_path / "data")])
    return tmp_path / "data" / "y.csv"


def small_fit_args(data, out, *extra):
    return ["fit", "--data", str(data), "--M", "20", "--N", "8", "--R", "1", "--seeds", "5", "--out", str(out), *extra]


def test_fit_writes_run_directory(tmp_path, small_data):
    assert main(small_fit_args(small_data, tmp_path / "run")) == 0
    run = tmp_path / "run" / "seed_5"
    for name in ("draws.csv", "state_mean_x.csv", "ladder.json", "summary.json", "timing.json", "kde/phi.csv"):
        assert (run / name).exists(), name
    assert sorted(p.name for p in (tmp_path / "run").glob("seed_*")) == ["seed_5"]
    ladder = json.loads((run / "ladder.json").read_text())
    assert ladder["ladder"][0] == 0.0 and ladder["ladder"][-1] == 1.0
    draws = np.loadtxt(run / "draws.csv", delimiter=",", skiprows=1)
    assert draws.shape == (20, 4) and abs(draws[:, -1].sum() - 1) < 1e-12


def test_fit_is_reproducible(tmp_path, small_data):
    for d in ("a", "b"):
        assert main(small_fit_args(small_data, tmp_path / d, "--kernel", "hmc", "--L", "5")) == 0
    a = (tmp_path / "a" / "seed_5" / "summary.json").read_bytes()
    assert a == (tmp_path / "b" / "seed_5" / "summary.json").read_bytes()


def test_factor_fit_runs(tmp_path):
    main(["simulate", "--model", "factor", "--T", "30", "--S", "2", "--K", "1", "--out", str(tmp_path / "d")])
    args = small_fit_args(tmp_path / "d" / "y.csv", tmp_path / "run", "--model", "factor", "--K", "1")
    assert main(args) == 0
    summary = json.loads((tmp_path / "run" / "seed_5" / "summary.json").read_text())
    assert len(summary["posterior_mean"]["beta"]) == 2 and summary["model"] == "factor"


def test_run_experiment_needs_data():
    from aisil.io import RunConfig
    with pytest.raises(ConfigError):
        run_experiment(RunConfig())


def test_aggregate_subcommand(tmp_path, small_data, capsys):
    main(small_fit_args(small_data, tmp_path / "run"))
    capsys.readouterr()
    assert main(["aggregate", str(tmp_path / "run"), "--out", str(tmp_path / "agg")]) == 0
    assert json.loads(capsys.readouterr().out)["n_runs"] == 1
    assert (tmp_path / "agg" / "aggregate.csv").exists()


def test_pf_variance_subcommand(tmp_path):
    main(["simulate", "--model", "factor", "--T", "20", "--S", "2", "--K", "1", "--out", str(tmp_path / "d")])
    out = tmp_path / "v.csv"
    assert main(["pf-variance", "--data", str(tmp_path / "d" / "y.csv"), "--N", "20,40", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


# -- exit codes ----------------------------------------------------------------------------------


def test_exit_code_config_error(tmp_path, small_data):
    assert main(small_fit_args(small_data, tmp_path / "r", "--ess-fraction", "1.5")) == 2


def test_exit_code_data_error(tmp_path):
    bad = write(tmp_path / "bad.csv", "y\n0.1\nfoo\n")
    assert main(small_fit_args(bad, tmp_path / "r")) == 3
    assert main(["aggregate", str(tmp_path / "empty"), "--out", str(tmp_path / "a")]) == 3


def test_exit_code_engine_abort_leaves_partial(tmp_path, small_data):
    cfg = write(tmp_path / "c.toml", "max_stages = 1\n")
    assert main(small_fit_args(small_data, tmp_path / "r", "--config", str(cfg))) == 4
    assert (tmp_path / "r" / "seed_5" / "PARTIAL").exists()
    assert not (tmp_path / "r" / "seed_5" / "summary.json").exists()


def test_check_subcommand(capsys):
    assert main(["check", "--iterations", "20000", "--a", "1.0"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_check_fails_without_enough_draws(capsys):
    # too few draws for the negative control to be rejected
    assert main(["check", "--iterations", "50", "--a", "1.0"]) == 5
