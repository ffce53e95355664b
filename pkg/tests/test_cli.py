import csv
import hashlib
import json
import time

import pytest

from dpmixcox.cli import EXIT_INPUT, EXIT_OK, FIT_KEYS, SIMEX_KEYS, SIMULATE_KEYS, main
from dpmixcox.data import demo_dataset_path

DEMO = str(demo_dataset_path())
FAST = ["--n-iter", "3000", "--n-burn", "1000", "--chains", "2"]


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_demo_fit_smoke(tmp_path):
    t0 = time.time()
    code = main(["fit", DEMO, "--out", str(tmp_path), "--seed", "1"])
    assert time.time() - t0 < 60
    assert code in (EXIT_OK, 3)
    summary = rows(tmp_path / "summary.csv")
    assert list(summary[0]) == ["param", "coef", "hr", "hr_lower", "hr_upper", "bf10"]
    assert summary[0]["param"] == "beta_x"
    for name in ("posterior-draws.csv", "bayes-factor.json", "diagnostics.json", "manifest.json"):
        assert (tmp_path / name).exists()
    bf = json.loads((tmp_path / "bayes-factor.json").read_text())
    assert bf["bf10"] > 0 and bf["bandwidth"] > 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 1


def test_missing_event_column_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,w\n1.0,2\n2.0,3\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "event" in capsys.readouterr().err


def test_prior_sensitivity_table(tmp_path):
    main(["fit", DEMO, "--out", str(tmp_path), "--seed", "2", "--prior-sensitivity"] + FAST)
    table = rows(tmp_path / "prior-sensitivity.csv")
    assert [r["prior"] for r in table] == ["N(0,0.01)", "N(0,1)", "N(0,10)", "N(0,100)", "Cauchy(0,1)"]
    assert all(float(r["bf10"]) > 0 for r in table)


def test_fit_is_deterministic_under_a_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["fit", DEMO, "--out", str(a), "--seed", "3"] + FAST)
    main(["fit", DEMO, "--out", str(b), "--seed", "3"] + FAST)
    for name in ("posterior-draws.csv", "summary.csv", "bayes-factor.json"):
        assert digest(a / name) == digest(b / name)


def test_simulate_smoke(tmp_path):
    t0 = time.time()
    code = main(["simulate", "--scenario", "2", "--reps", "10", "--estimators", "naive,true",
                 "--out", str(tmp_path), "--seed", "4"])
    assert code == EXIT_OK and time.time() - t0 < 10
    assert len(rows(tmp_path / "metrics.csv")) == 4
    assert len(rows(tmp_path / "raw-estimates.csv")) == 20


def test_simulate_from_config_file(tmp_path):
    cfg = tmp_path / "sc.conf"
    cfg.write_text("scenario = 9\nn_reps = 10\nn = 50\n")
    assert main(["simulate", str(cfg), "--estimators", "naive", "--out", str(tmp_path / "o"), "--seed", "5"]) == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["settings"]["scenario"]["latent"] == "uniform"
    assert manifest["settings"]["scenario"]["n"] == 50


def test_unknown_estimator_exits_2(tmp_path, capsys):
    code = main(["simulate", "--scenario", "2", "--reps", "2", "--estimators", "naive,oracle", "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    err = capsys.readouterr().err
    assert "oracle" in err and "dp_mix" in err


def test_parity_flag_reaches_the_manifest(tmp_path):
    main(["simulate", "--scenario", "2", "--parity", "--reps", "1", "--estimators", "naive", "--out", str(tmp_path)])
    settings = json.loads((tmp_path / "manifest.json").read_text())["settings"]
    assert settings["parity"] is True
    assert settings["mcmc"]["n_iter"] == 200_000 and settings["mcmc"]["n_burn"] == 100_000


def test_simex_curve_and_bootstrap(tmp_path):
    assert main(["simex", DEMO, "--out", str(tmp_path), "--seed", "6", "--bootstrap", "200"]) == EXIT_OK
    curve = rows(tmp_path / "simex-curve.csv")
    assert [float(r["lambda"]) for r in curve] == [0.0, 0.5, 1.0, 1.5, 2.0]
    summary = rows(tmp_path / "simex-summary.csv")
    assert summary[0]["param"] == "beta_x"
    assert all(float(r["se"]) > 0 for r in summary)


def test_simex_grid_must_start_at_zero(tmp_path, capsys):
    cfg = tmp_path / "s.conf"
    cfg.write_text("lambda_grid = 0.5, 1, 2\n")
    assert main(["simex", DEMO, "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "f.conf"
    cfg.write_text("n_iterations = 5\n")
    assert main(["fit", DEMO, "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT


@pytest.mark.parametrize("cmd,keys", [("fit", FIT_KEYS), ("simulate", SIMULATE_KEYS), ("simex", SIMEX_KEYS)])
def test_help_lists_config_keys(cmd, keys, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for line in keys.splitlines()[1:]:
        if line.strip():
            assert line.split()[0] in out


def test_inconsistent_chain_lengths_exit_2(tmp_path):
    assert main(["fit", DEMO, "--out", str(tmp_path), "--n-iter", "100", "--n-burn", "500"]) == EXIT_INPUT
