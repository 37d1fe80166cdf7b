import json
import subprocess
import sys

import pytest

from vbgmm.cli import EXIT_ERROR, EXIT_GATE, EXIT_OK, main

SMALL = {"replications": 4, "mc": {"info_samples": 20_000, "tv_samples": 10_000, "tail_samples": 10_000}}


def write_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **kw}))
    return str(path)


def test_fit_prints_json(capsys, tmp_path):
    assert main(["fit", "--n", "300", "--p", "2", "--w", "10", "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["converged"] and out["n"] == 300 and len(out["m"]) == 2
    assert out["mse"] < 0.1
    assert (tmp_path / "fit_trace.csv").exists() and (tmp_path / "fit_data.csv").exists()


def test_fit_reads_csv(capsys, tmp_path):
    main(["fit", "--n", "100", "--p", "1", "--out", str(tmp_path)])
    first = json.loads(capsys.readouterr().out)
    assert main(["fit", "--data", str(tmp_path / "fit_data.csv"), "--sigma2", "25"]) == EXIT_OK
    again = json.loads(capsys.readouterr().out)
    assert again["n"] == 100 and again["mse"] is None
    assert again["final_elbo"] == pytest.approx(first["final_elbo"], rel=1e-12)


def test_global_flags_after_subcommand(capsys):
    assert main(["--seed", "5", "fit", "--n", "50"]) == EXIT_OK
    a = capsys.readouterr().out
    assert main(["fit", "--n", "50", "--seed", "5"]) == EXIT_OK
    assert capsys.readouterr().out == a


@pytest.mark.parametrize("argv", [
    ["fit", "--init", "kmeans"],
    ["nonsense"],
    ["fit", "--jobs", "0"],
    ["table1", "--config", "/does/not/exist.json"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_ERROR


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"replicates": 3}))
    assert main(["table1", "--config", str(path)]) == EXIT_ERROR
    assert "unknown config keys" in capsys.readouterr().err


def test_numerical_error_exit_code(tmp_path, capsys):
    path = tmp_path / "huge.csv"
    path.write_text("obs_id,label,x_1\n1,1,1e200\n2,2,-1e200\n3,1,3e200\n")
    with pytest.warns(RuntimeWarning):
        assert main(["fit", "--data", str(path), "--sigma2", "1"]) == EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_gate_failure_and_no_gate(tmp_path, capsys):
    # a two-point grid with two replications may land on either side of the slope band
    cfg = write_config(tmp_path, grid={"n": [50, 51], "p": [2], "sigma2_w": [[25, 10]]}, replications=2)
    code = main(["rates", "--config", cfg, "--out", str(tmp_path / "r")])
    out = json.loads(capsys.readouterr().out)
    assert code == (EXIT_OK if out["slope_in_band"] else EXIT_GATE)
    assert main(["rates", "--config", cfg, "--out", str(tmp_path / "r"), "--no-gate"]) == EXIT_OK


def test_table1_small(tmp_path, capsys):
    cfg = write_config(tmp_path, grid={"n": [1000], "p": [2], "sigma2_w": [[25, 10]]}, replications=20)
    code = main(["table1", "--config", cfg, "--out", str(tmp_path / "t"), "--jobs", "2"])
    out = json.loads(capsys.readouterr().out)
    assert out["cells"] == 1 and out["gated_cells"] == 1
    assert code == (EXIT_GATE if out["gate_failures"] else EXIT_OK)
    assert (tmp_path / "t" / "table1.csv").exists()


def test_study_commands_run(tmp_path, capsys):
    cfg = write_config(tmp_path, grid={"n": [300, 1200], "p": [1], "sigma2_w": [[25, 10]]}, replications=25)
    for cmd in ("normality", "bvm"):
        assert main([cmd, "--config", cfg, "--out", str(tmp_path / cmd), "--no-gate"]) == EXIT_OK
        json.loads(capsys.readouterr().out)
    assert main(["diagnose", "--config", cfg, "--out", str(tmp_path / "diagnose")]) == EXIT_OK
    assert set(json.loads(capsys.readouterr().out)) >= {"delta_n", "tv_estimate"}
    assert (tmp_path / "bvm" / "bvm.csv").exists()
    assert (tmp_path / "diagnose" / "diagnose.json").exists()


def test_too_few_replications_for_ks(tmp_path, capsys):
    cfg = write_config(tmp_path, grid={"n": [300], "p": [1], "sigma2_w": [[25, 10]]})
    assert main(["normality", "--config", cfg, "--out", str(tmp_path)]) == EXIT_ERROR
    assert "at least 20" in capsys.readouterr().err


def test_tailscan(tmp_path, capsys):
    assert main(["tailscan", "--out", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["mc_within_4se"] and out["envelope_ok"]
    assert (tmp_path / "tailscan.csv").exists()


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "vbgmm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("fit", "table1", "rates", "normality", "bvm", "tailscan", "bridge-gap", "diagnose"):
        assert cmd in out.stdout
