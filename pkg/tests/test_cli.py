import json
import os

import pytest

from adapttikh import cli
from adapttikh.cli import ConfigError, RunConfig, main
from adapttikh.errors import NumericalFailure


def small_config(tmp_path, **sections):
    data = {"mesh": {"n_boundary": 16, "levels": 1}}
    data.update(sections)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


# -- solve -----------------------------------------------------------------------------------


def test_solve_measure_writes_json(tmp_path):
    out = tmp_path / "sol.json"
    code = main(["solve", "--regularizer", "measure", "--alpha", "1e-2", "--config",
                 small_config(tmp_path), "--out", str(out)])
    assert code == 0
    d = json.loads(out.read_text(encoding="utf-8"))
    assert d["solution"]["atoms"] > 0
    assert d["solution"]["regularizer"] == "measure"
    assert {"residual_bound", "functional_bound"} <= set(d["report"])


def test_solve_to_stdout(tmp_path, capsys):
    code = main(["solve", "--regularizer", "l2", "--config", small_config(tmp_path)])
    assert code == 0
    d = json.loads(capsys.readouterr().out)
    assert d["solution"]["regularizer"] == "l2" and "control_max" in d["solution"]


def test_solve_ivanov_with_calibration(tmp_path, capsys):
    code = main(["solve", "--regularizer", "ivanov", "--alpha", "2", "--calibrate",
                 "--config", small_config(tmp_path)])
    assert code == 0
    d = json.loads(capsys.readouterr().out)
    assert d["solution"]["control_max"] <= 0.5 * (1 + 1e-12)


def test_solve_alpha_zero(capsys):
    assert main(["solve", "--alpha", "0"]) == 1
    assert "alpha" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    path = small_config(tmp_path, adaptive={"tau_upperr": 3.0})
    assert main(["solve", "--config", path]) == 1
    assert "tau_upperr" in capsys.readouterr().err


def test_bad_config_value(tmp_path, capsys):
    path = small_config(tmp_path, adaptive={"tau_upper": 1.0})
    assert main(["solve", "--config", path]) == 1
    assert "tau" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.json")]) == 1


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--regulariser", "l2"])
    assert exc.value.code == 1


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise NumericalFailure("forced", iterations=0)

    monkeypatch.setattr("adapttikh.tikhonov.solve", boom)
    assert main(["solve", "--config", small_config(tmp_path)]) == 2


# -- configuration ---------------------------------------------------------------------------


def test_run_config_round_trip():
    cfg = RunConfig.from_dict({"mesh": {"n_boundary": 24}, "adaptive": {"delta": 0.02},
                               "constants": {"c_I": 0.5, "calibrate": False},
                               "output": {"out": "x.csv"}})
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()
    assert RunConfig.from_json(RunConfig().to_json()) == RunConfig()


@pytest.mark.parametrize("data, key", [
    ({"meshes": {}}, "meshes"),
    ({"mesh": {"levels": 1.5}}, "levels"),
    ({"benchmark": {"rho": "half"}}, "rho"),
    ({"constants": {"calibrate": 1}}, "calibrate"),
    ({"benchmark": {"rho": 1.2}}, "rho"),
])
def test_config_errors_name_key(data, key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_dict(data)


# -- studies ---------------------------------------------------------------------------------


def test_rate_study_csv(tmp_path, capsys):
    out = tmp_path / "rate.csv"
    code = main(["rate-study", "--refinement", "uniform", "--levels", "4", "--config",
                 small_config(tmp_path), "--out", str(out)])
    assert code == 0
    lines = out.read_text(encoding="utf-8").strip().splitlines()
    assert len(lines) == 5 and lines[0].startswith("level,")
    printed = capsys.readouterr().out
    assert "slope true_residual:" in printed


def test_rate_study_too_few_levels(capsys):
    assert main(["rate-study", "--levels", "2"]) == 1


def test_delta_study_single_delta(tmp_path, capsys):
    path = small_config(tmp_path, adaptive={"alpha0": 0.05, "max_inner": 60},
                        constants={"c_I": 0.181, "c_dirac": 0.1469, "c_inf": 0.018,
                                   "calibrate": False})
    code = main(["delta-study", "--deltas", "0.06", "--config", path])
    assert code == 0
    captured = capsys.readouterr()
    rows = [line for line in captured.out.splitlines() if line and not line.startswith("slope")]
    assert rows[0].startswith("delta,") and len(rows) == 2
    assert ",accepted," in rows[1]
    assert "slope" not in captured.out
    assert "at least two noise levels" in captured.err


# -- lemma -----------------------------------------------------------------------------------


def test_check_lemma_default(capsys):
    assert main(["check-lemma", "--sigma", "4", "--gamma", "2", "--samples", "20000"]) == 0
    out = capsys.readouterr().out
    assert "violations=0/20000" in out and "consistent" in out


@pytest.mark.parametrize("sigma, gamma", [(3.9, 5.0), (4.0, 1.9)])
def test_check_lemma_counterexample(sigma, gamma, capsys):
    code = main(["check-lemma", "--sigma", str(sigma), "--gamma", str(gamma),
                 "--samples", "20000"])
    out = capsys.readouterr().out
    assert code == 0
    assert "condition=fails" in out and "counterexample:" in out


def test_check_lemma_deterministic(capsys):
    main(["check-lemma", "--sigma", "3.5", "--gamma", "1.2", "--samples", "5000"])
    first = capsys.readouterr().out
    main(["check-lemma", "--sigma", "3.5", "--gamma", "1.2", "--samples", "5000"])
    assert capsys.readouterr().out == first


# -- threads ---------------------------------------------------------------------------------


def test_threads_env_overrides_flag(monkeypatch):
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("ADAPTTIKH_THREADS", "3")
    assert main(["--threads", "2", "check-lemma", "--samples", "100"]) == 0
    assert all(os.environ[v] == "3" for v in cli._THREAD_VARS)


def test_threads_flag(monkeypatch):
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    monkeypatch.delenv("ADAPTTIKH_THREADS", raising=False)
    assert main(["--threads", "2", "check-lemma", "--samples", "100"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"


def test_threads_invalid(monkeypatch):
    monkeypatch.setenv("ADAPTTIKH_THREADS", "many")
    assert main(["check-lemma", "--samples", "100"]) == 1


def test_console_script_installed():
    import shutil
    assert shutil.which("adapttikh") is not None
