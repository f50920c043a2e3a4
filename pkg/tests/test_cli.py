from __future__ import annotations

import json
import subprocess
import sys

import pytest

from nestedmlmc import __version__
from nestedmlmc.cli import main
from nestedmlmc.mlmc import CSV_COLUMNS, read_level_table


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_converge_table(capsys):
    code, out, err = run(capsys, "converge", "--mode", "det2", "--levels", "0..4", "--m", "400", "--seed", "1")
    assert code == 0
    first, header = out.splitlines()[:2]
    assert first.startswith(f"# nestedmlmc {__version__} {{")
    assert header == ",".join(CSV_COLUMNS)
    rows = read_level_table(out)
    assert [r.level for r in rows] == [0, 1, 2, 3, 4]
    rates = json.loads(err.splitlines()[-1])
    assert rates["mode"] == "det2" and "beta" in rates


def test_converge_several_modes_to_files(capsys, tmp_path):
    out = tmp_path / "conv.csv"
    code, _, err = run(capsys, "converge", "--mode", "det2,det4", "--levels", "0..3", "--m", "200",
                       "--out", str(out))
    assert code == 0
    for mode in ("det2", "det4"):
        text = (tmp_path / f"conv_{mode}.csv").read_text()
        assert len(read_level_table(text)) == 4 and f'"mode": "{mode}"' in text
    assert len(err.splitlines()) == 2


def test_missing_levels_exits_2():
    proc = subprocess.run([sys.executable, "-m", "nestedmlmc", "converge"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


@pytest.mark.parametrize("argv", [
    ["estimate", "--eta", "1.5"],
    ["var", "--eta", "1.5"],
    ["cvar", "--eta", "1.5", "--l-eta-hat", "0.08"],
    ["estimate", "--r", "2.5"],
    ["complexity", "--tol-rel", "0.1,-0.1"],
])
def test_bad_values_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "error" in err


def test_bad_level_range_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["converge", "--levels", "5..2"])
    assert info.value.code == 2


def test_output_independent_of_threads(capsys):
    base = ["converge", "--mode", "adaptive", "--levels", "0..5", "--m", "3000", "--seed", "4", "--deterministic"]
    _, one, _ = run(capsys, *base, "--threads", "1")
    _, two, _ = run(capsys, *base, "--threads", "2")
    assert one == two
    est = ["estimate", "--tol-rel", "0.1", "--seed", "2", "--deterministic"]
    _, a, _ = run(capsys, *est, "--threads", "1")
    _, b, _ = run(capsys, *est, "--threads", "3")
    assert a == b


def test_threads_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("NESTEDMLMC_THREADS", "2")
    base = ["estimate", "--tol-rel", "0.1", "--seed", "2", "--deterministic"]
    _, env, _ = run(capsys, *base)
    monkeypatch.delenv("NESTEDMLMC_THREADS")
    _, plain, _ = run(capsys, *base)
    assert env == plain


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"levels": "0..2", "m": 300, "mode": "det2", "seed": 9}))
    code, out, _ = run(capsys, "converge", "--config", str(cfg))
    assert code == 0 and len(read_level_table(out)) == 3
    code, out, _ = run(capsys, "converge", "--config", str(cfg), "--levels", "0..3")
    assert code == 0 and len(read_level_table(out)) == 4
    assert '"m": 300' in out.splitlines()[0]


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"levelz": "0..2"}))
    with pytest.raises(SystemExit) as info:
        main(["converge", "--config", str(cfg)])
    assert info.value.code == 2


def test_estimate_json(capsys):
    code, out, _ = run(capsys, "estimate", "--mode", "det2", "--tol-rel", "0.1", "--repeat", "2", "--seed", "3")
    assert code == 0
    payload = json.loads(out)
    assert payload["version"] == __version__ and len(payload["runs"]) == 2
    run0 = payload["runs"][0]
    assert run0["exact"] == pytest.approx(0.025, rel=1e-12)
    assert abs(run0["error"]) < 5 * run0["tol"]


def test_complexity_single_tolerance_gives_one_row(capsys):
    code, out, err = run(capsys, "complexity", "--mode", "det2", "--tol-rel", "0.1", "--repeat", "1")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# nestedmlmc") and lines[1] == "tol,total_work,wall_time,estimate,error"
    assert len(lines) == 3 and err == ""


def test_complexity_reports_slope(capsys):
    code, out, err = run(capsys, "complexity", "--mode", "det2", "--tol-rel", "0.16,0.08", "--repeat", "2")
    assert code == 0 and len(out.splitlines()) == 6
    assert json.loads(err)["work_vs_tol_slope"] < 0


def test_var_json(capsys):
    code, out, _ = run(capsys, "var", "--mode", "det2", "--eps", "0.02", "--seed", "1", "--trace")
    assert code == 0
    payload = json.loads(out)
    assert abs(payload["l_eta_hat"] - payload["l_eta_exact"]) < 0.02
    assert payload["trace_length"] == len(payload["trace"]) == payload["iterations"] + 1
    assert payload["total_work"] > 0


def test_cvar_json_with_given_var(capsys):
    code, out, _ = run(capsys, "cvar", "--mode", "det2", "--tol-rel", "0.05", "--l-eta-hat", "0.0804777", "--seed", "1")
    assert code == 0
    payload = json.loads(out)
    assert payload["var_work"] == 0
    assert payload["cvar_exact"] == pytest.approx(0.1160451302032536645, rel=1e-12)
    assert abs(payload["error"]) < 3 * payload["tol"]


def test_level_cap_exits_3(capsys):
    code, _, err = run(capsys, "estimate", "--mode", "det2", "--tol-rel", "0.005", "--max-level", "3")
    assert code == 3 and "MaxLevelExceeded" in err


def test_budget_exits_3(capsys):
    code, _, err = run(capsys, "var", "--mode", "det2", "--eps", "0.001", "--max-work", "1e5")
    assert code == 3 and "BudgetExceeded" in err
