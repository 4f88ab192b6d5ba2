import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from bdproc.cli import main, read_manifest

DATA = Path(__file__).resolve().parents[1] / "data"


def d(name):
    return str(DATA / name)


@pytest.mark.parametrize("argv,code", [
    (["classify", d("regular.json")], 0),
    (["classify", d("exit.json")], 0),
    (["classify", d("power15.json"), "--N", "5"], 3),
    (["classify", d("missing.json")], 2),
    (["resolvent", d("regular.json"), d("triple_minimal.json"), "--N", "60"], 0),
    (["resolvent", d("regular.json"), d("triple_feller.json"), "--N", "60"], 0),
    (["resolvent", d("exit.json"), d("triple_elastic.json")], 4),
    (["resolvent", d("natural.json"), d("triple_doob_delta0.json")], 6),
    (["resolvent", d("natural.json"), d("triple_minimal.json"), "--N", "60"], 0),
    (["converge", d("exit.json"), d("triple_target.json")], 6),
    (["converge", d("regular.json"), d("triple_target.json"), "--N", "60"], 0),
    (["simulate", d("regular.json"), "--mode", "feller", "--triple", d("triple_infinite_nu.json")], 5),
    (["simulate", d("regular.json"), "--mode", "doob", "--pi", d("pi_bad.json")], 2),
    (["simulate", d("regular.json"), "--mode", "feller"], 2),
    (["transition", d("regular.json"), "--triple", d("triple_feller.json"), "--N", "30"], 0),
    (["bogus"], 2),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_malformed_model_file(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"family": "geometric", "params": {"r": "three"}}')
    assert main(["classify", str(p)]) == 2


def test_classify_json_report(capsys):
    assert main(["--json", "classify", d("exit.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["class"] == "Exit"
    assert abs(rep["sigma"]["partial_sum"] - 2.0) < 1e-10


def test_resolvent_summary_lines(tmp_path, capsys):
    out = tmp_path / "psi.csv"
    assert main(["resolvent", d("regular.json"), d("triple_doob_delta0.json"), "--out", str(out),
                 "--states", "4"]) == 0
    text = capsys.readouterr().out
    assert "[PASS] honesty" in text
    assert "[PASS] resolvent equation" in text
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 * 16 and set(rows[0]) == {"i", "j", "alpha", "psi"}
    read_manifest(str(out) + ".manifest.json")


def test_minimal_triple_all_checks_pass(capsys):
    assert main(["resolvent", d("regular.json"), d("triple_minimal.json")]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = [d("regular.json"), "--mode", "minimal", "--paths", "10000", "--t", "0.5"]
    assert main(["simulate", *argv, "--out", str(a)]) == 0
    assert main(["simulate", *argv, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert all(r["verdict"] == "PASS" for r in rows)
    assert {"i", "j", "t", "estimate", "stderr", "n_paths", "reference", "verdict"} <= set(rows[0])
    man = read_manifest(str(a) + ".manifest.json")
    assert man["config"]["seed"] == 20231015


def test_manifest_detects_tampering(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["converge", d("regular.json"), d("triple_target.json"), "--N", "60", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    gaps = [float(r["sup_gap_resolvent"]) for r in rows]
    assert all(x > y for x, y in zip(gaps, gaps[1:]))
    out.write_text(out.read_text() + "tampered\n")
    with pytest.raises(ValueError):
        read_manifest(str(out) + ".manifest.json")


def test_converge_support_covered_ends_at_zero(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["converge", d("regular.json"), d("triple_feller.json"), "--N", "60",
                 "--schedule", "1", "2", "4", "--out", str(out)]) == 0
    last = list(csv.DictReader(out.open()))[-1]
    assert float(last["sup_gap_resolvent"]) == 0.0


def test_transition_csv(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["transition", d("regular.json"), "--pi", d("pi_delta0.json"), "--N", "30",
                 "--t", "0.5", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 9 and set(rows[0]) == {"t", "i", "j", "p"}


def test_jobs_env_var(monkeypatch):
    from bdproc.simulate import resolve_jobs
    monkeypatch.setenv("BD_RAY_JOBS", "3")
    assert resolve_jobs(None) == 3
    assert resolve_jobs(2) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "bdproc", "classify", d("natural.json")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "Natural" in r.stdout


def test_verify_subcommand_quick(capsys):
    assert main(["verify", "--criteria", "1", "2", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3
