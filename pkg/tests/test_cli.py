import json
import os
import subprocess
import sys

from dscache.cli import main

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def _write(tmp_path, doc):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc, indent=2))
    return str(p)


BASE = {
    "id": "cli",
    "stream": {"frames": 20},
    "queries": {"steps": [19], "tokens": 4, "max_new": 2},
    "policies": {"uniform8": {"kind": "uniform", "l_W": 8}, "dscache_2_6": {"kind": "dscache", "l_I": 2, "l_U": 6}},
}


def test_success_writes_jsonl(tmp_path, capsys):
    rc = main(["--scenario", os.path.join(SCENARIOS, "reduction_offline.json"), "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 10 + 1
    assert "PASS equivalence" in capsys.readouterr().out


def test_failed_comparison_exits_1(tmp_path):
    doc = dict(BASE, comparisons=[{"type": "equivalence", "a": "uniform8", "b": "dscache_2_6"}])
    assert main(["--scenario", _write(tmp_path, doc)]) == 1


def test_parse_and_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert main(["--scenario", str(bad)]) == 2
    assert "bad.json:1:" in capsys.readouterr().err
    assert main(["--scenario", str(tmp_path / "missing.json")]) == 2
    doc = dict(BASE, policies={"x": {"kind": "uniform", "l_W": 8, "l_I": 3}})
    assert main(["--scenario", _write(tmp_path, doc)]) == 2
    assert main(["--scenario", _write(tmp_path, BASE), "--policy", "nope"]) == 2
    assert main(["--scenario", _write(tmp_path, BASE), "--precision", "f16"]) == 2
    assert main(["--scenario", _write(tmp_path, BASE), "--seed", "-3"]) == 2


def test_check_mode_and_csv(tmp_path):
    doc = dict(BASE, comparisons=[{"type": "equivalence", "a": "uniform8", "b": "dscache_2_6", "expect": "differ"}])
    rc = main(["--scenario", _write(tmp_path, doc), "--out", str(tmp_path / "o"), "--format", "csv", "--check"])
    assert rc == 0
    recs = [json.loads(x) for x in (tmp_path / "o" / "report.jsonl").read_text().splitlines()]
    assert [r["record"] for r in recs] == ["comparison"]
    assert (tmp_path / "o" / "summary.csv").read_text().count("\n") == 2


def test_overrides_from_flags(tmp_path):
    path = _write(tmp_path, BASE)
    main(["--scenario", path, "--out", str(tmp_path / "a"), "--policy", "uniform8", "--seed", "7",
          "--precision", "f32"])
    recs = [json.loads(x) for x in (tmp_path / "a" / "report.jsonl").read_text().splitlines()]
    assert {r["policy"] for r in recs} == {"uniform8"}


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dscache", "--scenario", os.path.join(SCENARIOS, "empty.json")],
                         capture_output=True, text=True)
    assert out.returncode == 0
