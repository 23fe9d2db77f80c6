import json

import numpy as np
import pytest

from orthospline.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_build_then_project_round_trip(tmp_path, capsys):
    filt = tmp_path / "f.json"
    system = tmp_path / "s.npz"
    code, _, _ = _run(["gen-filtration", "--kind", "dyadic", "--dim", "2", "--levels", "2", "--out", filt], capsys)
    assert code == EXIT_OK
    assert json.loads(filt.read_text())["format_version"] == 1
    code, out, _ = _run(["build-system", filt, "--k", "2", "--format", "json", "--out", system], capsys)
    assert code == EXIT_OK and system.exists()
    summary = json.loads(out)
    assert summary["passed"] and summary["orthonormality_error"] < 1e-10
    # piecewise linear in one direction with a kink off the breakpoints: not in the span
    code, out, _ = _run(["project", "--system", system, "--target", "abs", "--format", "json"], capsys)
    doc = json.loads(out)
    assert code == EXIT_OK and doc["functions"] == len(doc["rows"]) == summary["functions"]
    assert 0 < doc["sup_error"] < 0.1


def test_regularity_report(tmp_path, capsys):
    filt = tmp_path / "f.json"
    _run(["gen-filtration", "--kind", "dyadic", "--dim", "1", "--levels", "3", "--out", filt], capsys)
    code, out, _ = _run(["regularity-report", filt, "--r", "1"], capsys)
    doc = json.loads(out)
    assert code == EXIT_OK and doc["gamma_overall"] == 2.0 and doc["beta"] <= 2


def test_same_seed_gives_identical_output(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"filtration": {"kind": "random", "dim": 2, "steps": 6}, "k": [1, 2],
                               "signs": {"model": "random", "count": 4}}))
    outs = []
    for name in ["a.csv", "b.csv"]:
        code, _, _ = _run(["weak-type", "--config", cfg, "--seed", 11, "--out", tmp_path / name], capsys)
        assert code == EXIT_OK
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    _run(["weak-type", "--config", cfg, "--seed", 12, "--out", tmp_path / "c.csv"], capsys)
    assert (tmp_path / "c.csv").read_bytes() != outs[0]
    assert outs[0].startswith(b"lambda,measure,ratio\n")


def test_cz_and_ae_sweep(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"filtration": {"kind": "random", "dim": 2, "steps": 5, "min_fraction": 0.2},
                               "k": [2, 2], "seed": 1}))
    code, out, _ = _run(["cz", "--config", cfg, "--format", "json"], capsys)
    doc = json.loads(out)
    assert code == EXIT_OK and doc["passed"] and doc["overlap"] <= doc["overlap_ceiling"]
    code, out, _ = _run(["ae-sweep", "--config", cfg, "--grid", 21], capsys)
    assert code == EXIT_OK and out.splitlines()[0] == "L,sup_error,median_error"


def test_usage_errors(tmp_path, capsys):
    assert _run(["remez", "--degree", 9], capsys)[0] == EXIT_USAGE
    assert _run(["weak-type"], capsys)[0] == EXIT_USAGE
    assert _run(["build-system", tmp_path / "missing.json"], capsys)[0] == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"filtration": {"kind": "random"}, "k": [0]}))
    assert _run(["weak-type", "--config", bad], capsys)[0] == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == EXIT_USAGE
    filt = tmp_path / "f.json"
    _run(["gen-filtration", "--dim", "2", "--steps", "3", "--out", filt], capsys)
    assert _run(["build-system", filt, "--k", "1,2,3"], capsys)[0] == EXIT_USAGE


def test_failed_check_exit_code(tmp_path, capsys):
    filt = tmp_path / "f.json"
    _run(["gen-filtration", "--dim", "1", "--steps", "10", "--out", filt], capsys)
    code, out, _ = _run(["build-system", filt, "--k", "3", "--tol", "0", "--format", "json"], capsys)
    assert code == (EXIT_OK if json.loads(out)["orthonormality_error"] == 0 else EXIT_FAIL)


def test_remez_command(capsys):
    code, out, _ = _run(["remez", "--degree", 2, "--dim", 2, "--trials", 10, "--samples", 512, "--seed", 3], capsys)
    assert code == EXIT_OK
    header, row = out.splitlines()
    assert header.startswith("r,d,trials") and row.split(",")[4] == "0"
