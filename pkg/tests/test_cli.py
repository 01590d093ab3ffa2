import csv
import io
import json

import numpy as np
import pytest

from robusto import outputs
from robusto.cli import main

SMALL = ["grid.nx=20", "grid.ny=10", "--threads", "1"]


def run(capsys, *args):
    code = main(list(args))
    return code, capsys.readouterr()


def test_baseline_evaluate_robust_chain(tmp_path, capsys):
    base, ev, rob = tmp_path / "base", tmp_path / "eval", tmp_path / "rob"
    code, out = run(capsys, "baseline", "--out", str(base), *SMALL, "outer.max_iters=40")
    assert code == 0
    summary = json.loads((base / "summary.json").read_text())
    rows = outputs.read_convergence(base / "convergence.csv")
    assert len(rows) == summary["outer_iterations"] + 1
    assert [r["iter"] for r in rows] == list(range(len(rows)))
    for name in ("density.txt", "density.pgm"):
        assert (base / name).exists()

    code, _ = run(capsys, "evaluate", "--out", str(ev), *SMALL,
                  f"io.input_density_path={base / 'density.txt'}")
    assert code == 0
    s = json.loads((ev / "summary.json").read_text())
    assert s["worst_case_ratio_percent"] >= 100 - 1e-6
    assert outputs.read_pgm(ev / "defects.pgm").shape == (10, 20)
    # evaluate copies the design through unchanged.
    assert (ev / "density.txt").read_bytes() == (base / "density.txt").read_bytes()

    code, _ = run(capsys, "robust", "--out", str(rob), *SMALL, "outer.max_iters=5",
                  f"io.input_density_path={base / 'density.txt'}")
    assert code == 0
    s = json.loads((rob / "summary.json").read_text())
    assert "baseline" in s and "improvement_percentage_points" in s
    assert s["worst_case_ratio_percent"] >= 100 - 1e-6
    assert len(outputs.read_convergence(rob / "convergence.csv")) == s["outer_iterations"] + 1


def test_no_fluctuation_ratio_is_exactly_100(tmp_path, capsys):
    code, _ = run(capsys, "baseline", "--out", str(tmp_path / "b"), *SMALL, "outer.max_iters=5")
    code, _ = run(capsys, "evaluate", "--out", str(tmp_path / "e"), *SMALL, "material.ED=1.0",
                  f"io.input_density_path={tmp_path / 'b' / 'density.txt'}")
    s = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert s["worst_case_ratio_percent"] == pytest.approx(100.0, abs=1e-10)


def test_zero_iterations_and_full_volume(tmp_path, capsys):
    run(capsys, "baseline", "--out", str(tmp_path / "z"), *SMALL, "outer.max_iters=0")
    _, _, rho = outputs.read_density(tmp_path / "z" / "density.txt")
    assert np.all(rho == 0.5)
    run(capsys, "baseline", "--out", str(tmp_path / "v"), *SMALL, "constraints.V=1.0")
    _, _, rho = outputs.read_density(tmp_path / "v" / "density.txt")
    np.testing.assert_allclose(rho, 1.0, atol=1e-3)
    assert set(outputs.read_pgm(tmp_path / "v" / "density.pgm").ravel()) <= {0, 1}


def test_gradcheck_csv(capsys):
    code, out = run(capsys, "gradcheck", "grid.nx=4", "grid.ny=2")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out.out)))
    assert rows[0] == ["element", "analytic", "numeric", "rel_error"]
    assert len(rows) == 9
    assert max(float(r[3]) for r in rows[1:]) < 1e-5


def test_oracle_csv(capsys):
    code, out = run(capsys, "oracle")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out.out)))
    assert rows[0][:4] == ["instance", "D", "oracle", "solver"]
    assert all(r[-1] == "True" for r in rows[1:])


def test_config_errors_exit_2(capsys):
    code, out = run(capsys, "baseline", "constraints.D=0.3", "grid.nx=0")
    assert code == 2
    assert "constraints.D" in out.err and "grid.nx" in out.err


def test_dimension_mismatch_is_reported(tmp_path, capsys):
    run(capsys, "baseline", "--out", str(tmp_path / "b"), *SMALL, "outer.max_iters=0")
    code, out = run(capsys, "evaluate", "--out", str(tmp_path / "e"), "grid.nx=8", "grid.ny=4",
                    f"io.input_density_path={tmp_path / 'b' / 'density.txt'}")
    assert code == 1 and "20x10" in out.err
