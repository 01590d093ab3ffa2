import pytest

from robusto.config import ConfigError, parse_config


def test_preset_defaults():
    cfg = parse_config(None, mode="baseline", preset="cantilever")
    assert (cfg.grid.nx, cfg.grid.ny, cfg.grid.width, cfg.grid.height) == (120, 60, 2.0, 1.0)
    m = cfg.material
    assert (m.E0, m.ED, m.nu, m.p, m.plane_model) == (1.0, 0.75, 0.3, 5.0, "strain")
    assert (cfg.constraints.V, cfg.constraints.D, cfg.constraints.mean_norm) == (0.5, 0.02, "material")
    assert cfg.radius == pytest.approx(7 * 120 / 400)
    assert (cfg.inner.mu_star, cfg.inner.kkt_tol, cfg.inner.max_newton) == (1e-6, 1e-10, 100)
    assert (cfg.outer.max_iters, cfg.outer.move_limit, cfg.outer.change_tol) == (300, 0.2, 1e-3)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[grid]\nnx = 40  # comment\nny = 20\n\n[constraints]\nD = 0.04\n"
                    "[filter]\nradius_elements = 2.5\n[outer]\nconservative = yes\n")
    cfg = parse_config(path, overrides=["grid.nx=60", "mean_norm=domain"])
    assert cfg.grid.nx == 60 and cfg.grid.ny == 20
    assert cfg.constraints.D == 0.04 and cfg.constraints.mean_norm == "domain"
    assert cfg.radius == 2.5 and cfg.outer.conservative is True


@pytest.mark.parametrize("override,needle", [
    (["constraints.D=0.3"], "constraints.D"),
    (["grid.nx=0"], "grid.nx"),
    (["material.ED=2"], "material.ED"),
    (["inner.solver=lu"], "inner.solver"),
])
def test_range_errors(override, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(None, overrides=override)


def test_all_problems_reported_together(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nnx = 0\nnz = 3\n[solver]\nx = 1\n[constraints]\nD = 0.3\n")
    with pytest.raises(ConfigError) as err:
        parse_config(path, overrides=["typo=1", "grid.ny=abc"])
    problems = "\n".join(err.value.problems)
    for needle in ("nz", "[solver]", "typo", "grid.nx", "constraints.D", "ny"):
        assert needle in problems


def test_bare_and_malformed_overrides():
    cfg = parse_config(None, overrides=["tol=1e-9"])
    assert cfg.gradcheck.tol == 1e-9
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(None, overrides=["tolerance=1e-9"])
    with pytest.raises(ConfigError, match="key=value"):
        parse_config(None, overrides=["grid.nx"])


def test_evaluate_needs_input():
    with pytest.raises(ConfigError, match="input_density_path"):
        parse_config(None, mode="evaluate")
    cfg = parse_config(None, mode="evaluate", overrides=["io.input_density_path=x.txt"])
    assert cfg.io.input_density_path == "x.txt"


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/run.ini")


def test_example_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.ini"))
    assert files
    for f in files:
        parse_config(f)
