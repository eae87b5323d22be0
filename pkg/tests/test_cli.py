import numpy as np
import pytest

from shapeopt.cli import HISTORY_COLUMNS, ConfigError, load_config, main, read_history
from shapeopt.geometry import build_benchmark_shapes

FAST = "mesh.h = 0.07\nl_1 = 24\nl_2 = 36\n"


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_empty_config_gives_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path, "# nothing\n"))
    assert cfg.fluid.mu == 1.81 and cfg.fluid.rho == 1.2e5
    assert cfg.bcs.inflow_coefficient == -0.08421
    assert cfg.armijo.initial_step == 0.0125 and cfg.armijo.backtrack == 0.1
    assert cfg.optimizer.tol == 1e-4
    assert build_benchmark_shapes(cfg.domain).N == 12 + 48 + 60
    assert cfg == load_config(None)


def test_config_errors_name_the_key(tmp_path):
    with pytest.raises(ConfigError, match="fluid.mu must be > 0"):
        load_config(write_config(tmp_path, "fluid.mu = -1\n"))
    with pytest.raises(ConfigError, match="unknown key 'fluid.nu'"):
        load_config(write_config(tmp_path, "fluid.nu = 1\n"))
    with pytest.raises(ConfigError, match="mesh.h"):
        load_config(write_config(tmp_path, "mesh.h = fine\n"))
    with pytest.raises(ConfigError, match="l_1"):
        load_config(write_config(tmp_path, "l_1 = 13\n"))


def test_l2_override(tmp_path):
    cfg = load_config(write_config(tmp_path, "l_2 = 30\n"))
    assert build_benchmark_shapes(cfg.domain).N == 12 + 48 + 30


def test_main_config_error_exit(tmp_path, capsys):
    path = write_config(tmp_path, "fluid.mu = -1\n")
    assert main(["validate", str(path)]) == 2
    assert "fluid.mu must be > 0" in capsys.readouterr().err


def test_validate_default_and_variants(tmp_path, capsys):
    assert main(["validate", str(write_config(tmp_path, FAST))]) == 0
    out = capsys.readouterr().out
    j = float(out.split("j = ")[1].split()[0])
    assert abs(j - 0.07717) <= 0.15 * 0.07717
    assert "nodes" in out
    zero = write_config(tmp_path, FAST + "bc.inflow_coefficient = 0\n", "zero.cfg")
    assert main(["validate", str(zero)]) == 0
    assert "j = 0.0" in capsys.readouterr().out
    overlap = write_config(tmp_path, FAST + "shape2.center = 0.35, 0.35\n", "overlap.cfg")
    assert main(["validate", str(overlap)]) != 0


def test_run_single_iteration(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, FAST + "fluid.rho = 0\noptimizer.max_inner = 1\noptimizer.max_al = 1\n")
    code = main(["run", str(cfg), "--output-dir", str(out)])
    assert code == 1  # one iteration cannot converge
    rows = read_history(out / "history.csv")
    assert len(rows) == 1
    assert tuple(rows[0].keys()) == HISTORY_COLUMNS
    assert (out / "fields_1.vtk").exists() and (out / "boundary_1.csv").exists()
    assert "status:" in (out / "summary.txt").read_text()
    vtk = (out / "fields_1.vtk").read_text()
    for name in ("velocity", "pressure", "deformation"):
        assert name in vtk


def test_run_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--output-dir", str(blocker / "sub")]) != 0
    assert "not writable" in capsys.readouterr().err


def test_mesh_command(tmp_path):
    cfg = write_config(tmp_path, FAST)
    assert main(["mesh", str(cfg), "--output-dir", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "mesh.msh").exists()


def test_run_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, FAST + "optimizer.max_total_iters = 5\n")
    main(["run", str(cfg), "--output-dir", str(tmp_path / "a")])
    main(["run", str(cfg), "--output-dir", str(tmp_path / "b")])
    a = (tmp_path / "a" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "history.csv").read_bytes()
    assert len(a.splitlines()) == 6
    hist = read_history(tmp_path / "a" / "history.csv")
    assert np.all(np.diff([float(r["j"]) for r in hist]) < 0)
