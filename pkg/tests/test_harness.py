import json
import math
import os

import numpy as np
import pytest

from slab_mlmc import io
from slab_mlmc.cli import main
from slab_mlmc.config import StudyConfig
from slab_mlmc.errors import ConfigError, RefinementExhausted, SampleError
from slab_mlmc.specfun import exp_integral_e2
from slab_mlmc import studies
from slab_mlmc.studies import run_convergence, run_epscost, run_kl_check, run_solve


def write_cfg(tmp_path, text, name="study.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def data_lines(path):
    with open(path) as fh:
        return [ln for ln in fh if not ln.startswith("#")]


# -- config -------------------------------------------------------------------------

def test_config_round_trip():
    cfg = StudyConfig(nu=0.5, epsilons=(1e-3, 2e-4), ladder=(4, 8), stability=True, workers=3, sigma_s=0.25)
    again = StudyConfig.from_text(cfg.to_text())
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_ignores_runtime_keys():
    a = StudyConfig(workers=1, out="a")
    assert a.digest() == StudyConfig(workers=4, out="b").digest()
    assert a.digest() != StudyConfig(seed=1).digest()


def test_config_comments_and_overrides():
    cfg = StudyConfig.from_text("# study\nnu = 0.5  # smoothness\nseed = 4\n", {"seed": 9, "workers": None})
    assert (cfg.nu, cfg.seed, cfg.workers) == (0.5, 9, None)
    assert cfg.worker_count >= 1


@pytest.mark.parametrize("text,key", [
    ("bogus = 1", "bogus"),
    ("nu = 1.0", "nu"),
    ("cells = many", "cells"),
    ("lambda_c = -1", "lambda_c"),
    ("ladder = 8,16\nref_cells = 24", "ref_cells"),
    ("ladder = 8,16\nref_cells = 16", "ref_cells"),
    ("coupling = cubic", "coupling"),
    ("qoi = mean", "qoi"),
    ("workers = 0", "workers"),
    ("just a line", "just a line"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        StudyConfig.from_text(text)
    assert err.value.key == key


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        StudyConfig.from_file(str(tmp_path / "absent.cfg"))


# -- output formats ---------------------------------------------------------------------

def test_csv_header_and_precision(tmp_path):
    cfg = StudyConfig(seed=5)
    path = tmp_path / "t.csv"
    io.write_csv(str(path), cfg, "solve", ["a", "b"], [(1 / 3, math.pi), (2, "x")])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# slab-mlmc ")
    assert lines[2] == f"# config_hash: {cfg.digest()}" and lines[3] == "# seed: 5"
    a, b = lines[5].split(",")
    assert a == format(1 / 3, ".17g") and float(a) == 1 / 3 and float(b) == math.pi
    cols, rows = io.read_csv(str(path))
    assert cols == ["a", "b"] and rows[1] == ["2", "x"]
    with pytest.raises(ValueError):
        io.write_csv(str(path), cfg, "solve", ["a"], [(1, 2)])


def test_json_header(tmp_path):
    cfg = StudyConfig()
    io.write_json(str(tmp_path / "s.json"), cfg, "solve", {"v": np.float64(0.1), "arr": np.arange(2)})
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["header"]["config_hash"] == cfg.digest() and doc["v"] == 0.1 and doc["arr"] == [0, 1]


# -- solve ------------------------------------------------------------------------------

def test_solve_pure_absorber(tmp_path):
    cfg = StudyConfig(sigma_s=0.0, sigma_a=1.0, source=1.0, cells=256, angles=32)
    phi, stats = run_solve(cfg, str(tmp_path))
    mid = float(np.interp(0.5, phi.mesh.nodes, phi.nodal))
    assert abs(mid - (1 - exp_integral_e2(0.5))) <= 2e-3
    assert stats["iterations"] == 1 and stats["boundary_defect"] == 0.0
    cols, rows = io.read_csv(str(tmp_path / "flux.csv"))
    assert cols == ["x", "phi"] and len(rows) == 257
    assert "wall_time" in json.loads((tmp_path / "stats.json").read_text())


def test_zero_source_gives_zero_flux():
    phi, stats = run_solve(StudyConfig(source=0.0, cells=32, angles=8))
    assert np.all(phi.nodal == 0.0)


def test_random_solve_is_reproducible():
    a, sa = run_solve(StudyConfig(cells=32, sample_index=3))
    b, _ = run_solve(StudyConfig(cells=32, sample_index=3))
    c, _ = run_solve(StudyConfig(cells=32, sample_index=4))
    np.testing.assert_array_equal(a.nodal, b.nodal)
    assert not np.array_equal(a.nodal, c.nodal)
    assert sa["scheme_residual"] <= 10 * 1e-10 and sa["modes"] == 128


def test_solve_stability_refinement():
    _, stats = run_solve(StudyConfig(cells=8, stability=True, stability_k=1e-2))
    assert stats["stability_refined_from"] == 8 and stats["cells"] > 8
    assert run_solve(StudyConfig(cells=8, stability=True, stability_k=1e-4))[1]["stability_refined_from"] is None


def test_solve_stability_exhausted():
    with pytest.raises(RefinementExhausted):
        run_solve(StudyConfig(cells=8, stability=True, stability_k=1.0))


# -- studies ------------------------------------------------------------------------------

def test_convergence_small(tmp_path):
    cfg = StudyConfig(ladder=(4, 8), samples=6, ref_cells=32, ref_angles=16, workers=1)
    run_convergence(cfg, str(tmp_path))
    cols, rows = io.read_csv(str(tmp_path / "convergence.csv"))
    assert cols == ["h", "N", "mean_sup_err", "se_sup_err", "mean_qoi_err", "se_qoi_err"]
    assert [float(r[0]) for r in rows] == [0.25, 0.125]
    assert float(rows[1][2]) < float(rows[0][2])
    assert (tmp_path / "rates.txt").exists()


def test_convergence_empty_ladder(tmp_path):
    cfg = StudyConfig(ladder=(), samples=2, ref_cells=16, ref_angles=8, workers=1)
    run_convergence(cfg, str(tmp_path))
    assert len(data_lines(tmp_path / "convergence.csv")) == 1


def test_epscost_single_point(tmp_path):
    cfg = StudyConfig(nu=1.5, epsilons=(5e-4,), workers=1)
    res = run_epscost(cfg, str(tmp_path))
    by = {r[0]: r for r in res.rows}
    assert by["mc"][7] == "ok" and by["mlmc"][7] == "ok"
    assert by["mlmc"][3] <= by["mc"][3]
    cols, rows = io.read_csv(str(tmp_path / "epscost.csv"))
    assert cols[0] == "method" and len(rows) == 2
    assert math.isnan(res.slopes["mc_slope"])


def test_epscost_records_point_errors(tmp_path, monkeypatch):
    def failing(*args, **kw):
        raise SampleError("sample 3 on level 0 failed", level=0, index=3)

    monkeypatch.setattr(studies, "mc_estimate", failing)
    cfg = StudyConfig(nu=1.5, epsilons=(4e-3, 2e-3), max_levels=5, workers=1)
    res = studies.run_epscost(cfg, str(tmp_path))
    status = {(r[0], r[1]): r[7] for r in res.rows}
    assert status[("mc", 4e-3)].startswith("error: sample 3") and status[("mlmc", 4e-3)] == "ok"
    assert math.isnan(res.slopes["mc_slope"]) and not math.isnan(res.slopes["mlmc_slope"])
    assert len(data_lines(tmp_path / "epscost.csv")) == 5


def test_kl_check_outputs(tmp_path):
    _, summary = run_kl_check(StudyConfig(nu=0.5, check_modes=20, quad_points=512), str(tmp_path))
    assert summary["max_rel_delta"] <= 1e-3 and summary["gram_residual_nystrom"] <= 1e-4
    assert summary["trace_ok"]
    assert len(data_lines(tmp_path / "kl_eigenvalues.csv")) == 21


def test_kl_check_resolution_guard():
    with pytest.raises(ConfigError):
        run_kl_check(StudyConfig(check_modes=20, quad_points=64))


# -- CLI ------------------------------------------------------------------------------------

def test_cli_success_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, "cells = 16\nangles = 4\n")
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["solve", "--config", cfg, "--out", out, "--seed", "11"]) == 0
        outs.append(out)
    assert (tmp_path / "a" / "flux.csv").read_bytes() == (tmp_path / "b" / "flux.csv").read_bytes()
    sa, sb = (json.loads(open(os.path.join(o, "stats.json")).read()) for o in outs)
    sa.pop("wall_time"), sb.pop("wall_time")
    assert sa == sb and sa["header"]["seed"] == 11


def test_cli_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "nu = 2.0\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "[nu]" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_numerical_failure(tmp_path):
    cfg = write_cfg(tmp_path, "cells = 16\nmax_iter = 2\ntol = 1e-14\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_cli_rejects_unknown_command(tmp_path):
    with pytest.raises(SystemExit):
        main(["serve", "--config", write_cfg(tmp_path, "")])
