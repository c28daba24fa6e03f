import json
import textwrap
from pathlib import Path

import numpy as np
import pytest

from slodgpe import fem, mesh, slod, harness, cli


TINY_1D = dict(
    kind="ground_state", dim=1, box=((-8.0, 8.0),), n_values=(8, 12),
    ell=2, r=1, beta=5.0, potential=fem.PotentialSpec(
        smooth_part=(fem.Harmonic(0.5),)),
    a_form="canonical", reference_n=24)


def tiny_config(**over):
    params = dict(TINY_1D)
    params.update(over)
    return harness.preset_config("custom", **params)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def test_preset_table_is_complete():
    for name in ("smooth2d", "discont2d", "indicator2d", "rotation2d",
                 "harmonic1d", "harmonic2d", "dynamics1d", "dynamics2d",
                 "decay_study"):
        cfg = harness.preset_config(name)
        assert cfg.preset == name
        assert cfg.kind in ("ground_state", "dynamics", "decay")


def test_rotation_preset_publishes_doubled_scale():
    cfg = harness.preset_config("rotation2d")
    assert cfg.report_doubled
    # published values: beta 1000, Omega 0.85, box (-10,10)^2
    assert 2.0 * cfg.beta == 1000.0
    assert 2.0 * cfg.omega == 0.85
    assert cfg.box == ((-10.0, 10.0), (-10.0, 10.0))
    assert cfg.init == "random_rotational"
    assert cfg.tol_residual == 1e-8


def test_smooth_preset_fields():
    cfg = harness.preset_config("smooth2d")
    assert cfg.box == ((-6.0, 6.0), (-6.0, 6.0))
    assert cfg.n_values == (20, 28, 40, 56)
    assert cfg.beta == 50.0 and cfg.r == 2 and cfg.ell == 2
    assert cfg.a_form == "canonical"
    assert cfg.reference_value == pytest.approx(7.082310561)


def test_rough_presets_adapt_the_a_form():
    for name in ("discont2d", "indicator2d"):
        cfg = harness.preset_config(name)
        assert cfg.a_form == "with_rough"
        assert cfg.potential.rough_only().terms
    key = harness.a_form_key(harness.preset_config("indicator2d"))
    assert key.startswith("canonical+")
    assert harness.a_form_key(harness.preset_config("smooth2d")) == "canonical"


def test_preset_overrides_and_unknown_name():
    cfg = harness.preset_config("harmonic1d", n_values=(4,), beta=1.0)
    assert cfg.n_values == (4,) and cfg.beta == 1.0
    with pytest.raises(ValueError):
        harness.preset_config("nope")
    with pytest.raises(ValueError):
        harness.preset_config("custom", **dict(TINY_1D, kind="bogus"))


def test_dynamics_requires_quench_potential():
    with pytest.raises(ValueError):
        tiny_config(kind="dynamics")


# ---------------------------------------------------------------------------
# INI configuration
# ---------------------------------------------------------------------------

def test_load_config_overrides_preset(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(textwrap.dedent("""\
        [experiment]
        preset = harmonic1d
        seed = 3
        [mesh]
        n_values = 4,8
        ell = 1
        box = -5,5
        [model]
        beta = 7.5
        [solver]
        max_iter = 40
        [reference]
        n = 16
    """))
    cfg = harness.load_config(path)
    assert cfg.preset == "harmonic1d"
    assert cfg.n_values == (4, 8) and cfg.ell == 1
    assert cfg.box == ((-5.0, 5.0),)
    assert cfg.beta == 7.5 and cfg.max_iter == 40
    assert cfg.seed == 3 and cfg.reference_n == 16
    # command-line seed wins over the file
    assert harness.load_config(path, seed=9).seed == 9


def test_load_config_custom_with_potential(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(textwrap.dedent("""\
        [experiment]
        preset = custom
        kind = ground_state
        [mesh]
        dim = 2
        n_values = 4
        box = -6,6 ; -4,4
        r = 1
        [model]
        beta = 10
        potential = harmonic:0.5 + gaussian:4,0,0,1
        rough_potential = half_plane:2,2
        a_form = with_rough
    """))
    cfg = harness.load_config(path)
    assert cfg.dim == 2
    assert cfg.box == ((-6.0, 6.0), (-4.0, 4.0))
    names = [type(t).__name__ for t in cfg.potential.smooth_part]
    assert names == ["Harmonic", "GaussianSum"]
    assert [type(t).__name__ for t in cfg.potential.rough_part] == [
        "HalfPlaneIndicators"]


def test_parse_potential_term_errors():
    with pytest.raises(ValueError):
        harness._parse_potential_term("wavelet:1,2")
    with pytest.raises(ValueError):
        harness._parse_potential_term("gaussian:1,0,0")  # not a 4-tuple
    with pytest.raises(ValueError):
        harness._parse_box("0,1;0,1;0,1", 2)


# ---------------------------------------------------------------------------
# extrapolation
# ---------------------------------------------------------------------------

def test_eoc_recovers_exact_power():
    H = np.array([1.0, 0.5, 0.25, 0.125])
    errs = 3.0 * H ** 4.5
    out = harness.eoc(errs, H)
    assert out[0] is None
    assert np.allclose(out[1:], 4.5, atol=1e-12)


def test_richardson_recovers_synthetic_limit():
    H = np.array([1.0, 0.5, 0.25, 0.125, 0.0625])
    E = 2.718281828 + 0.37 * H ** 7
    fit = harness.richardson(E, H)
    assert fit["limit"] == pytest.approx(2.718281828, abs=1e-8)
    assert fit["order"] == pytest.approx(7.0, abs=1e-4)
    # order unaffected by the row ordering
    fit2 = harness.richardson(E[::-1], H[::-1])
    assert fit2["limit"] == pytest.approx(fit["limit"], abs=1e-10)


def test_richardson_refuses_bad_tables():
    H = [1.0, 0.5, 0.25, 0.125]
    with pytest.raises(ValueError):
        harness.richardson([1.0, 0.9], [1.0, 0.5])  # too short
    with pytest.raises(ValueError):
        harness.richardson([1.0, 0.8, 0.9, 0.85], H)  # sign change
    with pytest.raises(ValueError):
        harness.richardson([1.0, 0.9, 0.8, 0.7], H)  # not shrinking


# ---------------------------------------------------------------------------
# direct fine-space reference
# ---------------------------------------------------------------------------

def test_identity_basis_is_the_interior_fine_space():
    m = mesh.build_mesh(1, [(0.0, 1.0)], 4)
    fs = fem.FeSpace(m, 3)
    basis = harness.identity_basis(fs)
    free = np.nonzero(~fs.dirichlet_mask)[0]
    assert basis.phi.shape == (fs.n_dofs, free.size)
    M = fem.assemble_mass(fs).toarray()
    assert np.allclose(basis.gram.toarray(), M[np.ix_(free, free)])


def test_reference_solution_guard_and_tiny_solve():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        harness.reference_solution(cfg, 10 ** 6)
    res = harness.reference_solution(cfg, 12)
    assert res.converged
    assert res.energy > 0


# ---------------------------------------------------------------------------
# runs and artifacts
# ---------------------------------------------------------------------------

def read_csv(path):
    return Path(path).read_text().splitlines()


def test_run_convergence_artifacts(tmp_path):
    cfg = tiny_config()
    out = harness.run(cfg, tmp_path / "a")
    lines = read_csv(tmp_path / "a" / "convergence.csv")
    assert lines[0] == ",".join(harness.CONVERGENCE_HEADER)
    assert len(lines) == 1 + len(cfg.n_values)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["preset"] == "custom"
    assert manifest["reference"]["kind"] == "direct_fine"
    assert "eoc_E" in manifest and manifest["eoc_E"][0] is None
    # errors shrink under refinement
    errs = [row["E"] - out["reference"] for row in out["table"]]
    assert abs(errs[1]) < abs(errs[0])


def test_run_is_deterministic_modulo_timing(tmp_path):
    cfg = tiny_config()
    harness.run(cfg, tmp_path / "r1")
    harness.run(cfg, tmp_path / "r2")
    a = read_csv(tmp_path / "r1" / "convergence.csv")
    b = read_csv(tmp_path / "r2" / "convergence.csv")
    strip = lambda lines: [",".join(l.split(",")[:-1]) for l in lines]
    assert strip(a) == strip(b)


def test_run_dynamics_artifacts(tmp_path):
    cfg = tiny_config(
        kind="dynamics", n_values=(6,), reference_n=None, beta=2.0,
        quench_potential=fem.PotentialSpec(smooth_part=(fem.Harmonic(1.0),)),
        T=0.25, tau=1.0 / 32.0, q=2, fixed_point_tol=1e-12)
    out = harness.run(cfg, tmp_path / "d")
    lines = read_csv(tmp_path / "d" / "dynamics.csv")
    assert lines[0] == ",".join(harness.DYNAMICS_HEADER)
    assert len(lines) == 1 + 8 + 1  # header + slabs + initial row
    m = out["manifest"]
    assert m["mass_drift"] < 1e-9
    assert m["energy_drift"] < 1e-9
    assert m["dynamics"]["q"] == 2


def test_run_decay_artifacts(tmp_path):
    cfg = harness.preset_config("decay_study", n_values=(8,), ells=(1, 2, 3))
    out = harness.run(cfg, tmp_path / "s")
    lines = read_csv(tmp_path / "s" / "decay.csv")
    assert lines[0] == ",".join(harness.DECAY_HEADER)
    assert len(lines) == 4
    sig = [s for _, s in out["rows"]]
    assert sig[0] > sig[1] > sig[2]
    assert out["fit"]["slope"] < 0


def test_basis_cache_is_reused(tmp_path, monkeypatch):
    cfg = tiny_config(n_values=(6,), reference_n=None)
    coarse = mesh.build_mesh(cfg.dim, cfg.box, 6)
    fine = mesh.refine(coarse, cfg.r)
    fs = fem.FeSpace(fine, 3)
    A = harness.a_form_matrix(cfg, fs)
    first = harness.build_or_load_basis(cfg, coarse, fs, A,
                                        cache_dir=tmp_path)
    assert list(tmp_path.glob("basis-*.npz"))

    def boom(*a, **k):
        raise AssertionError("should have loaded from cache")

    monkeypatch.setattr(slod, "build_basis", boom)
    again = harness.build_or_load_basis(cfg, coarse, fs, A,
                                        cache_dir=tmp_path)
    assert np.abs((again.phi - first.phi).toarray()).max() == 0.0


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def cli_ini(tmp_path, extra=""):
    path = tmp_path / "exp.ini"
    path.write_text(textwrap.dedent(f"""\
        [experiment]
        preset = harmonic1d
        [mesh]
        n_values = 6,8
        r = 1
        [model]
        beta = 5
        [reference]
        n = 24
        {extra}
    """))
    return str(path)


def test_cli_convergence_and_ground_state(tmp_path, capsys):
    ini = cli_ini(tmp_path)
    rc = cli.main(["convergence", "--config", ini,
                   "--out", str(tmp_path / "c")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "reference energy:" in out
    assert (tmp_path / "c" / "convergence.csv").exists()

    rc = cli.main(["ground-state", "--config", ini,
                   "--out", str(tmp_path / "g"),
                   "--cache", str(tmp_path / "c" / "basis-cache")])
    assert rc == 0
    assert "converged=True" in capsys.readouterr().out


def test_cli_rejects_kind_mismatch(tmp_path):
    ini = cli_ini(tmp_path)
    with pytest.raises(SystemExit):
        cli.main(["evolve", "--config", ini, "--out", str(tmp_path / "x")])
    with pytest.raises(SystemExit):
        cli.main(["convergence", "--out", str(tmp_path / "y")])


def test_cli_basis_study(tmp_path, capsys):
    ini = tmp_path / "decay.ini"
    ini.write_text(textwrap.dedent("""\
        [experiment]
        preset = decay_study
        [mesh]
        n_values = 8
        [decay]
        ells = 1,2
    """))
    rc = cli.main(["basis-study", "--config", str(ini),
                   "--out", str(tmp_path / "b")])
    assert rc == 0
    assert "sigma_max" in capsys.readouterr().out
