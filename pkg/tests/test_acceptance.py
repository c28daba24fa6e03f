"""End-to-end acceptance checks.

Each test prints a single pass/fail line (run with -s to see them) and
pins the tolerances of the corresponding guarantee. Expensive runs are
shared through module-scoped fixtures; per-criterion wall-clock budgets
count only the work the criterion itself requires.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from slodgpe import (fem, mesh, slod, nonlinear, groundstate, dynamics,
                     harness)

ROTATION_ENERGIES = (10.7191, 10.7254, 10.7304, 10.7323)  # published energies


def _report(num, ok, detail):
    print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num}: {detail}"


def cubic_bspline(t):
    t = np.abs(np.asarray(t, dtype=float))
    out = np.zeros_like(t)
    inner = t < 1
    out[inner] = 4 - 6 * t[inner] ** 2 + 3 * t[inner] ** 3
    outer = (t >= 1) & (t < 2)
    out[outer] = (2 - t[outer]) ** 3
    return out


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def smooth2d_run(out_root):
    t0 = time.perf_counter()
    cfg = harness.preset_config("smooth2d")
    result = harness.run(cfg, out_root / "smooth2d")
    result["wall"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="module")
def indicator_runs(out_root):
    """Indicator preset table plus two finer levels for the limit fit."""
    t0 = time.perf_counter()
    cfg = harness.preset_config("indicator2d")
    cache = out_root / "indicator-cache"
    result = harness.run(cfg, out_root / "indicator2d", cache_dir=cache)
    tail = [harness.solve_level(cfg, n, cache_dir=cache) for n in (48, 64)]
    return {"config": cfg, "table": result["table"],
            "levels": result["levels"], "tail": tail,
            "wall": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def rotation_runs(out_root):
    t0 = time.perf_counter()
    cache = out_root / "rotation-cache"
    runs = []
    for seed in range(5):
        cfg = harness.preset_config("rotation2d", seed=seed)
        level = harness.solve_level(cfg, 60, cache_dir=cache)
        E, Et, lam, lam_t = harness._reported_energies(cfg, level)
        runs.append({"config": cfg, "level": level, "E": E, "Etilde": Et,
                     "lambda": lam})
    return {"runs": runs, "wall": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def quench_run(out_root):
    t0 = time.perf_counter()
    cfg = harness.preset_config("dynamics1d", fixed_point_tol=1e-13)
    result = harness.run(cfg, out_root / "dynamics1d")
    result["wall"] = time.perf_counter() - t0
    result["config"] = cfg
    return result


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_1_perfect_1d_localisation():
    t0 = time.perf_counter()
    worst = 0.0
    mu_max = 0.0
    for n in (8, 16):
        coarse = mesh.build_mesh(1, [(0.0, 1.0)], n)
        fine = mesh.refine(coarse, 2)
        fs = fem.FeSpace(fine, 3)
        A = fem.assemble_stiffness(fs)
        basis = slod.build_basis(coarse, fs, A, 1)
        H = coarse.H
        phi = basis.phi.toarray()
        for j, z in enumerate(basis.nodes):
            zc = coarse.vertices[z, 0]
            if zc - 2 * H < 1e-12 or zc + 2 * H > 1.0 - 1e-12:
                continue  # patch touches the boundary
            patch = mesh.node_patch(coarse, z, 1)
            _, mu = slod.optimal_rhs(slod.local_problem(coarse, fs, A, patch))
            mu_max = max(mu_max, mu)
            exact = cubic_bspline((fs.dof_coords[:, 0] - zc) / H)
            col = phi[:, j]
            k = np.abs(exact).argmax()
            worst = max(worst, np.abs(col - (col[k] / exact[k]) * exact).max())
    wall = time.perf_counter() - t0
    ok = worst <= 1e-10 and mu_max <= 1e-18 and wall < 5.0
    _report(1, ok, f"max B-spline deviation {worst:.2e}, "
                   f"mu_min worst {mu_max:.2e}, {wall:.1f}s")


def test_criterion_2_localisation_decay(out_root):
    t0 = time.perf_counter()
    cfg = harness.preset_config("decay_study")
    result = harness.run(cfg, out_root / "decay")
    wall = time.perf_counter() - t0
    sig = [s for _, s in result["rows"]]
    decreasing = all(a > b for a, b in zip(sig, sig[1:]))
    r2 = result["fit"]["r2"]
    ok = decreasing and r2 >= 0.9 and wall < 600.0
    _report(2, ok, f"sigma {['%.2e' % s for s in sig]}, r2={r2:.3f}, "
                   f"{wall:.0f}s")


def test_criterion_3_smooth_2d_energy(smooth2d_run):
    e_ref = smooth2d_run["reference"]
    table = smooth2d_run["table"]
    errs = [abs(r["E"] - e_ref) for r in table]
    ws = [r["H"] for r in table]
    eocs = harness.eoc(errs, ws)[1:]
    wall = smooth2d_run["wall"]
    ok = (min(eocs) >= 5.5 and errs[-1] <= 1e-6 and wall < 1800.0)
    _report(3, ok, f"EOC {['%.2f' % e for e in eocs]}, "
                   f"finest error {errs[-1]:.2e}, {wall:.0f}s")


def test_criterion_4_modified_energy_gap(indicator_runs):
    table = indicator_runs["table"]
    tail = indicator_runs["tail"]
    # extrapolated limit from the four finest levels, where the observed
    # order of E is approximately constant
    fit_E = [table[-2]["E"], table[-1]["E"]] + [
        lv["result"].energy for lv in tail]
    fit_H = [table[-2]["H"], table[-1]["H"]] + [lv["H"] for lv in tail]
    e_star = harness.richardson(fit_E, fit_H)["limit"]
    ws = [r["H"] for r in table]
    errs_E = [abs(r["E"] - e_star) for r in table]
    errs_Et = [abs(r["Etilde"] - e_star) for r in table]
    eoc_E = harness.eoc(errs_E, ws)[-1]
    eoc_Et = harness.eoc(errs_Et, ws)[-1]
    wall = indicator_runs["wall"]
    ok = (3.5 <= eoc_Et <= 5.0 and eoc_E >= 5.5 and wall < 2700.0)
    _report(4, ok, f"E*={e_star:.9f}, EOC(Etilde)={eoc_Et:.2f}, "
                   f"EOC(E)={eoc_E:.2f}, {wall:.0f}s")


def test_criterion_5_energy_sandwich(indicator_runs):
    t0 = time.perf_counter()
    slack = 1e-12
    checks = []
    # 1d: discontinuous lattice potential, meshes inside the regime where
    # the projection gap dominates the compression error
    pot = fem.PotentialSpec(
        smooth_part=(fem.Harmonic(0.5),),
        rough_part=(fem.FloorSine(5.0, 2.0, np.pi / 3.0),))
    for n in (32, 48):
        cfg = harness.preset_config(
            "custom", kind="ground_state", dim=1, box=((-6.0, 6.0),),
            n_values=(n,), ell=2, r=2, beta=100.0, potential=pot,
            a_form="with_rough")
        lv = harness.solve_level(cfg, n)
        ref = harness.reference_solution(cfg, n * cfg.r)
        res = lv["result"]
        checks.append((f"1d n={n}", res.modified_energy, ref.energy,
                       res.energy))
    # 2d: finest indicator level against a direct solve on its fine mesh
    cfg2 = indicator_runs["config"]
    lv2 = indicator_runs["levels"][-1]
    ref2 = harness.reference_solution(cfg2, lv2["n"] * cfg2.r)
    res2 = lv2["result"]
    checks.append((f"2d n={lv2['n']}", res2.modified_energy, ref2.energy,
                   res2.energy))
    wall = time.perf_counter() - t0
    ok = all(et <= er + slack and er <= e + slack
             for _, et, er, e in checks) and wall < 300.0
    detail = "; ".join(
        f"{tag}: Etilde-Eref={et - er:.1e}, Eref-E={er - e:.1e}"
        for tag, et, er, e in checks)
    _report(5, ok, detail + f", {wall:.0f}s")


def test_criterion_6_eigenvalue_formulas(smooth2d_run, rotation_runs):
    worst = 0.0
    states = []
    for lv in smooth2d_run["levels"]:
        states.append((lv["model"], lv["result"], 1.0))
    for run in rotation_runs["runs"]:
        if run["level"]["result"].converged:
            states.append((run["level"]["model"], run["level"]["result"],
                           1.0))
    for model, res, _ in states:
        st = res.state
        c = nonlinear.project_density(st)
        lam = 2.0 * res.energy + 0.5 * model.beta * model.quartic(st)
        lam_t = (2.0 * res.modified_energy
                 + 0.5 * model.beta * float(c @ (model.G @ c)))
        worst = max(worst,
                    abs(res.eigenvalue - lam) / abs(lam),
                    abs(res.modified_eigenvalue - lam_t) / abs(lam_t))
    ok = worst <= 1e-9 and len(states) >= 4
    _report(6, ok, f"{len(states)} converged states, worst relative "
                   f"identity error {worst:.2e}")


def test_criterion_7_rotation_energies(rotation_runs):
    hits = []
    for run in rotation_runs["runs"]:
        res = run["level"]["result"]
        if not res.converged or res.residual_history[-1] > 1e-8:
            continue
        dist = min(abs(run["E"] - v) for v in ROTATION_ENERGIES)
        if dist <= 1e-2:
            hits.append((run["config"].seed, run["E"], dist))
    wall = rotation_runs["wall"]
    ok = bool(hits) and wall < 1800.0
    detail = "; ".join(f"seed {s}: E={e:.5f} (dist {d:.1e})"
                       for s, e, d in hits) or "no converged run near table"
    _report(7, ok, detail + f", {wall:.0f}s")


def test_criterion_8_dynamics_conservation(quench_run):
    m = quench_run["manifest"]
    wall = quench_run["wall"]
    ok = (m["mass_drift"] <= 1e-10 and m["energy_drift"] <= 1e-9
          and wall < 300.0)
    _report(8, ok, f"mass drift {m['mass_drift']:.2e}, modified-energy "
                   f"drift {m['energy_drift']:.2e}, {wall:.0f}s")


def test_criterion_9_temporal_order(quench_run):
    t0 = time.perf_counter()
    cfg = quench_run["config"]
    level = quench_run["level"]
    model = nonlinear.Model(level["basis"], cfg.quench_potential, cfg.beta)
    u0 = model.normalise(level["result"].state.U.astype(complex)).U
    slopes = {}
    for q, taus in ((1, (1 / 8, 1 / 16, 1 / 32)),
                    (2, (1 / 32, 1 / 64, 1 / 128))):
        rows = dynamics.temporal_order_study(model, u0, T=1.0, taus=taus,
                                             q=q)
        slopes[q] = rows[-1][2]
    wall = time.perf_counter() - t0
    ok = (abs(slopes[1] - 2.0) <= 0.3 and abs(slopes[2] - 4.0) <= 0.4
          and wall < 900.0)
    _report(9, ok, f"q=1 slope {slopes[1]:.2f}, q=2 slope {slopes[2]:.2f}, "
                   f"{wall:.0f}s")


def test_criterion_10_property_suites():
    t0 = time.perf_counter()
    here = Path(__file__).parent
    targets = [
        str(here / "test_nonlinear.py"),
        str(here / "test_slod.py::test_untruncated_basis_spans_ideal_od_space"),
        str(here / "test_slod.py::test_ideal_basis_is_a_orthogonal_to_kernel"),
        str(here / "test_groundstate.py::test_beta_zero_reduces_to_smallest_eigenpair"),
    ]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", *targets],
                          capture_output=True, text=True)
    wall = time.perf_counter() - t0
    ok = proc.returncode == 0 and wall < 300.0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout else ""
    _report(10, ok, f"{tail}, {wall:.0f}s")
