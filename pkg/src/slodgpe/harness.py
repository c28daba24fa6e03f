"""Experiment presets, convergence sweeps and artifact emission.

A run takes an ExperimentConfig (usually one of the named presets, possibly
overridden from an INI file), solves the requested study and writes CSV
tables plus a JSON manifest of every resolved parameter. Basis archives are
cached per (mesh, fine resolution, patch order, a-form) key and reused across
runs.
"""

import configparser
import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sparse
from scipy.optimize import least_squares

from . import fem, mesh, slod, nonlinear, groundstate, dynamics

CSV_SCHEMA_VERSION = 1

CONVERGENCE_HEADER = ("H", "E", "E_err", "Etilde", "Etilde_err", "lambda",
                      "iters", "seconds")
DECAY_HEADER = ("ell", "sigma_max")
DYNAMICS_HEADER = ("t", "mass", "Etilde")

REFERENCE_DOF_GUARD = 200_000


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    preset: str
    kind: str  # ground_state | dynamics | decay
    dim: int
    box: tuple  # ((lo, hi),) * dim
    n_values: tuple
    ell: int = 2
    r: int = 2
    beta: float = 0.0
    omega: float = 0.0
    potential: object = None  # fem.PotentialSpec
    a_form: str = "canonical"  # "canonical" or "with_rough"
    switch_residual: float = 0.1
    tol_residual: float = 1e-10
    max_iter: int = 500
    init: object = "gaussian"
    seed: int = 0
    n_boundary: object = None
    reference_value: object = None  # known limit energy, if any
    reference_n: object = None  # mesh size for a direct fine reference
    report_doubled: bool = False  # publish 2E / matching eigenvalue
    quench_potential: object = None
    T: float = 1.0
    tau: float = 1.0 / 128.0
    q: int = 2
    fixed_point_tol: float = 1e-11
    ells: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.kind not in ("ground_state", "dynamics", "decay"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        self.box = tuple((float(a), float(b)) for a, b in self.box)
        self.n_values = tuple(int(n) for n in self.n_values)
        if not self.n_values:
            raise ValueError("need at least one mesh size")
        if self.kind == "dynamics" and self.quench_potential is None:
            raise ValueError("dynamics runs need a quench potential")

    def mesh_width(self, n):
        lo, hi = self.box[0]
        return (hi - lo) / n


def _harmonic_trap(c):
    return fem.PotentialSpec(smooth_part=(fem.Harmonic(c),))


def _presets():
    square6 = ((-6.0, 6.0), (-6.0, 6.0))
    square10 = ((-10.0, 10.0), (-10.0, 10.0))
    table = {}
    table["smooth2d"] = dict(
        kind="ground_state", dim=2, box=square6,
        n_values=(20, 28, 40, 56), ell=2, r=2, beta=50.0,
        potential=fem.PotentialSpec(smooth_part=(
            fem.Harmonic(0.5),
            fem.GaussianSum([(4.0, 0, 0.0, 1.0), (4.0, 1, 0.0, 1.0)]),
        )),
        a_form="canonical",
        reference_value=7.082310561,
    )
    table["discont2d"] = dict(
        kind="ground_state", dim=2, box=square6,
        n_values=(8, 12, 18, 24), ell=2, r=3, beta=100.0,
        potential=fem.PotentialSpec(
            smooth_part=(fem.Harmonic(0.5),),
            rough_part=(fem.FloorSine(5.0, 2.0, np.pi / 3.0),),
        ),
        a_form="with_rough",
        reference_value=8.30472428538,
    )
    table["indicator2d"] = dict(
        kind="ground_state", dim=2, box=square6,
        n_values=(8, 12, 16, 24, 32), ell=2, r=2, beta=100.0,
        potential=fem.PotentialSpec(
            smooth_part=(fem.Harmonic(0.5),),
            rough_part=(fem.HalfPlaneIndicators([2.0, 2.0]),),
        ),
        a_form="with_rough",
    )
    # solved internally with the halved functional (V/2, Omega/2, beta/2);
    # energies and eigenvalues are reported in the published doubled scale
    table["rotation2d"] = dict(
        kind="ground_state", dim=2, box=square10,
        n_values=(60,), ell=2, r=2, beta=500.0, omega=0.425,
        potential=_harmonic_trap(0.25),
        a_form="canonical",
        init="random_rotational",
        switch_residual=3e-3, tol_residual=1e-8, max_iter=2000,
        report_doubled=True,
    )
    table["harmonic1d"] = dict(
        kind="ground_state", dim=1, box=((-10.0, 10.0),),
        n_values=(8, 16, 32, 64), ell=2, r=2, beta=50.0,
        potential=_harmonic_trap(0.5),
        a_form="canonical",
        reference_n=256,
    )
    table["harmonic2d"] = dict(
        kind="ground_state", dim=2, box=square10,
        n_values=(10, 14, 20, 28), ell=2, r=2, beta=50.0,
        potential=_harmonic_trap(0.5),
        a_form="canonical",
        reference_value=2.896031852200792,
    )
    table["dynamics1d"] = dict(
        kind="dynamics", dim=1, box=((-10.0, 10.0),),
        n_values=(16,), ell=2, r=2, beta=2.0,
        potential=_harmonic_trap(0.5),
        quench_potential=_harmonic_trap(1.0),
        a_form="canonical",
        T=1.0, tau=1.0 / 128.0, q=2,
    )
    table["dynamics2d"] = dict(
        kind="dynamics", dim=2, box=square10,
        n_values=(8,), ell=2, r=2, beta=2.0,
        potential=_harmonic_trap(0.5),
        quench_potential=_harmonic_trap(1.0),
        a_form="canonical",
        T=0.5, tau=1.0 / 64.0, q=2,
    )
    table["decay_study"] = dict(
        kind="decay", dim=2, box=((0.0, 1.0), (0.0, 1.0)),
        n_values=(32,), r=1, a_form="canonical", ells=(1, 2, 3, 4),
    )
    return table


PRESETS = _presets()


def preset_config(name, **overrides):
    """Build the configuration of a named preset, optionally overriding
    individual fields (custom presets must supply everything)."""
    if name == "custom":
        params = {}
    elif name in PRESETS:
        params = dict(PRESETS[name])
    else:
        raise ValueError(f"unknown preset {name!r}")
    params.update(overrides)
    return ExperimentConfig(preset=name, **params)


# ---------------------------------------------------------------------------
# INI files
# ---------------------------------------------------------------------------

def _parse_potential_term(text):
    name, _, args = text.strip().partition(":")
    vals = [float(v) for v in args.split(",")] if args.strip() else []
    name = name.strip()
    if name == "harmonic":
        return fem.Harmonic(*vals)
    if name == "gaussian":
        if len(vals) % 4:
            raise ValueError("gaussian terms take amplitude,axis,center,width")
        return fem.GaussianSum(
            [(vals[i], int(vals[i + 1]), vals[i + 2], vals[i + 3])
             for i in range(0, len(vals), 4)])
    if name == "lattice":
        return fem.OpticalLattice(*vals)
    if name == "half_plane":
        return fem.HalfPlaneIndicators(vals)
    if name == "floor_sine":
        return fem.FloorSine(*vals)
    raise ValueError(f"unknown potential term {name!r}")


def _parse_potential(smooth_text, rough_text):
    smooth = tuple(_parse_potential_term(t)
                   for t in smooth_text.split("+") if t.strip())
    rough = tuple(_parse_potential_term(t)
                  for t in rough_text.split("+") if t.strip())
    if not smooth and not rough:
        return None
    return fem.PotentialSpec(smooth_part=smooth, rough_part=rough)


def _parse_box(text, dim):
    parts = [p for p in text.split(";") if p.strip()]
    if len(parts) == 1:
        parts = parts * dim
    if len(parts) != dim:
        raise ValueError("box needs one lo,hi pair, or one per axis")
    return tuple(tuple(float(v) for v in p.split(",")) for p in parts)


def load_config(path, seed=None):
    """Read an experiment configuration from an INI file (grammar in the
    README); any field present overrides the preset's value."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as f:
        cp.read_file(f)
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    name = exp.get("preset", "custom")
    over = {}

    def grab(section, key, cast, dest=None):
        if cp.has_section(section) and key in cp[section]:
            over[dest or key] = cast(cp[section][key])

    grab("experiment", "kind", str)
    grab("experiment", "seed", int)
    grab("mesh", "dim", int)
    grab("mesh", "n_values", lambda t: tuple(int(v) for v in t.split(",")))
    grab("mesh", "ell", int)
    grab("mesh", "r", int)
    grab("model", "beta", float)
    grab("model", "omega", float)
    grab("model", "a_form", str)
    grab("solver", "switch_residual", float)
    grab("solver", "tol_residual", float)
    grab("solver", "max_iter", int)
    grab("solver", "init", str)
    grab("solver", "n_boundary", int)
    grab("reference", "value", float, "reference_value")
    grab("reference", "n", int, "reference_n")
    grab("dynamics", "T", float)
    grab("dynamics", "tau", float)
    grab("dynamics", "q", int)
    grab("dynamics", "fixed_point_tol", float)
    grab("decay", "ells", lambda t: tuple(int(v) for v in t.split(",")))

    dim = over.get("dim", PRESETS.get(name, {}).get("dim"))
    if cp.has_section("mesh") and "box" in cp["mesh"]:
        if dim is None:
            raise ValueError("box given without a dimension")
        over["box"] = _parse_box(cp["mesh"]["box"], dim)
    if cp.has_section("model") and (
            "potential" in cp["model"] or "rough_potential" in cp["model"]):
        pot = _parse_potential(cp["model"].get("potential", ""),
                               cp["model"].get("rough_potential", ""))
        if pot is not None:
            over["potential"] = pot
    if cp.has_section("dynamics") and "quench_potential" in cp["dynamics"]:
        over["quench_potential"] = _parse_potential(
            cp["dynamics"]["quench_potential"], "")

    if seed is not None:
        over["seed"] = int(seed)
    return preset_config(name, **over)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def a_form_matrix(config, fine_space):
    """Fine-space matrix of the inner product defining the basis: canonical
    half-Laplacian, optionally augmented by the rough potential part."""
    A = fem.assemble_stiffness(fine_space)
    if config.a_form == "with_rough":
        rough = config.potential.rough_only()
        if rough.terms:
            A = A + fem.assemble_potential(fine_space, rough)
    elif config.a_form != "canonical":
        raise ValueError(f"unknown a_form {config.a_form!r}")
    return A.tocsr()


def a_form_key(config):
    if config.a_form == "with_rough":
        return "canonical+" + config.potential.rough_only().key()
    return "canonical"


def build_or_load_basis(config, coarse_mesh, fine_space, a_form,
                        cache_dir=None, ell=None):
    """SLOD basis for one mesh level, read from the cache directory when the
    key matches and written back after a fresh build."""
    ell = config.ell if ell is None else ell
    n_boundary = config.n_boundary or slod.DEFAULT_N_BOUNDARY[config.dim]
    key = slod.basis_cache_key(coarse_mesh, fine_space.mesh.n, ell,
                               n_boundary, a_form_key(config))
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"basis-{key[:16]}.npz"
        if path.exists():
            coarse_space = fem.FeSpace(coarse_mesh, 1)
            basis = slod.load_basis(path, key, fine_space, coarse_space,
                                    a_form)
            if basis is not None:
                return basis
    basis = slod.build_basis(coarse_mesh, fine_space, a_form, ell,
                             config.n_boundary)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        slod.save_basis(path, basis, key)
    return basis


def identity_basis(fine_space, a_form=None):
    """Trivial basis whose columns are the interior fine-space dofs; turns
    the compressed solvers into a direct fine-space minimisation."""
    free = np.nonzero(~fine_space.dirichlet_mask)[0]
    n = fine_space.n_dofs
    phi = sparse.csr_matrix(
        (np.ones(free.size), (free, np.arange(free.size))),
        shape=(n, free.size))
    if a_form is None:
        a_form = fem.assemble_stiffness(fine_space)
    mass = fem.assemble_mass(fine_space)
    return slod.SlodBasis(
        phi=phi, p=phi.copy(), sigma=np.zeros(free.size), ell=0,
        nodes=free, gram=(phi.T @ mass @ phi).tocsr(),
        a_matrix=(phi.T @ a_form @ phi).tocsr(),
        fine_space=fine_space, coarse_space=None)


def _ground_state_config(config):
    return groundstate.GroundStateConfig(
        beta=config.beta, omega=config.omega,
        switch_residual=config.switch_residual,
        tol_residual=config.tol_residual,
        max_iter=config.max_iter, init=config.init, seed=config.seed)


def reference_solution(config, n_fine):
    """Ground state computed directly in the fine P3 space (no compression),
    by the same descent/endgame solver; the oracle for error columns."""
    if (3 * n_fine + 1) ** config.dim > REFERENCE_DOF_GUARD:
        raise ValueError("reference mesh exceeds the direct-solve guard")
    m = mesh.build_mesh(config.dim, config.box, n_fine)
    fs = fem.FeSpace(m, 3)
    basis = identity_basis(fs, a_form_matrix(config, fs))
    model = nonlinear.Model(basis, config.potential, config.beta,
                            config.omega)
    return groundstate.ground_state(_ground_state_config(config), model)


# ---------------------------------------------------------------------------
# extrapolation and orders
# ---------------------------------------------------------------------------

def eoc(errors, widths):
    """Experimental orders log(err_{i-1}/err_i)/log(H_{i-1}/H_i); the first
    entry has no predecessor and is None."""
    out = [None]
    for i in range(1, len(errors)):
        out.append(float(np.log(errors[i - 1] / errors[i])
                         / np.log(widths[i - 1] / widths[i])))
    return out


def richardson(energies, widths):
    """Fit E(H) = E* + c H^p to a convergence table and return the
    extrapolated limit with the fitted order.

    Refuses sequences whose increments are not one-signed and shrinking
    (no power law to fit)."""
    E = np.asarray(energies, dtype=float)
    H = np.asarray(widths, dtype=float)
    if len(E) < 3:
        raise ValueError("extrapolation needs at least three rows")
    order = np.argsort(-H)
    E, H = E[order], H[order]
    d = np.diff(E)
    if np.any(d == 0.0) or not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("energy increments change sign; refusing "
                         "extrapolation")
    if np.any(np.abs(d[1:]) >= np.abs(d[:-1])):
        raise ValueError("energy increments are not shrinking; refusing "
                         "extrapolation")

    p0 = float(np.log(abs(d[-2]) / abs(d[-1])) / np.log(H[-2] / H[-1]))
    p0 = min(max(p0, 0.5), 12.0)
    c0 = d[-1] / (H[-2] ** p0 - H[-1] ** p0)
    e0 = E[-1] - c0 * H[-1] ** p0

    def model(x):
        est, c, p = x
        return est + c * H ** p - E

    # bounds keep the solver out of the degenerate p -> 0 valley where
    # est + c H^p collapses to a constant
    fit = least_squares(model, x0=np.array([e0, c0, p0]), method="trf",
                        bounds=([-np.inf, -np.inf, 0.5],
                                [np.inf, np.inf, 12.0]),
                        xtol=1e-15, ftol=1e-15)
    est, c, p = fit.x
    return {"limit": float(est), "order": float(p), "coefficient": float(c)}


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def solve_level(config, n, cache_dir=None):
    """Solve the ground-state problem of one mesh level; returns the
    ground-state result plus the basis and timing."""
    t0 = time.perf_counter()
    coarse = mesh.build_mesh(config.dim, config.box, n)
    fine = mesh.refine(coarse, config.r)
    fs = fem.FeSpace(fine, 3)
    A = a_form_matrix(config, fs)
    basis = build_or_load_basis(config, coarse, fs, A, cache_dir)
    model = nonlinear.Model(basis, config.potential, config.beta,
                            config.omega)
    result = groundstate.ground_state(_ground_state_config(config), model)
    return {
        "n": n,
        "H": config.mesh_width(n),
        "basis": basis,
        "model": model,
        "result": result,
        "seconds": time.perf_counter() - t0,
    }


def _reported_energies(config, level):
    """Energies/eigenvalues in the published scale of the preset."""
    res = level["result"]
    E, Et = res.energy, res.modified_energy
    lam, lam_t = res.eigenvalue, res.modified_eigenvalue
    if config.report_doubled:
        st = res.state
        model = level["model"]
        beta_pub = 2.0 * config.beta
        c = nonlinear.project_density(st)
        E, Et = 2.0 * E, 2.0 * Et
        lam = E + 0.5 * beta_pub * model.quartic(st)
        lam_t = Et + 0.5 * beta_pub * float(c @ (model.G @ c))
    return E, Et, lam, lam_t


def _run_convergence(config, out_dir, cache_dir, threads):
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        levels = list(pool.map(
            lambda n: solve_level(config, n, cache_dir), config.n_values))

    table = []
    for lv in levels:
        E, Et, lam, _ = _reported_energies(config, lv)
        table.append({"H": lv["H"], "E": E, "Etilde": Et, "lambda": lam,
                      "iters": lv["result"].iterations,
                      "seconds": lv["seconds"],
                      "converged": lv["result"].converged})

    manifest_extra = {}
    e_ref = config.reference_value
    if e_ref is None and config.reference_n is not None:
        ref = reference_solution(config, config.reference_n)
        e_ref = 2.0 * ref.energy if config.report_doubled else ref.energy
        manifest_extra["reference"] = {"kind": "direct_fine",
                                       "n": config.reference_n,
                                       "energy": e_ref}
    elif e_ref is not None:
        manifest_extra["reference"] = {"kind": "given", "energy": e_ref}
    if e_ref is None and len(table) >= 3:
        try:
            fit = richardson([r["E"] for r in table],
                             [r["H"] for r in table])
            e_ref = fit["limit"]
            manifest_extra["reference"] = dict(fit, kind="richardson")
        except ValueError as exc:
            manifest_extra["reference"] = {"kind": "unavailable",
                                           "detail": str(exc)}

    rows = []
    for r in table:
        e_err = abs(r["E"] - e_ref) if e_ref is not None else ""
        et_err = abs(r["Etilde"] - e_ref) if e_ref is not None else ""
        rows.append((r["H"], r["E"], e_err, r["Etilde"], et_err,
                     r["lambda"], r["iters"], r["seconds"]))
    _write_csv(Path(out_dir) / "convergence.csv", CONVERGENCE_HEADER, rows)

    if e_ref is not None:
        errs = [abs(r["E"] - e_ref) for r in table]
        ws = [r["H"] for r in table]
        if all(e > 0 for e in errs):
            manifest_extra["eoc_E"] = eoc(errs, ws)
        errs_t = [abs(r["Etilde"] - e_ref) for r in table]
        if all(e > 0 for e in errs_t):
            manifest_extra["eoc_Etilde"] = eoc(errs_t, ws)
    manifest_extra["table"] = table
    return {"levels": levels, "table": table, "reference": e_ref,
            "manifest": manifest_extra}


def _run_dynamics(config, out_dir, cache_dir):
    level = solve_level(config, config.n_values[0], cache_dir)
    basis = level["basis"]
    model = nonlinear.Model(basis, config.quench_potential, config.beta,
                            config.omega)
    u0 = model.normalise(level["result"].state.U.astype(complex))
    grid = dynamics.TimeGrid(config.T, config.tau, config.q)
    traj = dynamics.propagate(model, u0, grid, tol=config.fixed_point_tol)
    _write_csv(Path(out_dir) / "dynamics.csv", DYNAMICS_HEADER, traj.rows)
    masses = np.array([r[1] for r in traj.rows])
    etils = np.array([r[2] for r in traj.rows])
    extra = {
        "initial_energy": level["result"].energy,
        "mass_drift": float(np.abs(masses - masses[0]).max()),
        "energy_drift": float(np.abs(etils - etils[0]).max()
                              / max(1.0, abs(etils[0]))),
        "fixed_point_iterations_max": int(max(traj.fixed_point_iterations)),
    }
    return {"level": level, "trajectory": traj, "manifest": extra}


def _run_decay(config, out_dir):
    n = config.n_values[0]
    coarse = mesh.build_mesh(config.dim, config.box, n)
    fine = mesh.refine(coarse, config.r)
    fs = fem.FeSpace(fine, 3)
    A = a_form_matrix(config, fs)
    rows, fit = slod.localisation_decay_study(coarse, fs, A, config.ells,
                                              config.n_boundary)
    _write_csv(Path(out_dir) / "decay.csv", DECAY_HEADER, rows)
    return {"rows": rows, "fit": fit, "manifest": {"fit": fit}}


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])


def _manifest(config, extra):
    def pot_key(p):
        return None if p is None else p.key()

    out = {
        "schema_version": CSV_SCHEMA_VERSION,
        "preset": config.preset,
        "kind": config.kind,
        "dim": config.dim,
        "box": [list(b) for b in config.box],
        "n_values": list(config.n_values),
        "ell": config.ell,
        "r": config.r,
        "beta": config.beta,
        "omega": config.omega,
        "potential": pot_key(config.potential),
        "a_form": config.a_form,
        "switch_residual": config.switch_residual,
        "tol_residual": config.tol_residual,
        "max_iter": config.max_iter,
        "init": config.init if isinstance(config.init, str) else "explicit",
        "seed": config.seed,
        "n_boundary": config.n_boundary,
    }
    if config.report_doubled:
        out["published_scale"] = {"beta": 2.0 * config.beta,
                                  "omega": 2.0 * config.omega,
                                  "note": "energies reported as 2E"}
    if config.kind == "dynamics":
        out["dynamics"] = {"T": config.T, "tau": config.tau, "q": config.q,
                           "quench_potential": pot_key(
                               config.quench_potential),
                           "fixed_point_tol": config.fixed_point_tol}
    if config.kind == "decay":
        out["ells"] = list(config.ells)
    out.update(extra)
    return out


def run(config, out_dir, threads=1, cache_dir=None):
    """Execute one experiment and write its artifacts (CSV tables and a
    manifest.json of all resolved parameters) into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cache_dir is None:
        cache_dir = out / "basis-cache"
    Path(cache_dir).mkdir(parents=True, exist_ok=True)

    if config.kind == "decay":
        result = _run_decay(config, out)
    elif config.kind == "dynamics":
        result = _run_dynamics(config, out, cache_dir)
    else:
        result = _run_convergence(config, out, cache_dir, threads)

    manifest = _manifest(config, result.pop("manifest"))
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True,
                  default=_json_default)
        f.write("\n")
    result["manifest"] = manifest
    return result
