import numpy as np
import pytest
import scipy.linalg as sla

from slodgpe import fem, mesh, slod, nonlinear, groundstate, dynamics


def make_model(beta, n=8, ell=2, box=8.0):
    coarse = mesh.build_mesh(1, [(-box, box)], n)
    fine = mesh.refine(coarse, 1)
    fs = fem.FeSpace(fine, 3)
    A = fem.assemble_stiffness(fs)
    basis = slod.build_basis(coarse, fs, A, ell)
    return nonlinear.Model(basis, fem.Harmonic(0.5), beta=beta)


@pytest.fixture(scope="module")
def model():
    return make_model(2.0)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        dynamics.TimeGrid(1.0, 1.0 / 8, q=3)
    with pytest.raises(ValueError):
        dynamics.TimeGrid(1.0, 0.3, q=2)  # 0.3 does not divide 1.0
    grid = dynamics.TimeGrid(1.0, 1.0 / 16, q=2)
    assert grid.n_slabs == 16


def test_linear_evolution_is_phase_rotation():
    """With no interaction an eigenvector only acquires the phase
    exp(-i*lambda*t)."""
    model = make_model(0.0)
    w, V = sla.eigh(model.A.toarray(), model.G.toarray())
    u0 = model.normalise(V[:, 0].astype(complex)).U
    T = 0.5
    out = dynamics.propagate(model, u0, dynamics.TimeGrid(T, 1.0 / 64, q=2),
                             tol=1e-13)
    exact = np.exp(-1j * w[0] * T) * u0
    d = out.final.U - exact
    err = np.sqrt(abs(np.conj(d) @ (model.G @ d)))
    assert err < 1e-9


def test_mass_and_modified_energy_conserved(model):
    st0 = groundstate.initial_state(
        model, groundstate.GroundStateConfig(beta=model.beta))
    # quench: evolve under a steeper trap than the initial state was built for
    quenched = nonlinear.Model(model.basis, fem.Harmonic(1.0),
                               beta=model.beta)
    out = dynamics.propagate(quenched, quenched.normalise(st0.U).U,
                             dynamics.TimeGrid(1.0, 1.0 / 64, q=2),
                             tol=1e-13)
    masses = np.array([r[1] for r in out.rows])
    energies = np.array([r[2] for r in out.rows])
    assert np.abs(masses - masses[0]).max() < 1e-10
    scale = max(abs(energies[0]), 1.0)
    assert np.abs(energies - energies[0]).max() / scale < 1e-9


def test_fixed_point_iterations_stay_bounded(model):
    st0 = groundstate.initial_state(
        model, groundstate.GroundStateConfig(beta=model.beta))
    out = dynamics.propagate(model, st0.U, dynamics.TimeGrid(0.25, 1.0 / 32,
                                                             q=2), tol=1e-12)
    assert max(out.fixed_point_iterations) <= 10


def test_trajectory_storage(model):
    st0 = groundstate.initial_state(
        model, groundstate.GroundStateConfig(beta=model.beta))
    grid = dynamics.TimeGrid(0.5, 1.0 / 16, q=1)
    out = dynamics.propagate(model, st0.U, grid, store_every=4)
    assert len(out.rows) == grid.n_slabs + 1  # every step is diagnosed
    assert len(out.times) == len(out.states) == 3  # t = 0, 0.25, 0.5
    assert out.times[-1] == pytest.approx(grid.T)
    assert np.array_equal(out.states[-1], out.final.U)


@pytest.mark.parametrize("q,expect", [(1, 2.0), (2, 4.0)])
def test_temporal_order(q, expect):
    model = make_model(2.0, n=6)
    st0 = groundstate.initial_state(
        model, groundstate.GroundStateConfig(beta=model.beta))
    rows = dynamics.temporal_order_study(
        model, st0.U, T=0.5, taus=(1.0 / 8, 1.0 / 16, 1.0 / 32), q=q)
    eocs = [r[2] for r in rows if r[2] is not None]
    assert abs(eocs[-1] - expect) < (0.4 if q == 2 else 0.3)
