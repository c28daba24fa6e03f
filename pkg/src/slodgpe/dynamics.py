"""Continuous-Galerkin time integration of the projected dynamics.

Each slab carries a degree-q polynomial (nodal at Gauss-Lobatto points,
continuous across slabs) tested against polynomials of degree q-1; the linear
part is decoupled into q shifted complex solves by diagonalising the temporal
coefficient matrix, and the cubic term is handled by fixed-point iteration
with exact temporal quadrature.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu
from scipy.special import roots_legendre
from numpy.polynomial import legendre

from . import nonlinear


@dataclass
class TimeGrid:
    T: float
    tau: float
    q: int

    def __post_init__(self):
        if self.q not in (1, 2):
            raise ValueError("supported temporal degrees are 1 and 2")
        n = round(self.T / self.tau)
        if n < 1 or abs(n * self.tau - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError("step size must divide the final time")
        self.n_slabs = n


@dataclass
class Trajectory:
    times: np.ndarray
    states: list  # coefficient vectors at the stored time nodes
    rows: list  # (t, mass, Etilde) per step
    fixed_point_iterations: list
    final: object  # final State


def _lobatto_nodes(q):
    if q == 1:
        return np.array([0.0, 1.0])
    return np.array([0.0, 0.5, 1.0])


def _lagrange_matrix(nodes, s):
    """Values of the Lagrange polynomials on ``nodes`` at the points s."""
    s = np.atleast_1d(s)
    L = np.ones((len(s), len(nodes)))
    for j, nj in enumerate(nodes):
        for k, nk in enumerate(nodes):
            if k != j:
                L[:, j] *= (s - nk) / (nj - nk)
    return L


def _lagrange_deriv_matrix(nodes, s):
    s = np.atleast_1d(s)
    D = np.zeros((len(s), len(nodes)))
    for j, nj in enumerate(nodes):
        for k, nk in enumerate(nodes):
            if k == j:
                continue
            term = np.ones(len(s)) / (nj - nk)
            for m, nm in enumerate(nodes):
                if m != j and m != k:
                    term *= (s - nm) / (nj - nm)
            D[:, j] += term
    return D


def _test_values(q, s):
    """Shifted Legendre basis of degree < q at the points s."""
    out = np.empty((q, len(s)))
    for m in range(q):
        coef = np.zeros(m + 1)
        coef[m] = 1.0
        out[m] = legendre.legval(2.0 * np.asarray(s) - 1.0, coef)
    return out


class _SlabSolver:
    """Cached factorizations and temporal matrices for one step size."""

    def __init__(self, model, tau, q):
        self.model = model
        self.tau = tau
        self.q = q
        nodes = _lobatto_nodes(q)
        self.nodes = nodes

        # temporal matrices on the reference slab [0, 1], exact Gauss rules
        x, w = roots_legendre(q + 2)
        s = 0.5 * (x + 1.0)
        ws = 0.5 * w
        psi = _test_values(q, s)  # (q, nq)
        ell = _lagrange_matrix(nodes, s)  # (nq, q+1)
        dell = _lagrange_deriv_matrix(nodes, s)
        self.K = np.einsum("mg,g,gj->mj", psi, ws, dell)  # no tau factor
        self.W = np.einsum("mg,g,gj->mj", psi, ws, ell)  # to be scaled by tau

        # nonlinearity quadrature (degree 4q - 1 integrand)
        xg, wg = roots_legendre(2 * q + 1)
        self.s_nl = 0.5 * (xg + 1.0)
        self.w_nl = 0.5 * wg
        self.psi_nl = _test_values(q, self.s_nl)
        self.ell_nl = _lagrange_matrix(nodes, self.s_nl)

        Ktil = self.K[:, 1:]
        Wtil = self.W[:, 1:]
        self._Winv = np.linalg.inv(Wtil)
        C = self._Winv @ Ktil
        D, V = np.linalg.eig(C)
        self.shifts = D
        self.V = V
        self.Vinv = np.linalg.inv(V)

        Ahat = model.A.astype(complex)
        if model.omega != 0.0:
            Ahat = Ahat + model.omega * model.R
        self.Ahat = Ahat.tocsr()
        G = model.G.astype(complex).tocsr()
        self.G = G
        self.lus = [
            splu(sparse.csc_matrix(1j * d * G - tau * Ahat)) for d in D
        ]

    def _nonlinear_loads(self, U_nodes):
        """Temporal integrals int psi_m(s) N(u(s)) ds for the current slab
        polynomial (U_nodes stacked over the q+1 Lobatto nodes)."""
        model = self.model
        n = U_nodes.shape[1]
        out = np.zeros((self.q, n), dtype=complex)
        for g, (sg, wgt) in enumerate(zip(self.s_nl, self.w_nl)):
            u_s = self.ell_nl[g] @ U_nodes
            st = model.state(u_s)
            N = nonlinear.nonlinear_term(st)
            out += wgt * np.outer(self.psi_nl[:, g], np.ones(n)) * N[None, :]
        return out

    def solve(self, u0, tol=1e-11, max_iter=50):
        """Advance one slab; returns (nodal values, iterations used) or
        raises on fixed-point failure."""
        model = self.model
        q, tau = self.q, self.tau
        n = len(u0)
        U = np.tile(u0, (q + 1, 1)).astype(complex)
        # constant part of the right-hand side from the continuity value
        base = -(
            1j * np.outer(self.K[:, 0], np.ones(n)) * (self.G @ u0)[None, :]
            - tau * np.outer(self.W[:, 0], np.ones(n))
            * (self.Ahat @ u0)[None, :]
        )
        for it in range(1, max_iter + 1):
            rhs = base + tau * model.beta * self._nonlinear_loads(U)
            R = self.Vinv @ (self._Winv @ rhs)
            new = np.empty((q, n), dtype=complex)
            for k in range(q):
                new[k] = self.lus[k].solve(R[k])
            new = self.V @ new
            diff = 0.0
            for j in range(q):
                d = new[j] - U[j + 1]
                diff = max(diff, np.sqrt(abs(np.conj(d) @ (self.G @ d))))
            U[1:] = new
            if diff <= tol:
                return U, it
        raise RuntimeError("slab fixed-point iteration did not converge")


def propagate(model, u0, grid, tol=1e-11, max_iter=50, store_every=1):
    """March the continuous-Galerkin scheme over the time grid.

    On fixed-point failure a slab is re-solved as two (then four) sub-slabs
    before giving up.
    """
    if isinstance(u0, nonlinear.State):
        state0 = u0
    else:
        state0 = model.state(np.asarray(u0, dtype=complex))
    u = state0.U.astype(complex)

    solvers = {}

    def solver_for(tau):
        if tau not in solvers:
            solvers[tau] = _SlabSolver(model, tau, grid.q)
        return solvers[tau]

    def advance(u, tau, depth):
        try:
            U, it = solver_for(tau).solve(u, tol, max_iter)
            return U[-1], it
        except RuntimeError:
            if depth >= 2:
                raise
            v, i1 = advance(u, tau / 2, depth + 1)
            v, i2 = advance(v, tau / 2, depth + 1)
            return v, i1 + i2

    def diag_row(t, u):
        st = model.state(u)
        return (t, st.mass, nonlinear.modified_energy(st))

    times = [0.0]
    states = [u.copy()]
    rows = [diag_row(0.0, u)]
    fp = []
    for step in range(1, grid.n_slabs + 1):
        u, it = advance(u, grid.tau, 0)
        fp.append(it)
        t = step * grid.tau
        rows.append(diag_row(t, u))
        if step % store_every == 0 or step == grid.n_slabs:
            times.append(t)
            states.append(u.copy())
    return Trajectory(
        times=np.array(times),
        states=states,
        rows=rows,
        fixed_point_iterations=fp,
        final=model.state(u),
    )


def temporal_order_study(model, u0, T, taus, q, ref_refine=4):
    """Self-convergence table: errors at the final time in the G-norm against
    a reference run at the smallest step divided by ``ref_refine``."""
    tau_ref = min(taus) / ref_refine
    ref = propagate(model, u0, TimeGrid(T, tau_ref, q),
                    store_every=10 ** 9).final.U
    G = model.G
    rows = []
    prev = None
    for tau in sorted(taus, reverse=True):
        out = propagate(model, u0, TimeGrid(T, tau, q), store_every=10 ** 9)
        d = out.final.U - ref
        err = float(np.sqrt(abs(np.conj(d) @ (G @ d))))
        eoc = None
        if prev is not None:
            eoc = np.log(prev[1] / err) / np.log(prev[0] / tau)
        rows.append((tau, err, eoc))
        prev = (tau, err)
    return rows
