"""Energies and nonlinear terms over a compressed basis.

The cubic term is assembled exactly through a reference-simplex tensor of
triple products of the fine P3 shape functions; the density |u|^2 is replaced
by its L2-projection onto the basis span wherever the modified energy is
involved.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from . import fem


def reference_tensor(dim):
    """omega[i,j,k] = integral of v_i v_j v_k over the reference simplex for
    the local P3 basis (degree-9 integrand, integrated exactly)."""
    basis = fem.ReferenceBasis(dim, 3)
    pts, wts = fem.quadrature_rule(dim, 9)
    vals = basis.eval(pts)
    return np.einsum("q,qi,qj,qk->ijk", wts, vals, vals, vals)


@dataclass
class State:
    """Coefficients over the basis columns with the cached fine function."""

    U: np.ndarray
    fine: np.ndarray  # Phi @ U
    mass: float
    model: object
    normalised: bool = False


class Model:
    """Compressed operators of one Gross-Pitaevskii configuration.

    Binds a localized basis to the full potential, the interaction strength
    beta and the rotation speed omega, and carries the machinery for exact
    cubic-term assembly.
    """

    def __init__(self, basis, potential, beta, omega=0.0):
        self.basis = basis
        self.potential = potential
        self.beta = float(beta)
        self.omega = float(omega)
        fs = basis.fine_space
        self.fine_space = fs
        phi = basis.phi.tocsr()
        self.phi = phi

        K = fem.assemble_stiffness(fs)
        Vmat = fem.assemble_potential(fs, potential)
        self.mass_fine = fem.assemble_mass(fs)
        A = (phi.T @ (K + Vmat) @ phi).tocsr()
        self.A = A
        if self.omega != 0.0:
            R_h = fem.assemble_form(fs, "rotation")
            self.R = (phi.T @ R_h @ phi).tocsr()
        else:
            self.R = sparse.csr_matrix(A.shape)
        self.G = basis.gram.tocsr()
        self._G_lu = splu(self.G.tocsc())

        self.tensor = reference_tensor(fs.mesh.dim)
        nloc = self.tensor.shape[0]
        self._w2 = self.tensor.reshape(nloc * nloc, nloc)
        self._w1 = self.tensor.reshape(nloc, nloc * nloc)
        self._ed = fs.element_dofs
        self._detJ = fs.detJ
        pts, wts = fem.quadrature_rule(fs.mesh.dim, fem.MAX_QUAD_DEGREE)
        self._vals12 = fs.basis.eval(pts)
        self._wts12 = wts * fs.detJ

    # -- states -----------------------------------------------------------

    def state(self, U, normalised=False):
        U = np.asarray(U)
        fine = self.phi @ U
        mass = float(np.real(np.conj(U) @ (self.G @ U)))
        if normalised and abs(mass - 1.0) > 1e-8:
            raise ValueError(f"state flagged normalised has mass {mass!r}")
        return State(U=U, fine=fine, mass=mass, model=self,
                     normalised=normalised)

    def normalise(self, U):
        m = np.real(np.conj(U) @ (self.G @ U))
        U = U / np.sqrt(m)
        # heavy cancellation in the quadratic form can leave a residue well
        # above round-off; one refinement pass restores unit mass
        m = np.real(np.conj(U) @ (self.G @ U))
        if abs(m - 1.0) > 1e-14:
            U = U / np.sqrt(m)
        return self.state(U, normalised=True)

    def solve_gram(self, rhs):
        if np.iscomplexobj(rhs):
            return self._G_lu.solve(rhs.real) + 1j * self._G_lu.solve(rhs.imag)
        return self._G_lu.solve(rhs)

    def project_fine(self, f_fine):
        """Basis coefficients of the L2 projection of a fine-space function."""
        return self.solve_gram(self.phi.T @ (self.mass_fine @ f_fine))

    # -- elementwise contractions ------------------------------------------

    def _gather(self, fine_vec):
        return fine_vec[self._ed]  # (nel, nloc)

    def _scatter_fine(self, local):
        idx = self._ed.ravel()
        n = self.fine_space.n_dofs
        if np.iscomplexobj(local):
            return (
                np.bincount(idx, weights=local.real.ravel(), minlength=n)
                + 1j * np.bincount(idx, weights=local.imag.ravel(), minlength=n)
            )
        return np.bincount(idx, weights=local.ravel(), minlength=n)

    def density_rhs(self, state):
        """Fine load vector of the density: entries <|u_h|^2, fine phi>."""
        return self.pair_rhs(state.fine, state.fine)

    def pair_rhs(self, uf, vf):
        """Fine load vector of the polarised density Re(u conj(v))."""
        u = self._gather(uf)
        v = self._gather(vf)
        C = np.real(u[:, :, None] * np.conj(v)[:, None, :])
        local = self._detJ * (C.reshape(len(u), -1) @ self._w2)
        return self._scatter_fine(local)

    def quartic(self, state):
        """Exact integral of |u_h|^4 (degree-12 elementwise quadrature)."""
        u = self._gather(state.fine)
        uq = u @ self._vals12.T  # (nel, nq)
        rho = np.abs(uq) ** 2
        return float(np.einsum("eq,q->", rho * rho, self._wts12))

    def weighted_gram_fine(self, w_fine):
        """Compressed matrix of <w u, v> for a fine-space weight function
        (exact through the reference tensor; complex weights allowed)."""
        w_loc = self._gather(w_fine)
        nloc = self.tensor.shape[0]
        local = self._detJ * (w_loc @ self._w1).reshape(-1, nloc, nloc)
        W = fem._scatter(self.fine_space, np.arange(len(w_loc)), local)
        return (self.phi.T @ W @ self.phi).tocsr()

    def weighted_gram(self, c):
        """Compressed matrix of <w u, v> with weight w = fine function with
        basis coefficients c (exact through the reference tensor)."""
        return self.weighted_gram_fine(self.phi @ c)


def project_density(state, model=None):
    """Coefficients c of the L2 projection of |u_h|^2 onto the basis span:
    G c = b with b_z = <|u_h|^2, phi_z>."""
    model = model or state.model
    b = model.phi.T @ model.density_rhs(state)
    imag = np.abs(np.imag(b)).max() if np.iscomplexobj(b) else 0.0
    if imag > 1e-12:
        raise RuntimeError(f"density has imaginary residue {imag:.3e}")
    return model.solve_gram(np.real(b))


def nonlinear_term(state, c=None):
    """Vector N with N_z = <P(|u|^2) u, phi_z>, assembled exactly."""
    model = state.model
    if c is None:
        c = project_density(state)
    c_loc = model._gather(model.phi @ c)
    u_loc = model._gather(state.fine)
    C = c_loc[:, :, None] * u_loc[:, None, :]
    local = model._detJ * (C.reshape(len(c_loc), -1) @ model._w2)
    return model.phi.T @ model._scatter_fine(local)


def _quadratic_part(state):
    model = state.model
    U = state.U
    q = np.real(np.conj(U) @ (model.A @ U))
    if model.omega != 0.0:
        q += model.omega * np.real(np.conj(U) @ (model.R @ U))
    return q


def energy(state, beta=None, omega=None):
    """E = u'Au + omega u'Ru + (beta/2) int |u|^4 (full potential)."""
    model = state.model
    beta = model.beta if beta is None else beta
    if omega is not None and omega != model.omega:
        raise ValueError("omega is fixed by the model")
    return _quadratic_part(state) + 0.5 * beta * model.quartic(state)


def modified_energy(state, c=None, beta=None):
    """Etilde: the quartic term evaluated on the projected density, i.e.
    (beta/2) c'Gc with Gc = <|u|^2, phi>."""
    model = state.model
    beta = model.beta if beta is None else beta
    if c is None:
        c = project_density(state)
    return _quadratic_part(state) + 0.5 * beta * float(c @ (model.G @ c))


def _require_normalised(state):
    if abs(state.mass - 1.0) > 1e-8:
        raise ValueError(f"state is not normalised (mass {state.mass!r})")


def eigenvalue(state, beta=None):
    """lambda = 2 E(u) + (beta/2) ||u||_{L4}^4 for a normalised state."""
    _require_normalised(state)
    model = state.model
    beta = model.beta if beta is None else beta
    return 2.0 * energy(state, beta) + 0.5 * beta * model.quartic(state)


def modified_eigenvalue(state, c=None, beta=None):
    """lambda-tilde = 2 Etilde(u) + (beta/2) ||P(|u|^2)||^2."""
    _require_normalised(state)
    model = state.model
    beta = model.beta if beta is None else beta
    if c is None:
        c = project_density(state)
    return (
        2.0 * modified_energy(state, c, beta)
        + 0.5 * beta * float(c @ (model.G @ c))
    )


def rayleigh(state, c=None):
    """Stationarity multiplier of the modified problem: u'(A + omega R)u +
    beta <P(|u|^2) u, u> for a unit-mass state."""
    model = state.model
    if c is None:
        c = project_density(state)
    return (
        _quadratic_part(state) + model.beta * float(c @ (model.G @ c))
    ) / state.mass


def euler_lagrange_residual(state, c=None):
    """G-inverse norm of A u + omega R u + beta N(u) - mu G u with the
    Rayleigh multiplier mu (vanishes exactly at stationary states)."""
    model = state.model
    if c is None:
        c = project_density(state)
    r = model.A @ state.U + model.beta * nonlinear_term(state, c)
    if model.omega != 0.0:
        r = r + model.omega * (model.R @ state.U)
    r = r - rayleigh(state, c) * (model.G @ state.U)
    return float(np.sqrt(np.real(np.conj(r) @ model.solve_gram(r))))
