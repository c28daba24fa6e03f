"""Super-localized basis construction.

For every interior coarse node z a local problem is solved on the patch
omega_ell(z): among all coarse P1 right-hand sides p supported in the patch,
pick the one whose fine-scale response has the smallest conormal flux through
the patch boundary (a small generalized eigenproblem).  The response of the
optimal p, extended by zero, is the basis function of z.  Near the domain
boundary several near-optimal candidates are combined by minimising an
artificial quadratic trap centered at z.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as dla
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from . import fem

#: default number of combined candidates for patches touching the boundary
DEFAULT_N_BOUNDARY = {1: 2, 2: 4, 3: 6}

CACHE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# patch dof classification (all done on the integer dof lattices, so the
# strict-interiority tests are exact)
# ---------------------------------------------------------------------------

def _patch_box_lattice(patch, space):
    """Patch box bounds in units of the space's dof lattice spacing."""
    mesh = space.mesh
    steps = space.degree * mesh.n  # lattice points per axis minus one
    rel = (patch.box - mesh.box[:, :1]) / (mesh.box[:, 1:] - mesh.box[:, :1])
    return np.rint(rel * steps).astype(np.int64)


def _free_lattice_dofs(patch, space):
    """Dofs strictly inside the clipped patch box (zero trace on the whole
    patch boundary, including its intersection with the domain boundary)."""
    b = _patch_box_lattice(patch, space)
    g = space.dof_grid
    inside = np.all((g > b[:, 0]) & (g < b[:, 1]), axis=1)
    return np.nonzero(inside)[0]


def _patch_fine_elements(patch, fine_space):
    """Fine elements whose closure lies in the patch box."""
    fmesh = fine_space.mesh
    rel = (patch.box - fmesh.box[:, :1]) / (fmesh.box[:, 1:] - fmesh.box[:, :1])
    b = np.rint(rel * fmesh.n).astype(np.int64)
    cells = fmesh.cells
    ok = np.all((cells >= b[:, 0]) & (cells < b[:, 1]), axis=1)
    return np.nonzero(np.repeat(ok, fmesh.simplices_per_cell))[0]


# ---------------------------------------------------------------------------
# flux map
# ---------------------------------------------------------------------------

class FluxMap:
    """Samples the conormal derivative -grad(w).n of a fine patch solution on
    the patch boundary faces away from the domain boundary.

    The rows of ``matrix`` are pre-scaled with square roots of the face
    quadrature weights, so ``norm(w) = ||matrix @ w||_2`` is the exact
    L2(boundary) norm of the piecewise-polynomial flux.
    """

    def __init__(self, matrix, n_faces):
        self.matrix = matrix
        self.n_faces = n_faces

    def __call__(self, w):
        return self.matrix @ w

    def norm(self, w):
        return np.linalg.norm(self.matrix @ w)


def _boundary_faces(fine_space, elements):
    """Boundary faces of the element set: (owner element, face vertices,
    opposite vertex) for each face appearing exactly once."""
    fmesh = fine_space.mesh
    d = fmesh.dim
    simp = fmesh.simplices[elements]
    faces, owners, opps = [], [], []
    for drop in range(d + 1):
        keep = [k for k in range(d + 1) if k != drop]
        faces.append(np.sort(simp[:, keep], axis=1))
        owners.append(elements)
        opps.append(simp[:, drop])
    faces = np.concatenate(faces, axis=0)
    owners = np.concatenate(owners)
    opps = np.concatenate(opps)
    uniq, first, counts = np.unique(
        faces, axis=0, return_index=True, return_counts=True
    )
    sel = first[counts == 1]
    return faces[sel], owners[sel], opps[sel]


def _flux_map(fine_space, elements, free_fine):
    """Flux sampling matrix on the boundary faces of the element set that do
    not lie on the domain boundary."""
    fmesh = fine_space.mesh
    d = fmesh.dim
    faces, owners, opps = _boundary_faces(fine_space, elements)
    grid = fmesh.vertex_grid
    # drop faces on the domain boundary (exact test on the integer grid)
    fg = grid[faces]  # (n_faces, vertices per face, dim)
    on_dom = np.zeros(len(faces), dtype=bool)
    for axis in range(d):
        on_dom |= np.all(fg[:, :, axis] == 0, axis=1)
        on_dom |= np.all(fg[:, :, axis] == fmesh.n, axis=1)
    keep = ~on_dom
    faces, owners, opps = faces[keep], owners[keep], opps[keep]

    col_of = -np.ones(fine_space.n_dofs, dtype=np.int64)
    col_of[free_fine] = np.arange(len(free_fine))

    if len(faces) == 0:
        return FluxMap(sparse.csr_matrix((0, len(free_fine))), 0)

    fq_pts, fq_wts = fem.face_quadrature(d, 4)
    nq = len(fq_wts)
    h = fmesh.H
    jface = {1: 1.0, 2: h, 3: h * h}[d]

    rows, cols, vals = [], [], []
    row0 = 0
    for f, e, opp in zip(faces, owners, opps):
        vcoords = fmesh.vertices[f]  # (d, dim)
        if d == 1:
            phys = vcoords.reshape(1, 1)
        else:
            v0 = vcoords[0]
            phys = v0 + fq_pts @ (vcoords[1:] - v0)
        # axis on which all face vertices agree; normal points away from the
        # opposite vertex
        fgrid = grid[f]
        axis = int(np.nonzero(
            np.all(fgrid == fgrid[0], axis=0)
        )[0][0]) if d > 1 else 0
        sign = 1.0 if fgrid[0, axis] > grid[opp, axis] else -1.0

        ref = fine_space.map_to_reference(e, phys)
        t = fine_space.element_type[e]
        g = np.einsum(
            "qja,ab->qjb", fine_space.basis.grad(ref), fine_space.type_invJ[t]
        )
        block = -sign * g[:, :, axis]  # (nq, nloc), flux rows
        block = block * np.sqrt(fq_wts * jface)[:, None]
        dofs = fine_space.element_dofs[e]
        cdx = col_of[dofs]
        m = cdx >= 0
        r, c = np.nonzero(np.broadcast_to(m, block.shape) & (block != 0.0))
        rows.append(row0 + r)
        cols.append(cdx[c])
        vals.append(block[r, c])
        row0 += nq
    E = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row0, len(free_fine)),
    )
    return FluxMap(E, len(faces))


# ---------------------------------------------------------------------------
# local problems
# ---------------------------------------------------------------------------

@dataclass
class LocalProblem:
    """Patch restriction of the fine operator together with the coarse load
    map, the flux sampler and the coarse patch mass matrix."""

    patch: object
    free_fine: np.ndarray
    free_coarse: np.ndarray
    matrix: sparse.spmatrix  # fine a-matrix on the free patch dofs
    load: np.ndarray  # dense (n_free_fine, n_free_coarse) coarse load map
    flux: FluxMap
    mass: np.ndarray  # dense coarse patch mass matrix
    touches_boundary: bool
    _lu: object = field(default=None, repr=False)

    def solve(self, rhs):
        if self._lu is None:
            self._lu = splu(self.matrix.tocsc())
        return self._lu.solve(rhs)


def _shared_operators(mesh, fine_space, a_form):
    """Global operators reused by every patch."""
    coarse_space = fem.FeSpace(mesh, 1)
    mass_fine = fem.assemble_mass(fine_space)
    injection = fem.p1_injection(coarse_space, fine_space)
    return {
        "coarse_space": coarse_space,
        "mass_fine": mass_fine,
        "coupling": (mass_fine @ injection).tocsc(),
        "mass_coarse": fem.assemble_mass(coarse_space).tocsc(),
        "a_form": a_form.tocsc(),
    }


def local_problem(mesh, fine_space, a_form, patch, shared=None):
    """Restrict the fine problem to the patch.

    Fine dofs carry homogeneous Dirichlet data on the whole patch boundary;
    coarse right-hand sides are spanned by the hats strictly inside the patch.
    """
    if shared is None:
        shared = _shared_operators(mesh, fine_space, a_form)
    coarse_space = shared["coarse_space"]
    free_fine = _free_lattice_dofs(patch, fine_space)
    free_coarse = _free_lattice_dofs(patch, coarse_space)
    if len(free_coarse) == 0:
        raise ValueError("patch has no unconstrained coarse dof")
    A_loc = shared["a_form"][free_fine][:, free_fine]
    B_loc = shared["coupling"][free_fine][:, free_coarse].toarray()
    M_loc = shared["mass_coarse"][free_coarse][:, free_coarse].toarray()
    elements = _patch_fine_elements(patch, fine_space)
    flux = _flux_map(fine_space, elements, free_fine)
    return LocalProblem(
        patch=patch,
        free_fine=free_fine,
        free_coarse=free_coarse,
        matrix=A_loc,
        load=B_loc,
        flux=flux,
        mass=M_loc,
        touches_boundary=patch.domain_boundary_faces.size > 0,
    )


def _flux_eigenpairs(lp):
    """All eigenpairs of the flux-minimisation problem, ordered by increasing
    flux; also returns the fine responses of the coarse loads."""
    S = lp.solve(lp.load)
    if S.ndim == 1:
        S = S[:, None]
    F = lp.flux.matrix @ S
    Q = F.T @ F
    Q = 0.5 * (Q + Q.T)
    mu, vecs = dla.eigh(Q, lp.mass)
    if mu[0] < -1e-12:
        raise RuntimeError(f"negative flux eigenvalue {mu[0]:.3e}")
    return mu, vecs, S


def optimal_rhs(lp):
    """The unit-L2 coarse load minimising the boundary flux of its response,
    and the attained minimum (the squared localisation proxy)."""
    mu, vecs, _ = _flux_eigenpairs(lp)
    return vecs[:, 0], float(mu[0])


def boundary_combination(lp, fine_space, candidates, center):
    """Combine flux-minimising candidates for a patch touching the domain
    boundary: minimise the artificial trap int |x-center|^2/H^2 |w|^2 over
    unit-norm combinations (candidates are L2-orthonormal)."""
    n = candidates.shape[1]
    if n == 1:
        return candidates[:, 0] / np.sqrt(
            candidates[:, 0] @ lp.mass @ candidates[:, 0]
        )
    responses = lp.solve(lp.load @ candidates)
    H = lp.patch.mesh.H
    weight = lambda x: np.sum((x - center) ** 2, axis=-1) / H ** 2
    W = weighted_mass(fine_space, weight, degree=8,
                      elements=_patch_fine_elements(lp.patch, fine_space),
                      rows=lp.free_fine)
    T = responses.T @ W @ responses
    T = 0.5 * (T + T.T)
    _, v = dla.eigh(T)
    c = v[:, 0]
    return candidates @ (c / np.linalg.norm(c))


def weighted_mass(space, weight, degree, elements=None, rows=None):
    """Matrix of (weight * u, v) over the given elements (all by default).

    With ``rows`` given, restricted to that dof subset (dense-friendly
    sub-csr is still returned sparse on the subset indexing).
    """
    if elements is None:
        elements = np.arange(space.mesh.n_simplices)
    pts, wts = fem.quadrature_rule(space.mesh.dim, degree)
    vals = space.basis.eval(pts)
    phys = space.map_to_physical(elements, pts)
    V = weight(phys.reshape(-1, space.mesh.dim)).reshape(len(elements), -1)
    loc = np.einsum("eq,qj,qk->ejk", V * (wts * space.detJ), vals, vals)
    W = fem._scatter(space, elements, loc)
    if rows is not None:
        W = W[rows][:, rows]
    return W


# ---------------------------------------------------------------------------
# the basis
# ---------------------------------------------------------------------------

@dataclass
class SlodBasis:
    """Fine-space coefficients of the localized basis.

    phi: (fine dofs x columns) sparse; p: (coarse dofs x columns) sparse
    optimal loads; sigma: per-column localisation proxy; gram / a_matrix:
    compressed mass and a-form.
    """

    phi: sparse.spmatrix
    p: sparse.spmatrix
    sigma: np.ndarray
    ell: int
    nodes: np.ndarray  # coarse vertex id of each column
    gram: sparse.spmatrix
    a_matrix: sparse.spmatrix
    fine_space: object = None
    coarse_space: object = None

    @property
    def n_columns(self):
        return self.phi.shape[1]


def _interior_coarse_nodes(mesh):
    return np.nonzero(~mesh.boundary_vertex_mask)[0]


def _fine_dof_at_vertex(mesh, fine_space, vertex):
    """Fine dof id sitting exactly on the coarse vertex."""
    scale = fine_space.degree * fine_space.mesh.n // mesh.n
    g = mesh.vertex_grid[vertex] * scale
    strides = (fine_space.degree * fine_space.mesh.n + 1) ** np.arange(mesh.dim)
    return int(g @ strides)


def build_basis(mesh, fine_space, a_form, ell, n_boundary=None):
    """Construct one localized basis function per interior coarse node."""
    from . import mesh as mesh_mod

    if n_boundary is None:
        n_boundary = DEFAULT_N_BOUNDARY[mesh.dim]
    shared = _shared_operators(mesh, fine_space, a_form)
    nodes = _interior_coarse_nodes(mesh)
    A_csr = a_form.tocsr()

    rows, cols, vals = [], [], []
    prow, pcol, pval = [], [], []
    sigma = np.empty(len(nodes))
    for j, z in enumerate(nodes):
        patch = mesh_mod.node_patch(mesh, z, ell)
        lp = local_problem(mesh, fine_space, a_form, patch, shared)
        mu, vecs, _ = _flux_eigenpairs(lp)
        if lp.touches_boundary:
            if lp.flux.n_faces == 0:
                n_cand = vecs.shape[1]  # untruncated patch: free choice
            else:
                n_cand = min(n_boundary, vecs.shape[1])
            p_star = boundary_combination(
                lp, fine_space, vecs[:, :n_cand], mesh.vertices[z]
            )
        else:
            # the smallest flux eigenvalue can be (numerically) degenerate,
            # e.g. in 1d for ell >= 2 every spline supported inside the patch
            # has zero boundary flux; break the tie by the same artificial
            # trap used on boundary patches so the column concentrates at z
            # (otherwise neighbouring nodes may pick parallel columns)
            gap = 1e-8 * max(float(mu[-1]), 1.0)
            cluster = int(np.searchsorted(mu, mu[0] + gap, side="right"))
            if cluster > 1:
                p_star = boundary_combination(
                    lp, fine_space, vecs[:, :cluster], mesh.vertices[z]
                )
            else:
                p_star = vecs[:, 0]
        response = lp.solve(lp.load @ p_star)
        F = lp.flux.matrix @ response
        sigma[j] = np.sqrt(max(float(F @ F), 0.0))

        # deterministic sign: positive value at the fine dof on z
        dz = _fine_dof_at_vertex(mesh, fine_space, z)
        pos = np.nonzero(lp.free_fine == dz)[0]
        anchor = response[pos[0]] if len(pos) else response[
            np.argmax(np.abs(response))
        ]
        s = -1.0 if anchor < 0 else 1.0
        # a-normalisation of the extended response
        full = np.zeros(fine_space.n_dofs)
        full[lp.free_fine] = response
        anorm = np.sqrt(full @ (A_csr @ full))
        response = (s / anorm) * response

        rows.append(lp.free_fine)
        cols.append(np.full(len(lp.free_fine), j))
        vals.append(response)
        prow.append(lp.free_coarse)
        pcol.append(np.full(len(lp.free_coarse), j))
        pval.append(s * p_star)

    n_fine = fine_space.n_dofs
    n_coarse = shared["coarse_space"].n_dofs
    phi = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine, len(nodes)),
    )
    P = sparse.csr_matrix(
        (np.concatenate(pval), (np.concatenate(prow), np.concatenate(pcol))),
        shape=(n_coarse, len(nodes)),
    )
    gram = (phi.T @ shared["mass_fine"] @ phi).tocsr()
    a_mat = (phi.T @ a_form @ phi).tocsr()
    return SlodBasis(
        phi=phi,
        p=P,
        sigma=sigma,
        ell=ell,
        nodes=nodes,
        gram=gram,
        a_matrix=a_mat,
        fine_space=fine_space,
        coarse_space=shared["coarse_space"],
    )


def riesz_diagnostic(basis):
    """Conditioning of the optimal loads: eigenvalue range of their L2 Gram
    matrix, reported as max(lambda_max, 1/lambda_min)."""
    M_H = fem.assemble_mass(basis.coarse_space)
    G = (basis.p.T @ M_H @ basis.p).toarray()
    lam = dla.eigvalsh(0.5 * (G + G.T))
    if lam[0] <= 0:
        raise RuntimeError("optimal loads are linearly dependent")
    return float(max(lam[-1], 1.0 / lam[0]))


def ideal_od_basis(mesh, fine_space, a_form):
    """Untruncated basis via global solves (small problems only): column z is
    the global response of the coarse hat at z."""
    if fine_space.n_dofs > 5 * 10 ** 4:
        raise ValueError("ideal basis is restricted to small fine spaces")
    shared = _shared_operators(mesh, fine_space, a_form)
    free = np.nonzero(~fine_space.dirichlet_mask)[0]
    nodes = _interior_coarse_nodes(mesh)
    A_free = shared["a_form"][free][:, free]
    lu = splu(A_free.tocsc())
    B = shared["coupling"][free][:, nodes].toarray()
    X = lu.solve(B)
    A_csr = a_form.tocsr()
    phi = np.zeros((fine_space.n_dofs, len(nodes)))
    for j, z in enumerate(nodes):
        full = np.zeros(fine_space.n_dofs)
        full[free] = X[:, j]
        dz = _fine_dof_at_vertex(mesh, fine_space, z)
        s = -1.0 if full[dz] < 0 else 1.0
        full *= s / np.sqrt(full @ (A_csr @ full))
        phi[:, j] = full
    phi = sparse.csr_matrix(phi)
    P = sparse.csr_matrix(
        (np.ones(len(nodes)), (nodes, np.arange(len(nodes)))),
        shape=(shared["coarse_space"].n_dofs, len(nodes)),
    )
    gram = (phi.T @ shared["mass_fine"] @ phi).tocsr()
    a_mat = (phi.T @ a_form @ phi).tocsr()
    return SlodBasis(
        phi=phi,
        p=P,
        sigma=np.zeros(len(nodes)),
        ell=-1,
        nodes=nodes,
        gram=gram,
        a_matrix=a_mat,
        fine_space=fine_space,
        coarse_space=shared["coarse_space"],
    )


def localisation_decay_study(mesh, fine_space, a_form, ells, n_boundary=None):
    """Table of (ell, max_z sigma_z); in 2d also a least-squares fit of
    log(sigma_max) against ell^2 with its squared correlation."""
    rows = []
    for ell in ells:
        basis = build_basis(mesh, fine_space, a_form, ell, n_boundary)
        rows.append((int(ell), float(basis.sigma.max())))
    fit = None
    if mesh.dim == 2 and len(rows) >= 2:
        x = np.array([r[0] ** 2 for r in rows], dtype=float)
        y = np.log(np.maximum([r[1] for r in rows], 1e-300))
        slope, intercept = np.polyfit(x, y, 1)
        r = np.corrcoef(x, y)[0, 1]
        fit = {"slope": float(slope), "intercept": float(intercept),
               "r2": float(r * r)}
    return rows, fit


# ---------------------------------------------------------------------------
# basis cache
# ---------------------------------------------------------------------------

def basis_cache_key(mesh, fine_n, ell, n_boundary, form_key):
    """Deterministic key for a basis: mesh geometry, fine resolution, patch
    order, boundary candidate count and a textual a-form descriptor."""
    payload = repr((
        mesh.dim, mesh.n, [list(map(float, b)) for b in mesh.box],
        int(fine_n), int(ell), int(n_boundary), str(form_key),
    ))
    return hashlib.sha256(payload.encode()).hexdigest()


def save_basis(path, basis, key):
    """Dump a basis to a versioned npz archive."""
    phi = basis.phi.tocsr()
    p = basis.p.tocsr()
    np.savez_compressed(
        path,
        format_version=np.int64(CACHE_FORMAT_VERSION),
        key=np.frombuffer(bytes.fromhex(key), dtype=np.uint8),
        ell=np.int64(basis.ell),
        nodes=basis.nodes,
        sigma=basis.sigma,
        phi_data=phi.data, phi_indices=phi.indices, phi_indptr=phi.indptr,
        phi_shape=np.array(phi.shape),
        p_data=p.data, p_indices=p.indices, p_indptr=p.indptr,
        p_shape=np.array(p.shape),
    )


def load_basis(path, key, fine_space, coarse_space, a_form):
    """Load a cached basis; returns None on version or key mismatch."""
    try:
        with np.load(path) as z:
            if int(z["format_version"]) != CACHE_FORMAT_VERSION:
                return None
            if bytes(z["key"].tobytes()).hex() != key:
                return None
            phi = sparse.csr_matrix(
                (z["phi_data"], z["phi_indices"], z["phi_indptr"]),
                shape=tuple(z["phi_shape"]),
            )
            p = sparse.csr_matrix(
                (z["p_data"], z["p_indices"], z["p_indptr"]),
                shape=tuple(z["p_shape"]),
            )
            ell = int(z["ell"])
            nodes = z["nodes"]
            sigma = z["sigma"]
    except (OSError, KeyError, ValueError):
        return None
    mass_fine = fem.assemble_mass(fine_space)
    gram = (phi.T @ mass_fine @ phi).tocsr()
    a_mat = (phi.T @ a_form @ phi).tocsr()
    return SlodBasis(
        phi=phi, p=p, sigma=sigma, ell=ell, nodes=nodes,
        gram=gram, a_matrix=a_mat,
        fine_space=fine_space, coarse_space=coarse_space,
    )
