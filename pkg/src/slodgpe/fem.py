"""Lagrange P1/P3 finite elements on Cartesian simplicial meshes.

Assembly of stiffness (with the 1/2 factor of the energy form), mass,
potential (with exact treatment of discontinuous potentials), and the
rotation term, plus the L2 projection onto coarse P1.
"""

import itertools

import numpy as np
import scipy.sparse as sparse
from scipy.optimize import brentq
from scipy.special import roots_jacobi, roots_legendre

MAX_QUAD_DEGREE = 12


# ---------------------------------------------------------------------------
# quadrature on the reference simplex {x >= 0, sum x <= 1}
# ---------------------------------------------------------------------------

def quadrature_rule(dim, degree):
    """Points and weights integrating polynomials of the given total degree
    exactly on the reference simplex.  Collapsed tensor Gauss-Jacobi rule."""
    if degree > MAX_QUAD_DEGREE:
        raise ValueError(f"quadrature degree {degree} > {MAX_QUAD_DEGREE} unsupported")
    degree = max(degree, 1)
    m = (degree + dim) // 2 + 1  # enough points for degree + Jacobian factors
    if dim == 1:
        x, w = roots_legendre(m)
        pts = ((x + 1) / 2)[:, None]
        return pts, w / 2
    rules = []
    for k in range(dim):
        alpha = dim - 1 - k  # weight (1-u)^alpha absorbed into the rule
        if alpha == 0:
            x, w = roots_legendre(m)
        else:
            x, w = roots_jacobi(m, alpha, 0.0)
        u = (x + 1) / 2
        w = w / 2 ** (alpha + 1)
        rules.append((u, w))
    pts = []
    wts = []
    for combo in itertools.product(*[range(m)] * dim):
        coords = np.empty(dim)
        rem = 1.0
        weight = 1.0
        for k in range(dim):
            u, w = rules[k]
            coords[k] = u[combo[k]] * rem
            weight *= w[combo[k]]
            rem -= coords[k]
        pts.append(coords)
        wts.append(weight)
    return np.array(pts), np.array(wts)


def face_quadrature(dim, degree):
    """Rule on the reference (dim-1)-simplex for boundary-face integrals."""
    if dim == 1:
        return np.zeros((1, 0)), np.array([1.0])
    return quadrature_rule(dim - 1, degree)


# ---------------------------------------------------------------------------
# Lagrange shape functions
# ---------------------------------------------------------------------------

def lagrange_nodes(dim, k):
    """Barycentric multi-indices (over dim+1 vertices, summing to k) and the
    corresponding reference coordinates of the Lagrange nodes."""
    alphas = []
    for combo in itertools.product(range(k + 1), repeat=dim):
        if sum(combo) <= k:
            alphas.append((k - sum(combo),) + combo)
    alphas = np.array(alphas, dtype=np.int64)
    coords = alphas[:, 1:] / k
    return alphas, coords


def _monomial_exponents(dim, k):
    exps = []
    for combo in itertools.product(range(k + 1), repeat=dim):
        if sum(combo) <= k:
            exps.append(combo)
    return np.array(exps, dtype=np.int64)


def _eval_monomials(exps, points):
    vals = np.ones((points.shape[0], exps.shape[0]))
    for a in range(points.shape[1]):
        vals *= points[:, a][:, None] ** exps[:, a][None, :]
    return vals


def _eval_monomial_grads(exps, points):
    npts, d = points.shape
    grads = np.zeros((npts, exps.shape[0], d))
    for a in range(d):
        e = exps.copy()
        coef = e[:, a].astype(float)
        e[:, a] = np.maximum(e[:, a] - 1, 0)
        grads[:, :, a] = coef * _eval_monomials(e, points)
    return grads


class ReferenceBasis:
    """Lagrange basis of degree k on the reference simplex."""

    def __init__(self, dim, k):
        self.dim = dim
        self.k = k
        self.alphas, self.nodes = lagrange_nodes(dim, k)
        self.exps = _monomial_exponents(dim, k)
        V = _eval_monomials(self.exps, self.nodes)
        self.coeffs = np.linalg.inv(V)  # column j = monomial coeffs of phi_j

    def eval(self, points):
        return _eval_monomials(self.exps, np.atleast_2d(points)) @ self.coeffs

    def grad(self, points):
        g = _eval_monomial_grads(self.exps, np.atleast_2d(points))
        return np.einsum("qma,mj->qja", g, self.coeffs)


# ---------------------------------------------------------------------------
# finite element space
# ---------------------------------------------------------------------------

class FeSpace:
    """Conforming Lagrange space of degree k in {1, 3} on a mesh.

    Global dofs live on the (k*n+1)^d lattice of the underlying grid (every
    Lagrange node of every simplex is a lattice point), ordered with the x
    index fastest.
    """

    def __init__(self, mesh, degree):
        if degree not in (1, 3):
            raise ValueError("only degrees 1 and 3 are supported")
        self.mesh = mesh
        self.degree = degree
        d, n, k = mesh.dim, mesh.n, degree
        self.basis = ReferenceBasis(d, k)
        npts = k * n + 1
        self.lattice_shape = (npts,) * d
        idx = np.stack(
            np.meshgrid(*[np.arange(npts)] * d, indexing="ij"), axis=-1
        ).reshape(-1, d, order="F")
        self.dof_grid = idx
        self.dof_coords = mesh.box[:, 0] + (
            mesh.box[:, 1] - mesh.box[:, 0]
        ) * (idx / (k * n))
        self.dirichlet_mask = np.any((idx == 0) | (idx == k * n), axis=1)

        # element -> dof map: lattice index of node alpha of element e is
        # sum_i alpha_i * g_i with g_i the vertex grid coordinates
        strides = npts ** np.arange(d)
        # lattice index of node alpha = sum_i alpha_i * g_i with g_i the
        # vertex grid coordinates (alpha sums to k, lattice spacing H/k)
        vgrid = mesh.vertex_grid[mesh.simplices]  # (nel, d+1, d)
        self.element_dofs = np.einsum(
            "na,eai->eni", self.basis.alphas, vgrid
        ) @ strides

        # per-element geometry, grouped by congruence type
        nloc = self.basis.nodes.shape[0]
        self.n_loc = nloc
        self.n_types = mesh.simplices_per_cell
        self.element_type = np.tile(
            np.arange(self.n_types), mesh.n_simplices // self.n_types
        )
        verts = mesh.vertices[mesh.simplices[: self.n_types]]
        self.type_v0 = verts[:, 0]
        self.type_J = np.transpose(verts[:, 1:] - verts[:, :1], (0, 2, 1))
        self.type_detJ = np.abs(np.linalg.det(self.type_J))
        self.type_invJ = np.linalg.inv(self.type_J)
        # all types share |det J| on a Cartesian mesh
        self.detJ = float(self.type_detJ[0])

    @property
    def n_dofs(self):
        return self.dof_coords.shape[0]

    def elements_of_type(self, t):
        return np.nonzero(self.element_type == t)[0]

    def map_to_physical(self, elements, ref_points):
        """Physical coordinates of reference points in the given elements."""
        t = self.element_type[elements]
        v0 = self.mesh.vertices[self.mesh.simplices[elements, 0]]
        J = self.type_J[t]
        return v0[:, None, :] + np.einsum("eab,qb->eqa", J, ref_points)

    def map_to_reference(self, element, points):
        """Reference coordinates of physical points inside one element."""
        t = self.element_type[element]
        v0 = self.mesh.vertices[self.mesh.simplices[element, 0]]
        return (np.atleast_2d(points) - v0) @ self.type_invJ[t].T

    def interpolate(self, fn):
        """Nodal interpolation of a callable of physical coordinates."""
        return fn(self.dof_coords)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

class PotentialTerm:
    """One analytic contribution to the trapping potential."""

    smooth = True

    def __call__(self, points):
        raise NotImplementedError


class Harmonic(PotentialTerm):
    def __init__(self, c):
        self.c = float(c)

    def __call__(self, points):
        return self.c * np.sum(np.atleast_2d(points) ** 2, axis=1)

    def key(self):
        return f"harmonic({self.c!r})"


class GaussianSum(PotentialTerm):
    """Sum of axis-aligned Gaussian ridges A*exp(-(x_axis-c)^2/(2 w^2))."""

    def __init__(self, terms):
        self.terms = [(float(a), int(axis), float(c), float(w)) for a, axis, c, w in terms]

    def __call__(self, points):
        points = np.atleast_2d(points)
        out = np.zeros(points.shape[0])
        for a, axis, c, w in self.terms:
            out += a * np.exp(-((points[:, axis] - c) ** 2) / (2 * w * w))
        return out

    def key(self):
        return f"gaussian_sum({self.terms!r})"


class OpticalLattice(PotentialTerm):
    """A * prod_i sin^2(freq * x_i)."""

    def __init__(self, amplitude, frequency):
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)

    def __call__(self, points):
        points = np.atleast_2d(points)
        return self.amplitude * np.prod(
            np.sin(self.frequency * points) ** 2, axis=1
        )

    def key(self):
        return f"optical_lattice({self.amplitude!r},{self.frequency!r})"


class HalfPlaneIndicators(PotentialTerm):
    """sum_k jump_k * 1_{x_k > 0}; jump set = axis planes x_k = 0."""

    smooth = False

    def __init__(self, jumps):
        self.jumps = [float(j) for j in jumps]

    def __call__(self, points):
        points = np.atleast_2d(points)
        out = np.zeros(points.shape[0])
        for k, j in enumerate(self.jumps):
            out += j * (points[:, k] > 0)
        return out

    def key(self):
        return f"half_plane_indicators({self.jumps!r})"


class FloorSine(PotentialTerm):
    """floor(offset + amplitude * prod_i sin(frequency * x_i))."""

    smooth = False

    def __init__(self, offset, amplitude, frequency):
        self.offset = float(offset)
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)

    def smooth_arg(self, points):
        points = np.atleast_2d(points)
        return self.offset + self.amplitude * np.prod(
            np.sin(self.frequency * points), axis=1
        )

    def __call__(self, points):
        return np.floor(self.smooth_arg(points))

    def key(self):
        return f"floor_sine({self.offset!r},{self.amplitude!r},{self.frequency!r})"


class PotentialSpec:
    """V = V_s + V_d with smooth and rough (discontinuous) parts."""

    def __init__(self, smooth_part=(), rough_part=()):
        self.smooth_part = tuple(smooth_part)
        self.rough_part = tuple(rough_part)
        for t in self.smooth_part:
            if not t.smooth:
                raise ValueError("discontinuous term placed in the smooth part")

    def __call__(self, points):
        points = np.atleast_2d(points)
        out = np.zeros(points.shape[0])
        for t in self.smooth_part + self.rough_part:
            out += t(points)
        return out

    def smooth_only(self):
        return PotentialSpec(self.smooth_part, ())

    def rough_only(self):
        return PotentialSpec((), self.rough_part)

    @property
    def terms(self):
        return self.smooth_part + self.rough_part

    def key(self):
        return "+".join(t.key() for t in self.terms) or "none"


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _scatter(space, elements, local, shape=None):
    """Assemble element-local matrices (nel, nloc, nloc) into CSR."""
    dofs = space.element_dofs[elements]
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    nd = space.n_dofs if shape is None else shape
    A = sparse.csr_matrix(
        (np.asarray(local).reshape(len(elements), -1).ravel(), (rows, cols)),
        shape=(nd, nd),
    )
    A.sum_duplicates()
    return A


def assemble_stiffness(space):
    """1/2 * grad-grad matrix (the kinetic half of the energy form)."""
    pts, wts = quadrature_rule(space.mesh.dim, 2 * (space.degree - 1))
    grads = space.basis.grad(pts)  # (nq, nloc, d)
    blocks = []
    elements = []
    for t in range(space.n_types):
        g = np.einsum("qja,ab->qjb", grads, space.type_invJ[t])
        loc = 0.5 * np.einsum("q,qja,qka->jk", wts * space.detJ, g, g)
        els = space.elements_of_type(t)
        elements.append(els)
        blocks.append(np.broadcast_to(loc, (len(els),) + loc.shape))
    return _scatter(
        space, np.concatenate(elements), np.concatenate(blocks, axis=0)
    )


def assemble_mass(space):
    pts, wts = quadrature_rule(space.mesh.dim, 2 * space.degree)
    vals = space.basis.eval(pts)
    loc = np.einsum("q,qj,qk->jk", wts * space.detJ, vals, vals)
    nel = space.mesh.n_simplices
    return _scatter(
        space, np.arange(nel), np.broadcast_to(loc, (nel,) + loc.shape)
    )


def assemble_potential(space, potential):
    """Matrix of (V u, v).  Discontinuous parts use jump-aware quadrature."""
    if isinstance(potential, PotentialTerm):
        potential = PotentialSpec(
            (potential,) if potential.smooth else (),
            () if potential.smooth else (potential,),
        )
    A = sparse.csr_matrix((space.n_dofs, space.n_dofs))
    smooth = potential.smooth_part
    if smooth:
        pts, wts = quadrature_rule(space.mesh.dim, MAX_QUAD_DEGREE)
        vals = space.basis.eval(pts)
        spec = PotentialSpec(smooth, ())
        blocks = []
        elements = []
        for t in range(space.n_types):
            els = space.elements_of_type(t)
            phys = space.map_to_physical(els, pts)
            V = spec(phys.reshape(-1, space.mesh.dim)).reshape(len(els), -1)
            loc = np.einsum(
                "eq,qj,qk->ejk", V * (wts * space.detJ), vals, vals
            )
            elements.append(els)
            blocks.append(loc)
        A = A + _scatter(
            space, np.concatenate(elements), np.concatenate(blocks, axis=0)
        )
    for term in potential.rough_part:
        A = A + _assemble_rough(space, term)
    return A


def assemble_rotation(space):
    """Matrix C with C[j,k] = (phi_j, (x d_y - y d_x) phi_k); the Hermitian
    angular-momentum matrix is R = -1j * C."""
    if space.mesh.dim != 2:
        raise ValueError("rotation term requires dim = 2")
    pts, wts = quadrature_rule(2, MAX_QUAD_DEGREE)
    vals = space.basis.eval(pts)
    grads = space.basis.grad(pts)
    blocks = []
    elements = []
    for t in range(space.n_types):
        els = space.elements_of_type(t)
        phys = space.map_to_physical(els, pts)  # (nel, nq, 2)
        g = np.einsum("qja,ab->qjb", grads, space.type_invJ[t])
        # x * d_y phi_k - y * d_x phi_k at each point
        op = (
            phys[:, :, 0, None] * g[None, :, :, 1]
            - phys[:, :, 1, None] * g[None, :, :, 0]
        )  # (nel, nq, nloc)
        loc = np.einsum("q,qj,eqk->ejk", wts * space.detJ, vals, op)
        elements.append(els)
        blocks.append(loc)
    return _scatter(
        space, np.concatenate(elements), np.concatenate(blocks, axis=0)
    )


def assemble_form(space, form, *args):
    """Assemble one of the bilinear forms by name."""
    if form == "stiffness":
        return assemble_stiffness(space)
    if form == "mass":
        return assemble_mass(space)
    if form == "potential":
        return assemble_potential(space, *args)
    if form == "rotation":
        C = assemble_rotation(space)
        # the advection part x d_y - y d_x is skew-adjoint on the zero-trace
        # space; skew-symmetrising only repairs rows of boundary dofs (their
        # integration-by-parts boundary terms), leaving interior rows intact
        C = 0.5 * (C - C.T)
        return (-1j * C).astype(complex).tocsr()
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# jump-aware quadrature
# ---------------------------------------------------------------------------

def _element_local_matrix_from_points(space, element, pts_phys, wts, V):
    """Local matrix sum_q w_q V_q phi_j(x_q) phi_k(x_q) (physical weights)."""
    ref = space.map_to_reference(element, pts_phys)
    vals = space.basis.eval(ref)
    return np.einsum("q,qj,qk->jk", wts * V, vals, vals)


def _clip_polygon(poly, axis, side):
    """Clip convex polygon by x_axis > 0 (side=+1) or x_axis < 0 (side=-1)."""
    out = []
    m = len(poly)
    for i in range(m):
        p, q = poly[i], poly[(i + 1) % m]
        fp, fq = side * p[axis], side * q[axis]
        if fp >= 0:
            out.append(p)
        if (fp > 0) != (fq > 0) and fp != fq:
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return out


def _polygon_pieces_indicator(tri, jumps):
    """Split a triangle by the active coordinate planes; yields
    (vertex list, constant V value) pieces covering the triangle exactly."""
    pieces = [[np.asarray(v, dtype=float) for v in tri]]
    axes = [k for k, j in enumerate(jumps) if j != 0.0]
    for axis in axes:
        new = []
        for poly in pieces:
            for side in (+1, -1):
                clipped = _clip_polygon(poly, axis, side)
                if len(clipped) >= 3:
                    new.append(clipped)
        pieces = new
    out = []
    for poly in pieces:
        centroid = np.mean(poly, axis=0)
        v = sum(j * (centroid[k] > 0) for k, j in enumerate(jumps))
        out.append((poly, v))
    return out


def _assemble_rough(space, term):
    d = space.mesh.dim
    if isinstance(term, HalfPlaneIndicators):
        return _assemble_indicator(space, term)
    if isinstance(term, FloorSine):
        if d == 1:
            return _assemble_floor_sine_1d(space, term)
        if d == 2:
            return _assemble_floor_sine_2d(space, term)
        raise NotImplementedError("floor_sine quadrature implemented in 1d/2d")
    raise NotImplementedError(f"no jump-aware quadrature for {term!r}")


def _assemble_indicator(space, term):
    """Exact half-plane clipping; pieces are convex polygons with constant V."""
    mesh = space.mesh
    d = mesh.dim
    pts12, wts12 = quadrature_rule(d, MAX_QUAD_DEGREE)
    vals12 = space.basis.eval(pts12)
    jumps = list(term.jumps) + [0.0] * (d - len(term.jumps))
    verts = mesh.vertices[mesh.simplices]
    tol = 1e-14 * mesh.H
    # elements strictly on one side of every active plane are uniform
    crossing = np.zeros(mesh.n_simplices, dtype=bool)
    for k, j in enumerate(jumps):
        if j != 0.0:
            crossing |= (verts[:, :, k].min(axis=1) < -tol) & (
                verts[:, :, k].max(axis=1) > tol
            )
    rows, cols, data = [], [], []
    uniform = ~crossing
    if uniform.any():
        centroids = verts[uniform].mean(axis=1)
        V = term(centroids)
        loc_unit = np.einsum("q,qj,qk->jk", wts12 * space.detJ, vals12, vals12)
        dofs = space.element_dofs[uniform]
        nloc = dofs.shape[1]
        block = V[:, None, None] * loc_unit
        rows.append(np.repeat(dofs, nloc, axis=1).ravel())
        cols.append(np.tile(dofs, (1, nloc)).ravel())
        data.append(block.reshape(-1))
    if d == 1:
        for e in np.nonzero(crossing)[0]:
            a, b = sorted(verts[e, :, 0])
            segs = [(a, 0.0), (0.0, b)]  # split at the jump point x = 0
            loc = np.zeros((space.n_loc, space.n_loc))
            for lo, hi in segs:
                if hi - lo <= 0:
                    continue
                x = lo + (hi - lo) * pts12[:, 0]
                w = (hi - lo) * wts12
                V = term(x[:, None])
                loc += _element_local_matrix_from_points(
                    space, e, x[:, None], w, V
                )
            dofs = space.element_dofs[e]
            rows.append(np.repeat(dofs, space.n_loc))
            cols.append(np.tile(dofs, space.n_loc))
            data.append(loc.ravel())
    else:
        for e in np.nonzero(crossing)[0]:
            tri = verts[e]
            loc = np.zeros((space.n_loc, space.n_loc))
            for poly, V in _polygon_pieces_indicator(tri, jumps):
                if abs(V) == 0.0:
                    continue
                # fan triangulation of the convex piece
                for i in range(1, len(poly) - 1):
                    p0, p1, p2 = poly[0], poly[i], poly[i + 1]
                    J = np.column_stack([p1 - p0, p2 - p0])
                    det = abs(np.linalg.det(J))
                    if det < 1e-30:
                        continue
                    phys = p0 + pts12 @ J.T
                    loc += V * _element_local_matrix_from_points(
                        space, e, phys, wts12 * det, np.ones(len(wts12))
                    )
            dofs = space.element_dofs[e]
            rows.append(np.repeat(dofs, space.n_loc))
            cols.append(np.tile(dofs, space.n_loc))
            data.append(loc.ravel())
    nd = space.n_dofs
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nd, nd),
    )


def _breakpoints_1d(fn, lo, hi, nsamples=64):
    """All roots of the scalar function on [lo, hi], bracketed on a sample
    grid and polished with Brent's method."""
    xs = np.linspace(lo, hi, nsamples + 1)
    fs = fn(xs)
    scalar_fn = lambda t: float(np.asarray(fn(t)).reshape(-1)[0])
    roots = []
    for i in range(nsamples):
        a, b = xs[i], xs[i + 1]
        fa, fb = fs[i], fs[i + 1]
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            roots.append(brentq(scalar_fn, a, b, xtol=1e-15, rtol=8.9e-16))
    if fs[-1] == 0.0:
        roots.append(hi)
    return roots


def _floor_levels(term, lo_val, hi_val):
    return range(int(np.ceil(lo_val)), int(np.floor(hi_val)) + 1)


def _assemble_floor_sine_1d(space, term):
    pts12, wts12 = quadrature_rule(1, MAX_QUAD_DEGREE)
    rows, cols, data = [], [], []
    verts = space.mesh.vertices[space.mesh.simplices]
    a_off, amp = term.offset, term.amplitude
    for e in range(space.mesh.n_simplices):
        lo, hi = sorted(verts[e, :, 0])
        breaks = [lo, hi]
        for level in _floor_levels(term, a_off - abs(amp), a_off + abs(amp)):
            f = lambda x, lv=level: term.smooth_arg(
                np.atleast_1d(x)[:, None]
            ) - lv
            breaks.extend(_breakpoints_1d(lambda x: f(x), lo, hi))
        breaks = np.unique(np.clip(breaks, lo, hi))
        loc = np.zeros((space.n_loc, space.n_loc))
        for s0, s1 in zip(breaks[:-1], breaks[1:]):
            if s1 - s0 < 1e-15 * space.mesh.H:
                continue
            x = s0 + (s1 - s0) * pts12[:, 0]
            w = (s1 - s0) * wts12
            V = term(np.array([[0.5 * (s0 + s1)]])) * np.ones(len(w))
            loc += _element_local_matrix_from_points(space, e, x[:, None], w, V)
        dofs = space.element_dofs[e]
        rows.append(np.repeat(dofs, space.n_loc))
        cols.append(np.tile(dofs, space.n_loc))
        data.append(loc.ravel())
    nd = space.n_dofs
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nd, nd),
    )


def _triangle_y_bounds(tri):
    """Represent a triangle as x-panels with linear lower/upper y bounds.

    Returns a list of (x0, x1, y_lo(x) coefficients, y_hi(x) coefficients)
    with y(x) = c0 + c1 * x.
    """
    tri = sorted([tuple(v) for v in tri])
    (x0, y0), (x1, y1), (x2, y2) = tri

    def line(p, q):
        if q[0] == p[0]:
            return None
        s = (q[1] - p[1]) / (q[0] - p[0])
        return (p[1] - s * p[0], s)

    l02 = line((x0, y0), (x2, y2))
    panels = []
    if x1 > x0:
        l01 = line((x0, y0), (x1, y1))
        panels.append((x0, x1, l01, l02))
    if x2 > x1:
        l12 = line((x1, y1), (x2, y2))
        panels.append((x1, x2, l12, l02))
    out = []
    for xa, xb, la, lb in panels:
        xm = 0.5 * (xa + xb)
        ya = la[0] + la[1] * xm
        yb = lb[0] + lb[1] * xm
        if ya <= yb:
            out.append((xa, xb, la, lb))
        else:
            out.append((xa, xb, lb, la))
    return out


def _sin_range(freq, lo, hi):
    """Exact range of sin(freq*t) for t in [lo, hi]."""
    a, b = freq * lo, freq * hi
    vmin = min(np.sin(a), np.sin(b))
    vmax = max(np.sin(a), np.sin(b))
    k0 = int(np.ceil((a - np.pi / 2) / (2 * np.pi)))
    if a <= np.pi / 2 + 2 * np.pi * k0 <= b:
        vmax = 1.0
    k0 = int(np.ceil((a + np.pi / 2) / (2 * np.pi)))
    if a <= -np.pi / 2 + 2 * np.pi * k0 <= b:
        vmin = -1.0
    return vmin, vmax


def _product_range(r1, r2):
    prods = [r1[0] * r2[0], r1[0] * r2[1], r1[1] * r2[0], r1[1] * r2[1]]
    return min(prods), max(prods)


def _assemble_floor_sine_2d(space, term):
    """Iterated integration: exact Gauss in y on sub-segments between jump
    breakpoints (located to machine precision with Brent's method), Gauss
    panels in x split at analytic branch birth/death abscissae, with a
    square-root substitution at birth endpoints where the integrand has a
    sqrt-type derivative singularity."""
    mesh = space.mesh
    freq, amp, off = term.frequency, term.amplitude, term.offset
    verts = mesh.vertices[mesh.simplices]

    pts12, wts12 = quadrature_rule(2, MAX_QUAD_DEGREE)
    vals12 = space.basis.eval(pts12)
    loc_unit = np.einsum("q,qj,qk->jk", wts12 * space.detJ, vals12, vals12)

    levels = list(_floor_levels(term, off - abs(amp), off + abs(amp)))
    period = np.pi / freq

    def _structure_breaks(xa, xb):
        """Branch birth/death abscissae: sin(freq x) = 0 and
        |amp sin(freq x)| = |m - off| for the crossed levels m."""
        births, others = set(), set()
        k0 = int(np.floor(xa / period)) - 1
        k1 = int(np.ceil(xb / period)) + 1
        for k in range(k0, k1 + 1):
            x = k * period
            if xa < x < xb:
                others.add(x)
        for m in levels:
            c = (m - off) / amp if amp != 0 else np.inf
            if abs(c) > 1:
                continue
            base = np.arcsin(abs(c)) / freq
            for k in range(k0, k1 + 1):
                for x in (base + k * period, -base + k * period):
                    if xa < x < xb:
                        births.add(x)
        return births, others

    gx, gw = roots_legendre(20)
    gy, gyw = roots_legendre(4)  # exact for degree-7 polynomials in y

    def _column_matrix(e, x, wx, ylo, yhi):
        """Contribution of the line {x} x [ylo(x), yhi(x)] with weight wx."""
        ya = ylo[0] + ylo[1] * x
        yb = yhi[0] + yhi[1] * x
        if yb - ya < 1e-15 * mesh.H:
            return 0.0
        breaks = [ya, yb]
        sx = np.sin(freq * x)
        for m in levels:
            c = (m - off) / (amp * sx) if amp * sx != 0 else np.inf
            if abs(c) > 1:
                continue
            # all solutions of sin(freq y) = c, enumerated analytically
            # (sampled bracketing misses the nearly-tangent root pairs that
            # appear next to branch births)
            base = np.arcsin(c)
            ta, tb = freq * ya, freq * yb
            for branch in (base, np.pi - base):
                k = int(np.ceil((ta - branch) / (2 * np.pi)))
                t = branch + 2 * np.pi * k
                while t <= tb:
                    breaks.append(t / freq)
                    t += 2 * np.pi
        breaks = np.unique(np.clip(breaks, ya, yb))
        loc = 0.0
        for s0, s1 in zip(breaks[:-1], breaks[1:]):
            if s1 - s0 < 1e-15 * mesh.H:
                continue
            yq = 0.5 * (s0 + s1) + 0.5 * (s1 - s0) * gy
            yw = 0.5 * (s1 - s0) * gyw
            V = term(np.array([[x, 0.5 * (s0 + s1)]]))[0]
            if V == 0.0:
                continue
            pts_phys = np.column_stack([np.full(len(yq), x), yq])
            loc = loc + V * _element_local_matrix_from_points(
                space, e, pts_phys, wx * yw, np.ones(len(yq))
            )
        return loc

    def _gauss_panel(e, pa, pb, ylo, yhi, birth_a, birth_b):
        if birth_a or birth_b:
            # substitute x = endpoint +/- t^2 so the sqrt-type behaviour of
            # branch births becomes smooth in t
            s = np.sqrt(pb - pa)
            tq = 0.5 * s + 0.5 * s * gx
            tw = 0.5 * s * gw
            if birth_a:
                xq, xw = pa + tq ** 2, 2 * tq * tw
            else:
                xq, xw = pb - tq ** 2, 2 * tq * tw
        else:
            xq = 0.5 * (pa + pb) + 0.5 * (pb - pa) * gx
            xw = 0.5 * (pb - pa) * gw
        loc = 0.0
        for x, wx in zip(xq, xw):
            loc = loc + _column_matrix(e, x, wx, ylo, yhi)
        return loc

    def _panel(e, pa, pb, ylo, yhi, birth_a, birth_b, tol, depth=0):
        """Adaptive Gauss integration over the x-panel [pa, pb]."""
        if birth_a and birth_b:
            mid = 0.5 * (pa + pb)
            return _panel(e, pa, mid, ylo, yhi, True, False, tol / 2, depth) + _panel(
                e, mid, pb, ylo, yhi, False, True, tol / 2, depth
            )
        coarse = _gauss_panel(e, pa, pb, ylo, yhi, birth_a, birth_b)
        mid = 0.5 * (pa + pb)
        left = _gauss_panel(e, pa, mid, ylo, yhi, birth_a, False)
        right = _gauss_panel(e, mid, pb, ylo, yhi, False, birth_b)
        err = np.max(np.abs(coarse - (left + right)))
        if err <= tol or depth >= 30 or pb - pa < 1e-14 * mesh.H:
            return left + right
        return _panel(
            e, pa, mid, ylo, yhi, birth_a, False, tol / 2, depth + 1
        ) + _panel(e, mid, pb, ylo, yhi, False, birth_b, tol / 2, depth + 1)

    rows, cols, data = [], [], []
    for e in range(mesh.n_simplices):
        tri = verts[e]
        # rigorous range of the floor argument via interval arithmetic on the
        # element's bounding box
        x0, x1 = tri[:, 0].min(), tri[:, 0].max()
        y0, y1 = tri[:, 1].min(), tri[:, 1].max()
        plo, phi = _product_range(
            _sin_range(freq, x0, x1), _sin_range(freq, y0, y1)
        )
        vlo = off + min(amp * plo, amp * phi)
        vhi = off + max(amp * plo, amp * phi)
        if np.floor(vlo) == np.floor(vhi) and vhi < np.floor(vlo) + 1:
            loc = np.floor(vlo) * loc_unit
        else:
            loc = np.zeros((space.n_loc, space.n_loc))
            tol = 1e-13 * (abs(off) + abs(amp)) * space.detJ
            for xa, xb, ylo, yhi in _triangle_y_bounds(tri):
                births, others = _structure_breaks(xa, xb)
                # kinks where a jump curve crosses the panel's y-bound lines
                for bound in (ylo, yhi):
                    for m in levels:
                        def edge_fn(x, _m=m, _b=bound):
                            x = np.asarray(x)
                            return (
                                off
                                + amp
                                * np.sin(freq * x)
                                * np.sin(freq * (_b[0] + _b[1] * x))
                                - _m
                            )

                        others.update(_breakpoints_1d(edge_fn, xa, xb))
                xs = sorted({xa, xb} | births | others)
                for pa, pb in zip(xs[:-1], xs[1:]):
                    if pb - pa < 1e-15 * mesh.H:
                        continue
                    loc = loc + _panel(
                        e, pa, pb, ylo, yhi, pa in births, pb in births, tol
                    )
        dofs = space.element_dofs[e]
        rows.append(np.repeat(dofs, space.n_loc))
        cols.append(np.tile(dofs, space.n_loc))
        data.append(np.asarray(loc).ravel())
    nd = space.n_dofs
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nd, nd),
    )


# ---------------------------------------------------------------------------
# coarse P1 coupling / L2 projection
# ---------------------------------------------------------------------------

def p1_injection(coarse_space, fine_space):
    """Sparse matrix I with column z = fine-space coefficients of the coarse
    P1 hat at node z (exact: coarse P1 functions are in the fine space)."""
    cmesh = coarse_space.mesh
    if fine_space.mesh.box.shape != cmesh.box.shape or not np.allclose(
        fine_space.mesh.box, cmesh.box
    ):
        raise ValueError("spaces are not defined on the same box")
    if fine_space.mesh.n % cmesh.n != 0:
        raise ValueError("fine mesh is not a refinement of the coarse mesh")
    pts = fine_space.dof_coords
    n, d, H = cmesh.n, cmesh.dim, cmesh.H
    local = (pts - cmesh.box[:, 0]) / H
    cell = np.clip(np.floor(local + 1e-12).astype(np.int64), 0, n - 1)
    frac = local - cell
    strides = (n + 1) ** np.arange(d)
    rows, cols, vals = [], [], []
    corner_offsets = np.array(
        [[(c >> a) & 1 for a in range(d)] for c in range(2 ** d)], dtype=np.int64
    )
    # barycentric weights of each fine dof in its containing coarse simplex,
    # attributed to the surrounding cell corners
    order = np.argsort(-frac, axis=1, kind="stable")
    sorted_frac = -np.sort(-frac, axis=1)
    # walk the Kuhn simplex: weights on corners 0, e_{p0}, e_{p0}+e_{p1}, ...
    npts_f = pts.shape[0]
    lam = np.empty((npts_f, d + 1))
    lam[:, 0] = 1.0 - sorted_frac[:, 0]
    for k in range(1, d):
        lam[:, k] = sorted_frac[:, k - 1] - sorted_frac[:, k]
    lam[:, d] = sorted_frac[:, d - 1]
    corner = np.zeros((npts_f, d), dtype=np.int64)
    for k in range(d + 1):
        gid = (cell + corner) @ strides
        rows.append(np.arange(npts_f))
        cols.append(gid)
        vals.append(lam[:, k])
        if k < d:
            corner = corner.copy()
            corner[np.arange(npts_f), order[:, k]] += 1
    I = sparse.csr_matrix(
        (
            np.concatenate(vals),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(fine_space.n_dofs, coarse_space.n_dofs),
    )
    I.sum_duplicates()
    I.data[np.abs(I.data) < 1e-14] = 0.0
    I.eliminate_zeros()
    return I


def l2_project_p1(coarse_space, fine_space, values, mass_fine=None,
                  injection=None):
    """L2 projection of a fine-space function onto coarse P1 coefficients."""
    from scipy.sparse.linalg import spsolve

    I = p1_injection(coarse_space, fine_space) if injection is None else injection
    M_h = assemble_mass(fine_space) if mass_fine is None else mass_fine
    M_H = (I.T @ M_h @ I).tocsc()
    rhs = I.T @ (M_h @ np.asarray(values))
    return spsolve(M_H, rhs)
