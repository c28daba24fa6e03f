"""Simplicial meshes derived from Cartesian grids.

A box is subdivided into n^d grid cells of width H; each cell is split into
d! simplices (1 segment, 2 triangles sharing the lower-left/upper-right
diagonal, or 6 Kuhn tetrahedra sharing the main diagonal).  Node and element
orderings are lexicographic with the x index varying fastest, so identical
inputs always produce identical meshes.
"""

import itertools

import numpy as np

# Coordinate permutations indexing the Kuhn tetrahedra of a cube.  The
# tetrahedron of permutation p is {x : x[p[0]] >= x[p[1]] >= x[p[2]]}.
_KUHN_PERMS = list(itertools.permutations(range(3)))


def _cell_simplices(dim):
    """Local simplices of one grid cell.

    Returns (nloc, dim+1) integer corner offsets into the 2^dim cell corners,
    corner c encoding the offset vector (c & 1, (c >> 1) & 1, (c >> 2) & 1).
    All simplices are positively oriented.
    """
    if dim == 1:
        return np.array([[0, 1]], dtype=np.int64)
    if dim == 2:
        # shared diagonal from corner (0,0) to corner (1,1)
        return np.array([[0, 1, 3], [0, 3, 2]], dtype=np.int64)
    simplices = []
    for perm in _KUHN_PERMS:
        corners = [0]
        acc = 0
        for axis in perm:
            acc |= 1 << axis
            corners.append(acc)
        # odd permutations give negatively oriented tetrahedra; swap the
        # last two vertices to restore positive orientation
        parity = sum(
            1 for i in range(3) for j in range(i + 1, 3) if perm[i] > perm[j]
        )
        if parity % 2 == 1:
            corners[2], corners[3] = corners[3], corners[2]
        simplices.append(corners)
    return np.array(simplices, dtype=np.int64)


class CartesianSimplicialMesh:
    """Simplicial subdivision of a box based on an n^d Cartesian grid."""

    def __init__(self, dim, box, n):
        if dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        box = np.asarray(box, dtype=float).reshape(dim, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("box intervals must be nondegenerate and ordered")
        widths = (box[:, 1] - box[:, 0]) / n
        if not np.allclose(widths, widths[0], rtol=1e-12, atol=0.0):
            raise ValueError("grid spacing must be equal along all axes")

        self.dim = dim
        self.box = box
        self.n = int(n)
        self.H = float(widths[0])

        npts = n + 1
        # grid coordinates, x index fastest; the arithmetic expression
        # a + (b - a) * (i / n) is shared with refinements so that nested
        # node coordinates coincide bitwise
        idx = np.stack(
            np.meshgrid(*[np.arange(npts)] * dim, indexing="ij"), axis=-1
        )
        idx = idx.reshape(-1, dim, order="F")
        self.vertex_grid = idx
        self.vertices = box[:, 0] + (box[:, 1] - box[:, 0]) * (idx / n)
        self.boundary_vertex_mask = np.any((idx == 0) | (idx == n), axis=1)

        local = _cell_simplices(dim)
        corner_offsets = np.array(
            [[(c >> a) & 1 for a in range(dim)] for c in range(2 ** dim)],
            dtype=np.int64,
        )
        cells = np.stack(
            np.meshgrid(*[np.arange(n)] * dim, indexing="ij"), axis=-1
        ).reshape(-1, dim, order="F")
        # global node id of each cell corner
        strides = npts ** np.arange(dim)
        corner_ids = (cells[:, None, :] + corner_offsets[None, :, :]) @ strides
        self.simplices = corner_ids[:, local].reshape(-1, dim + 1)
        self.simplices_per_cell = local.shape[0]
        self.cells = cells

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_simplices(self):
        return self.simplices.shape[0]

    def simplex_volumes(self):
        v = self.vertices[self.simplices]
        edges = v[:, 1:] - v[:, :1]
        if self.dim == 1:
            det = edges[:, 0, 0]
        elif self.dim == 2:
            det = np.linalg.det(edges)
        else:
            det = np.linalg.det(edges)
        fact = {1: 1.0, 2: 2.0, 3: 6.0}[self.dim]
        return det / fact

    def export_text(self):
        """Plain-text dump: one line per vertex, one line per element."""
        lines = [f"# mesh dim={self.dim} n={self.n}"]
        for v in self.vertices:
            lines.append(" ".join(repr(x) for x in v))
        lines.append("# elements")
        for s in self.simplices:
            lines.append(" ".join(str(int(i)) for i in s))
        return "\n".join(lines) + "\n"


def build_mesh(dim, box, n):
    """Build the simplicial mesh of a box from an n^d Cartesian grid."""
    return CartesianSimplicialMesh(dim, box, n)


def refine(mesh, r):
    """Uniformly refine: n' = r*n, h = H/r.

    The fine mesh carries ``coarse_elements``, mapping each fine simplex to
    the unique coarse simplex containing it, and ``parent_mesh``.
    """
    if r < 1:
        raise ValueError(f"refinement ratio must be >= 1, got {r}")
    fine = CartesianSimplicialMesh(mesh.dim, mesh.box, mesh.n * r)
    fine.parent_mesh = mesh
    fine.coarse_elements = containing_elements(mesh, barycenters(fine))
    return fine


def barycenters(mesh):
    return mesh.vertices[mesh.simplices].mean(axis=1)


def containing_elements(mesh, points):
    """Element ids of the simplices containing the given points.

    Points on element interfaces are assigned deterministically (ties broken
    towards lower cell / lexicographically smaller Kuhn permutation).
    """
    points = np.asarray(points, dtype=float)
    n, d, H = mesh.n, mesh.dim, mesh.H
    local = (points - mesh.box[:, 0]) / H
    cell = np.clip(np.floor(local).astype(np.int64), 0, n - 1)
    frac = local - cell
    strides = n ** np.arange(d)
    cell_id = cell @ strides
    if d == 1:
        return cell_id
    if d == 2:
        # triangle 0 is below the diagonal y <= x
        t = (frac[:, 1] > frac[:, 0]).astype(np.int64)
        return cell_id * 2 + t
    order = np.argsort(-frac, axis=1, kind="stable")
    perm_index = {perm: i for i, perm in enumerate(_KUHN_PERMS)}
    t = np.array([perm_index[tuple(row)] for row in order], dtype=np.int64)
    return cell_id * 6 + t


class Patch:
    """Order-ell patch around a mesh node: all elements inside the closed
    infinity-norm ball of radius H*(ell+1)."""

    def __init__(self, mesh, center, order):
        self.mesh = mesh
        self.center = int(center)
        self.order = int(order)
        z = mesh.vertices[center]
        radius = mesh.H * (order + 1)
        tol = 1e-12 * mesh.H
        dist = np.abs(mesh.vertices[mesh.simplices] - z).max(axis=(1, 2))
        self.elements = np.nonzero(dist <= radius + tol)[0]
        if self.elements.size == 0:
            raise ValueError("empty patch")
        self.vertices = np.unique(mesh.simplices[self.elements])
        # the patch is a clipped box; record its bounds for dof classification
        self.box = np.stack(
            [
                np.maximum(mesh.box[:, 0], z - radius),
                np.minimum(mesh.box[:, 1], z + radius),
            ],
            axis=1,
        )
        self._classify_faces()

    def _classify_faces(self):
        mesh = self.mesh
        d = mesh.dim
        simp = mesh.simplices[self.elements]
        # faces = simplices with one vertex dropped
        faces = []
        for drop in range(d + 1):
            keep = [k for k in range(d + 1) if k != drop]
            faces.append(simp[:, keep])
        faces = np.concatenate(faces, axis=0)
        faces = np.sort(faces, axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        boundary = uniq[counts == 1]
        coords = mesh.vertices[boundary]  # (nf, d, d) in 2d/3d, (nf, 1, 1) in 1d
        if d == 1:
            coords = coords.reshape(-1, 1, 1)
        on_dom = np.zeros(len(boundary), dtype=bool)
        for axis in range(d):
            for side in range(2):
                val = mesh.box[axis, side]
                on_dom |= np.all(
                    np.abs(coords[:, :, axis] - val) <= 1e-12 * max(1.0, abs(val)),
                    axis=1,
                )
        self.domain_boundary_faces = boundary[on_dom]
        self.interior_boundary_faces = boundary[~on_dom]

    def local_vertex_index(self, global_ids):
        """Map global vertex ids to local (position in self.vertices)."""
        pos = np.searchsorted(self.vertices, global_ids)
        if np.any(self.vertices[pos] != global_ids):
            raise KeyError("vertex not in patch")
        return pos


def node_patch(mesh, z, order):
    """The order-ell patch of node z."""
    if order < 0:
        raise ValueError("patch order must be >= 0")
    return Patch(mesh, z, order)
