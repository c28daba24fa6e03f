import numpy as np
import pytest

from slodgpe import mesh


@pytest.mark.parametrize("dim,n", [(1, 4), (2, 3), (3, 2)])
def test_counts_and_volumes(dim, n):
    m = mesh.build_mesh(dim, [(-1.0, 1.0)] * dim, n)
    per_cell = {1: 1, 2: 2, 3: 6}[dim]
    assert m.n_vertices == (n + 1) ** dim
    assert m.n_simplices == per_cell * n ** dim
    vols = m.simplex_volumes()
    assert np.all(vols > 0)
    assert vols.sum() == pytest.approx(2.0 ** dim, rel=1e-13)


def test_vertex_ordering_x_fastest():
    m = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2)
    # x index advances first in the flat ordering
    assert np.allclose(m.vertices[0], [0.0, 0.0])
    assert np.allclose(m.vertices[1], [0.5, 0.0])
    assert np.allclose(m.vertices[3], [0.0, 0.5])


def test_boundary_mask():
    m = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 4)
    onb = np.any((m.vertices == 0.0) | (m.vertices == 1.0), axis=1)
    assert np.array_equal(m.boundary_vertex_mask, onb)


def test_refinement_nesting_bitwise():
    coarse = mesh.build_mesh(2, [(-6.0, 6.0), (-6.0, 6.0)], 5)
    fine = mesh.refine(coarse, 3)
    assert fine.n == 15
    assert fine.parent_mesh is coarse
    # every coarse vertex coordinate reappears bitwise among fine vertices
    cv = {tuple(v) for v in coarse.vertices}
    fv = {tuple(v) for v in fine.vertices}
    assert cv <= fv


def test_refinement_parent_elements():
    coarse = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2)
    fine = mesh.refine(coarse, 2)
    bc = mesh.barycenters(fine)
    parents = fine.coarse_elements
    # barycenter of each fine simplex lies in the assigned coarse simplex
    check = mesh.containing_elements(coarse, bc)
    assert np.array_equal(parents, check)
    counts = np.bincount(parents, minlength=coarse.n_simplices)
    assert np.all(counts == 4)  # r^2 children per coarse triangle


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_positive_orientation(dim):
    m = mesh.build_mesh(dim, [(0.0, 1.0)] * dim, 2)
    assert np.all(m.simplex_volumes() > 0)


def test_patch_is_inf_ball_intersection():
    m = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 8)
    z = 4 * 9 + 4  # central vertex (4,4)
    p = mesh.node_patch(m, z, 1)
    center = m.vertices[z]
    H = m.H
    bc = mesh.barycenters(m)
    inside = np.max(np.abs(bc - center), axis=1) <= 2 * H + 1e-12 * H
    assert set(p.elements.tolist()) == set(np.nonzero(inside)[0].tolist())
    # clipped box
    assert np.allclose(p.box[:, 0], center - 2 * H)
    assert np.allclose(p.box[:, 1], center + 2 * H)
    assert len(p.domain_boundary_faces) == 0


def test_patch_clipping_and_boundary_faces():
    m = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 8)
    z = 1 * 9 + 1  # vertex (1,1), next to the corner
    p = mesh.node_patch(m, z, 1)
    assert np.allclose(p.box[:, 0], [0.0, 0.0])  # clipped at the domain edge
    assert len(p.domain_boundary_faces) > 0
    assert len(p.interior_boundary_faces) > 0


def test_patch_growth_saturates():
    m = mesh.build_mesh(1, [(0.0, 1.0)], 8)
    z = 4
    sizes = [len(mesh.node_patch(m, z, ell).elements) for ell in range(5)]
    assert sizes == sorted(sizes)
    assert sizes[-1] == m.n_simplices  # eventually the whole domain


def test_export_text_round_trip_counts():
    m = mesh.build_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2)
    text = m.export_text()
    lines = [l for l in text.strip().splitlines() if not l.startswith("#")]
    assert len(lines) == m.n_vertices + m.n_simplices


def test_invalid_meshes_rejected():
    with pytest.raises(ValueError):
        mesh.build_mesh(4, [(0, 1)] * 4, 2)
    with pytest.raises(ValueError):
        mesh.build_mesh(2, [(0, 1), (1, 0)], 2)
    with pytest.raises(ValueError):
        mesh.build_mesh(2, [(0, 1), (0, 2)], 2)  # unequal spacing
