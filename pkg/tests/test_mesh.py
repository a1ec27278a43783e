"""Mesh construction, refinement, prolongation and geometry queries."""
import io

import numpy as np
import pytest

from ocfem import (Mesh, MeshError, MeshSizeError, P0Field, P1Field,
                   barycenters, barycentric_coordinates,
                   build_unit_square_mesh, locate, prolong_p0, prolong_p1,
                   refine)


def canonical_triangles(mesh):
    """Mesh as a set of coordinate triples, invariant to renumbering."""
    tris = set()
    for tri in mesh.triangles:
        pts = sorted(tuple(np.round(mesh.vertices[v], 12)) for v in tri)
        tris.add(tuple(map(tuple, pts)))
    return tris


def count_edges(mesh):
    edges = np.sort(np.concatenate([mesh.triangles[:, [0, 1]],
                                    mesh.triangles[:, [1, 2]],
                                    mesh.triangles[:, [2, 0]]]), axis=1)
    return len(np.unique(edges, axis=0))


def test_builder_level3_counts():
    mesh = build_unit_square_mesh(3)
    assert mesh.num_vertices == 81
    assert mesh.num_triangles == 128
    assert mesh.h == pytest.approx(np.sqrt(2.0) / 8.0, rel=1e-15)


def test_builder_level0_base_case():
    mesh = build_unit_square_mesh(0)
    assert mesh.num_vertices == 4
    assert mesh.num_triangles == 2
    assert mesh.h == pytest.approx(np.sqrt(2.0), rel=1e-15)


def test_builder_level5_partition_of_unity():
    mesh = build_unit_square_mesh(5)
    assert abs(mesh.areas.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("level", range(7))
def test_builder_invariants(level):
    mesh = build_unit_square_mesh(level)
    mesh.validate()
    n = 1 << level
    assert mesh.num_vertices == (n + 1) ** 2
    assert mesh.num_triangles == 2 * 4 ** level
    assert np.all(mesh.areas > 0.0)
    assert abs(mesh.areas.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("level", [0, 1, 2, 3, 4, 5, 6, 10])
def test_euler_formula(level):
    mesh = build_unit_square_mesh(level)
    v, e, f = mesh.num_vertices, count_edges(mesh), mesh.num_triangles
    assert v - e + f == 1


def test_boundary_length():
    mesh = build_unit_square_mesh(4)
    p0 = mesh.vertices[mesh.boundary_edges[:, 0]]
    p1 = mesh.vertices[mesh.boundary_edges[:, 1]]
    total = np.linalg.norm(p1 - p0, axis=1).sum()
    assert abs(total - 4.0) <= 1e-12


def test_boundary_edges_belong_to_owner():
    mesh = build_unit_square_mesh(3)
    for v0, v1, t, marker in mesh.boundary_edges:
        assert {v0, v1} <= set(mesh.triangles[t])
        assert marker == 0


def test_refine_matches_direct_build():
    child, _ = refine(build_unit_square_mesh(3))
    child.validate()
    assert canonical_triangles(child) == \
        canonical_triangles(build_unit_square_mesh(4))


def test_double_refine_matches_two_level_build():
    mesh = build_unit_square_mesh(2)
    once, _ = refine(mesh)
    twice, _ = refine(once)
    assert canonical_triangles(twice) == \
        canonical_triangles(build_unit_square_mesh(4))


def test_refine_halves_h():
    mesh = build_unit_square_mesh(3)
    child, _ = refine(mesh)
    assert child.h == pytest.approx(mesh.h / 2.0, rel=1e-14)


def test_prolongation_p1_exact_for_linear():
    mesh = build_unit_square_mesh(3)
    child, pmap = refine(mesh)
    field = P1Field.from_function(mesh, lambda x: x[..., 0])
    fine = prolong_p1(pmap, field)
    assert np.max(np.abs(fine.values - child.vertices[:, 0])) <= 1e-15


def test_prolongation_p0_is_exact_injection():
    mesh = build_unit_square_mesh(2)
    _, pmap = refine(mesh)
    rng = np.random.default_rng(3)
    coarse = P0Field(mesh, rng.standard_normal(mesh.num_triangles))
    fine = prolong_p0(pmap, coarse)
    pulled = fine.values[::4], fine.values[1::4], fine.values[2::4], \
        fine.values[3::4]
    for block in pulled:
        assert np.array_equal(block, coarse.values)


def test_nestedness_every_child_inside_parent():
    mesh = build_unit_square_mesh(2)
    child, pmap = refine(mesh)
    centers = barycenters(child)
    lam = barycentric_coordinates(mesh, pmap.element_map, centers)
    assert lam.min() >= -1e-13


def test_barycenter_reference_triangle():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2]]),
                np.array([[0, 1, 0, 0], [1, 2, 0, 0], [2, 0, 0, 0]]), 0)
    assert barycenters(mesh)[0] == pytest.approx([1.0 / 3.0, 1.0 / 3.0])


def test_barycenters_inside_their_triangles():
    mesh = build_unit_square_mesh(0)
    centers = barycenters(mesh)
    assert len(centers) == 2
    lam = barycentric_coordinates(mesh, np.arange(2), centers)
    assert lam.min() > 0.0


def test_area_weighted_barycenters_give_centroid():
    mesh = build_unit_square_mesh(3)
    centroid = (mesh.areas[:, None] * barycenters(mesh)).sum(axis=0)
    assert centroid == pytest.approx([0.5, 0.5], abs=1e-12)


def test_size_error():
    with pytest.raises(MeshSizeError):
        build_unit_square_mesh(40)


def test_locate_structured_and_refined():
    mesh = build_unit_square_mesh(3)
    child, _ = refine(mesh)
    rng = np.random.default_rng(11)
    pts = rng.uniform(0.0, 1.0, size=(200, 2))
    for m in (mesh, child):
        tri = locate(m, pts)
        lam = barycentric_coordinates(m, tri, pts)
        assert lam.min() >= -1e-12


def test_locate_requires_structured_ancestor():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2]]),
                np.array([[0, 1, 0, 0], [1, 2, 0, 0], [2, 0, 0, 0]]), 0)
    with pytest.raises(MeshError):
        locate(mesh, np.array([[0.1, 0.1]]))


def test_vertex_numbering_is_lexicographic():
    mesh = build_unit_square_mesh(2)
    order = np.lexsort((mesh.vertices[:, 0], mesh.vertices[:, 1]))
    assert np.array_equal(order, np.arange(mesh.num_vertices))


def test_mesh_dump_format():
    mesh = build_unit_square_mesh(1)
    out = io.StringIO()
    mesh.write_text(out)
    lines = out.getvalue().splitlines()
    nv, nt, ne = map(int, lines[0].split())
    assert (nv, nt, ne) == (9, 8, 8)
    assert len(lines) == 1 + nv + nt + ne
    coords = np.array([[float(tok) for tok in line.split()]
                       for line in lines[1:1 + nv]])
    assert np.array_equal(coords, mesh.vertices)


def test_invalid_mesh_negative_area():
    with pytest.raises(MeshError):
        Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
             np.array([[0, 2, 1]]),   # clockwise
             np.zeros((0, 4)), 0)


def test_quasi_uniformity_equal_diameters():
    for level in (0, 2, 4):
        mesh = build_unit_square_mesh(level)
        p = mesh.vertices[mesh.triangles]
        edges = p - np.roll(p, 1, axis=1)
        diameters = np.sqrt(np.max(np.sum(edges ** 2, axis=2), axis=1))
        assert np.max(diameters) / np.min(diameters) <= 1.0 + 1e-12
