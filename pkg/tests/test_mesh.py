import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshinspect.mesh import Mesh, MeshError, load_mesh, save_mesh, vertex_normals
from meshinspect.registration import random_rotation
from meshinspect.synthgen import icosphere


def test_tetrahedron_off_has_six_edges(tetra_path):
    mesh = load_mesh(tetra_path)
    assert mesh.n_vertices == 4
    assert mesh.n_faces == 4
    assert mesh.n_edges == 6
    assert mesh.edges.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]


def test_level3_icosphere_file(tmp_path, ico3):
    path = save_mesh(ico3, tmp_path / "ico.off")
    mesh = load_mesh(path)
    assert mesh.n_vertices == 642
    assert 2 * mesh.n_edges == 3840


def test_out_of_range_face_rejected(tmp_path):
    verts = [[float(i), float(i % 3), 0.0] for i in range(10)]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"vertices": verts, "faces": [[0, 1, 999]], "name": "bad"}))
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(path)


def test_degenerate_face_rejected():
    with pytest.raises(MeshError, match="degenerate"):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])


def test_disconnected_mesh_rejected(tmp_path):
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]]
    path = tmp_path / "two.json"
    path.write_text(json.dumps({"vertices": verts, "faces": [[0, 1, 2], [3, 4, 5]], "name": ""}))
    with pytest.raises(MeshError, match="disconnected"):
        load_mesh(path)


@pytest.mark.parametrize("text", ["", "PLY\n", "OFF\n2 1 0\n0 0 0\n", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n"])
def test_malformed_off(tmp_path, text):
    path = tmp_path / "m.off"
    path.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(path)


def test_unknown_format(tmp_path):
    with pytest.raises(MeshError, match="unsupported"):
        load_mesh(tmp_path / "x.stl")


def test_json_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    mesh = icosphere(2).with_vertices(icosphere(2).vertices * 7.3 + rng.normal(size=(162, 3)))
    path = save_mesh(mesh, tmp_path / "m.json")
    again = load_mesh(path)
    save_mesh(again, tmp_path / "m2.json")
    third = load_mesh(tmp_path / "m2.json")
    assert np.array_equal(third.vertices, mesh.vertices)
    assert np.array_equal(third.faces, mesh.faces)


def test_off_roundtrip(tmp_path, ico1):
    path = save_mesh(ico1, tmp_path / "m.off")
    again = load_mesh(path)
    assert np.array_equal(again.vertices, ico1.vertices)
    assert np.array_equal(again.faces, ico1.faces)


def test_edges_invariant_to_face_order(ico1):
    rng = np.random.default_rng(0)
    shuffled = Mesh(ico1.vertices, ico1.faces[rng.permutation(ico1.n_faces)])
    assert np.array_equal(shuffled.edges, ico1.edges)


def test_edges_are_union_of_face_edges(ico1):
    expected = set()
    for a, b, c in ico1.faces.tolist():
        for i, j in ((a, b), (b, c), (c, a)):
            expected.add((min(i, j), max(i, j)))
    assert set(map(tuple, ico1.edges.tolist())) == expected


class TestVertexNormals:
    def test_unit_length(self, ico3):
        n = vertex_normals(ico3)
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)

    @staticmethod
    def _max_sphere_error_deg(mesh):
        n = vertex_normals(mesh)
        exact = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        return np.degrees(np.arccos(np.clip(np.sum(n * exact, axis=1), -1, 1))).max()

    def test_icosphere_normals_match_sphere(self, ico3):
        # Area weighting is not exact on a sphere; the level-3 worst case
        # is ~0.68 degrees (at the valence-5 neighbourhoods) and shrinks
        # under refinement.
        err3 = self._max_sphere_error_deg(ico3)
        assert err3 < 0.7
        assert self._max_sphere_error_deg(icosphere(4)) < err3

    def test_planar_square(self, square):
        n = vertex_normals(square)
        np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (4, 1)), atol=1e-12)

    def test_inverted_winding_still_outward(self, ico3):
        flipped = Mesh(ico3.vertices, ico3.faces[:, ::-1])
        n = vertex_normals(flipped)
        radial = ico3.vertices - ico3.vertices.mean(axis=0)
        assert np.all(np.sum(n * radial, axis=1) > 0)

    def test_zero_normal_raises(self):
        # Two coincident faces with opposite winding cancel at every vertex.
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 1]])
        with pytest.raises(MeshError, match="zero-magnitude"):
            vertex_normals(mesh)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_rotation_equivariance(self, seed):
        mesh = icosphere(2)
        rng = np.random.default_rng(seed)
        mesh = mesh.with_vertices(mesh.vertices * rng.uniform(0.5, 3, size=3))
        R = random_rotation(rng)
        t = rng.uniform(-50, 50, 3)
        rotated = mesh.with_vertices(mesh.vertices @ R.T + t)
        np.testing.assert_allclose(vertex_normals(rotated), vertex_normals(mesh) @ R.T, atol=1e-9)
