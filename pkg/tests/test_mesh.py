from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from meshphys.mesh import (CanonicalTopology, MeshSequence, TopologyError, face_normal,
                           face_normals, is_occluded, project_face, validate_topology)

from conftest import closed_sphere

finite = st.floats(-100, 100, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def test_face_normal_examples():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    n, deg = face_normal(v, [0, 1, 2])
    assert np.allclose(n, [0, 0, 1]) and not deg
    n, deg = face_normal(v, [0, 2, 1])
    assert np.allclose(n, [0, 0, -1]) and not deg
    n, deg = face_normal(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], float), [0, 1, 2])
    assert deg and np.array_equal(n, np.zeros(3))


def test_face_normal_bad_index():
    with pytest.raises(TopologyError):
        face_normal(np.zeros((3, 3)), [0, 1, 3])


def test_is_occluded_examples():
    assert is_occluded([0, 0, -1]) is False
    assert is_occluded([0, 0, 1]) is True
    assert is_occluded([1, 0, 0]) is False


def test_project_face_examples():
    v = np.array([[10, 20, 5], [30, 20, -2], [10, 60, 0]], float)
    tri, deg = project_face(v, [0, 1, 2])
    assert np.array_equal(tri, [[10, 20], [30, 20], [10, 60]]) and not deg
    _, deg = project_face(np.array([[3, 3, 1]] * 3, float), [0, 1, 2])
    assert deg
    tri, _ = project_face(np.array([[-50, 20, 0], [30, 900, 0], [10, 60, 0]], float), [0, 1, 2])
    assert np.array_equal(tri, [[-50, 20], [30, 900], [10, 60]])


@given(st.lists(vec3, min_size=3, max_size=3))
def test_normal_has_unit_norm(pts):
    n, deg = face_normal(np.array(pts), [0, 1, 2])
    if not deg:
        assert abs(np.linalg.norm(n) - 1.0) < 1e-9


@given(st.integers(0, 2 ** 31 - 1))
def test_normals_rotate_with_the_mesh(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(12, 3))
    faces = np.array([rng.choice(12, 3, replace=False) for _ in range(8)])
    r = Rotation.random(random_state=seed).as_matrix()
    n0, d0 = face_normals(v, faces)
    n1, d1 = face_normals(v @ r.T, faces)
    ok = ~d0
    assert np.array_equal(d0, d1)
    assert np.abs(n1[ok] - n0[ok] @ r.T).max() < 1e-9


@given(vec3)
def test_occlusion_xor_under_negation(n):
    n = np.array(n)
    if n[2] != 0:
        assert is_occluded(n) != is_occluded(-n)


def test_vectorised_normals_match_scalar():
    topo = closed_sphere(40)
    n, _ = face_normals(topo.canonical_vertices, topo.faces)
    for i, f in enumerate(topo.faces):
        assert np.allclose(n[i], face_normal(topo.canonical_vertices, f)[0], atol=1e-12)


def test_validate_topology_winding():
    validate_topology(closed_sphere(30))
    bad = closed_sphere(30)
    faces = bad.faces.copy()
    faces[0] = faces[0, [0, 2, 1]]
    with pytest.raises(TopologyError, match="winding"):
        validate_topology(CanonicalTopology(faces, bad.canonical_vertices))


def test_topology_and_sequence_contracts():
    v = np.zeros((4, 3))
    with pytest.raises(TopologyError):
        CanonicalTopology(np.array([[0, 1, 4]]), v)
    with pytest.raises(TopologyError):
        CanonicalTopology(np.array([[0, 1, 1]]), v)
    topo = CanonicalTopology(np.array([[0, 1, 2]]), v)
    with pytest.raises(TopologyError):
        MeshSequence(np.zeros((2, 5, 3)), topo, 30.0)
    bad = np.zeros((2, 4, 3))
    bad[1, 0, 0] = np.nan
    with pytest.raises(TopologyError):
        MeshSequence(bad, topo, 30.0)
    assert len(MeshSequence(np.zeros((3, 4, 3)), topo, 30.0)) == 3
