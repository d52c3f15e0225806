from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from meshphys import fileio
from meshphys.fileio import DataError
from meshphys.stgraph import STGraph, average_edges_per_node, build_adjacency
from meshphys.synth import make_synthetic_topology


def test_landmark_round_trip(tmp_path, rng):
    v = rng.normal(size=(5, 7, 3)).astype(np.float32)
    v[2] = np.nan
    path = str(tmp_path / "a.lmk")
    fileio.write_landmarks(path, v, 29.97)
    got, fps = fileio.read_landmarks(path)
    assert fps == 29.97
    assert np.array_equal(got, v, equal_nan=True)
    with pytest.raises(ValueError):
        fileio.write_landmarks(path, v[..., :2], 30.0)


def test_topology_round_trip(tmp_path):
    topo = make_synthetic_topology(100)
    path = str(tmp_path / "t.top")
    fileio.write_topology(path, topo)
    got = fileio.read_topology(path)
    assert np.array_equal(got.faces, topo.faces)
    assert np.allclose(got.canonical_vertices, topo.canonical_vertices, atol=1e-7)


def test_packaged_topology():
    topo = fileio.read_topology(fileio.packaged_topology_path())
    assert topo.num_faces == 852
    assert abs(average_edges_per_node(build_adjacency(topo, "shared_vertex")) - 12.7) <= 0.2


def test_reference_round_trip_and_errors(tmp_path):
    path = str(tmp_path / "r.csv")
    ts = np.arange(10) / 30.0
    fileio.write_reference(path, ts, np.sin(ts))
    got_t, got_v = fileio.read_reference(path)
    assert np.allclose(got_t, ts) and np.allclose(got_v, np.sin(ts))
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,value\n0.1,1\n0.0,2\n")
    with pytest.raises(DataError):
        fileio.read_reference(str(bad))
    bad.write_text("timestamp,value\n0.1,abc\n")
    with pytest.raises(DataError):
        fileio.read_reference(str(bad))
    with pytest.raises(DataError):
        fileio.read_reference(str(tmp_path / "missing.csv"))


def test_frame_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
    d = tmp_path / "frames"
    d.mkdir()
    for i in (2, 0, 1):
        fileio.write_frame(str(d / f"{i:06d}.png"), img + i)
    paths = fileio.list_frames(str(d))
    assert [p[-10:] for p in paths] == ["000000.png", "000001.png", "000002.png"]
    assert np.array_equal(fileio.read_frame(paths[1]), img + 1)
    with pytest.raises(DataError):
        fileio.list_frames(str(tmp_path / "nope"))


def test_stgraph_round_trip(tmp_path, rng):
    n = 13
    x = rng.normal(size=(3, 7, n)).astype(np.float32)
    occ = rng.uniform(size=(7, n)) < 0.3
    adj = sp.csr_array(
        ((rng.uniform(size=(n, n)) < 0.3) | np.eye(n, dtype=bool)).astype(float))
    adj = ((adj + adj.T) > 0).astype(float)
    g = STGraph(x, adj, occ, 30.0, "mesh3d:face_average")
    path = str(tmp_path / "g.stg")
    fileio.write_stgraph(path, g)
    back = fileio.read_stgraph(path)
    assert back.features.tobytes() == x.tobytes()
    assert np.array_equal(back.occlusion, occ)
    assert (back.adjacency != adj).nnz == 0
    assert back.fps == 30.0 and back.region == g.region


@pytest.mark.parametrize("reader,magic", [(fileio.read_landmarks, b"TOP1"),
                                          (fileio.read_topology, b"LMK1"),
                                          (fileio.read_stgraph, b"XXXX")])
def test_bad_magic_and_truncation(tmp_path, reader, magic):
    path = tmp_path / "f.bin"
    path.write_bytes(magic + b"\0" * 4)
    with pytest.raises(DataError):
        reader(str(path))


def test_truncated_landmarks(tmp_path, rng):
    path = str(tmp_path / "a.lmk")
    fileio.write_landmarks(path, rng.normal(size=(4, 3, 3)), 30.0)
    data = open(path, "rb").read()
    open(path, "wb").write(data[:-5])
    with pytest.raises(DataError, match="truncated"):
        fileio.read_landmarks(path)
    with pytest.raises(DataError):
        fileio.read_landmarks(str(tmp_path / "missing.lmk"))
