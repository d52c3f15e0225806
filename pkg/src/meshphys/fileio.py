"""On-disk formats: landmarks, topology, reference waveforms, frames and STGraph caches.

All binary containers are little-endian and start with a 4-byte magic.

* ``LMK1``: uint32 V, uint32 T, float64 fps, then T x V x 3 float32.  A frame
  whose values are NaN marks a missing detection.
* ``TOP1``: uint32 F, uint32 V, F x 3 int32 indices, V x 3 float32 canonical
  vertex positions.
* ``STG1``: uint32 C, T, N; float64 fps; uint16 tag length + UTF-8 tag;
  X as float32 in C/T/N order; the T x N occlusion mask as packed bits;
  uint32 edge count followed by that many int32 (row, col) pairs.
"""
from __future__ import annotations

import os
import struct

import numpy as np
import scipy.sparse as sp
from PIL import Image

from .mesh import CanonicalTopology
from .stgraph import STGraph


class DataError(Exception):
    """Missing, malformed or inconsistent input data."""


def _read_magic(fh, magic: bytes, path: str):
    got = fh.read(4)
    if got != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {got!r}")


def _read_exact(fh, n: int, path: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated file")
    return buf


# ---------------------------------------------------------------- landmarks

def write_landmarks(path: str, vertices: np.ndarray, fps: float) -> None:
    v = np.ascontiguousarray(vertices, dtype="<f4")
    if v.ndim != 3 or v.shape[2] != 3:
        raise ValueError("landmarks must be T x V x 3")
    t, n, _ = v.shape
    with open(path, "wb") as fh:
        fh.write(b"LMK1")
        fh.write(struct.pack("<IId", n, t, float(fps)))
        fh.write(v.tobytes())


def read_landmarks(path: str) -> tuple[np.ndarray, float]:
    """Returns ``(T x V x 3 float32 array, fps)``; missing frames are NaN."""
    if not os.path.exists(path):
        raise DataError(f"landmark file not found: {path}")
    with open(path, "rb") as fh:
        _read_magic(fh, b"LMK1", path)
        n, t, fps = struct.unpack("<IId", _read_exact(fh, 16, path))
        data = _read_exact(fh, t * n * 3 * 4, path)
    return np.frombuffer(data, dtype="<f4").reshape(t, n, 3).copy(), fps


# ----------------------------------------------------------------- topology

def write_topology(path: str, topology: CanonicalTopology) -> None:
    with open(path, "wb") as fh:
        fh.write(b"TOP1")
        fh.write(struct.pack("<II", topology.num_faces, topology.num_vertices))
        fh.write(np.ascontiguousarray(topology.faces, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(topology.canonical_vertices, dtype="<f4").tobytes())


def read_topology(path: str) -> CanonicalTopology:
    if not os.path.exists(path):
        raise DataError(f"topology file not found: {path}")
    with open(path, "rb") as fh:
        _read_magic(fh, b"TOP1", path)
        f, v = struct.unpack("<II", _read_exact(fh, 8, path))
        faces = np.frombuffer(_read_exact(fh, f * 12, path), dtype="<i4").reshape(f, 3)
        verts = np.frombuffer(_read_exact(fh, v * 12, path), dtype="<f4").reshape(v, 3)
    return CanonicalTopology(faces.astype(np.int64), verts.astype(np.float64))


def packaged_topology_path(name: str = "canonical_852.top") -> str:
    return os.path.join(os.path.dirname(__file__), "data", name)


# ---------------------------------------------------------------- reference

def write_reference(path: str, timestamps: np.ndarray, values: np.ndarray) -> None:
    table = np.c_[np.asarray(timestamps, dtype=np.float64), np.asarray(values, dtype=np.float64)]
    np.savetxt(path, table, delimiter=",", header="timestamp,value", comments="", fmt="%.9g")


def read_reference(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise DataError(f"reference file not found: {path}")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if table.shape[1] != 2 or len(table) < 2:
        raise DataError(f"{path}: expected at least two (timestamp, value) rows")
    if np.any(np.diff(table[:, 0]) <= 0):
        raise DataError(f"{path}: timestamps must increase")
    return table[:, 0], table[:, 1]


# ------------------------------------------------------------------- frames

def write_frame(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, compress_level=1)


def list_frames(frames_dir: str) -> list[str]:
    if not os.path.isdir(frames_dir):
        raise DataError(f"frames directory not found: {frames_dir}")
    names = sorted(n for n in os.listdir(frames_dir)
                   if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    return [os.path.join(frames_dir, n) for n in names]


def read_frame(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# ------------------------------------------------------------ STGraph cache

def write_stgraph(path: str, graph: STGraph) -> None:
    c, t, n = graph.features.shape
    tag = graph.region.encode("utf-8")
    coo = sp.coo_array(graph.adjacency)
    order = np.lexsort((coo.col, coo.row))
    pairs = np.c_[coo.row[order], coo.col[order]].astype("<i4")
    with open(path, "wb") as fh:
        fh.write(b"STG1")
        fh.write(struct.pack("<IIId", c, t, n, float(graph.fps)))
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        fh.write(np.ascontiguousarray(graph.features, dtype="<f4").tobytes())
        fh.write(np.packbits(graph.occlusion.astype(bool).ravel(), bitorder="little").tobytes())
        fh.write(struct.pack("<I", len(pairs)))
        fh.write(pairs.tobytes())


def read_stgraph(path: str, positions: np.ndarray | None = None) -> STGraph:
    if not os.path.exists(path):
        raise DataError(f"STGraph cache not found: {path}")
    with open(path, "rb") as fh:
        _read_magic(fh, b"STG1", path)
        c, t, n, fps = struct.unpack("<IIId", _read_exact(fh, 20, path))
        (tag_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
        tag = _read_exact(fh, tag_len, path).decode("utf-8")
        X = np.frombuffer(_read_exact(fh, c * t * n * 4, path), dtype="<f4").reshape(c, t, n)
        nbits = t * n
        packed = np.frombuffer(_read_exact(fh, (nbits + 7) // 8, path), dtype=np.uint8)
        mask = np.unpackbits(packed, count=nbits, bitorder="little").astype(bool).reshape(t, n)
        (m,) = struct.unpack("<I", _read_exact(fh, 4, path))
        pairs = np.frombuffer(_read_exact(fh, m * 8, path), dtype="<i4").reshape(m, 2)
    adj = sp.csr_array((np.ones(m), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return STGraph(X.astype(np.float32), adj, mask, fps, tag, positions=positions)
