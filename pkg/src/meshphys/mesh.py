"""Mesh types, per-face geometry and image-plane projection.

Coordinates follow the usual face-mesh detector layout: x and y are pixels in
the source frame (y grows downward) and z is a pixel-scaled relative depth
that decreases toward the camera.  Projection is orthographic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# viewing direction of the camera
CAMERA_DIRECTION = np.array([0.0, 0.0, -1.0])


class TopologyError(ValueError):
    """Raised for malformed triangulations or out-of-range indices."""


@dataclass(frozen=True)
class CanonicalTopology:
    faces: np.ndarray
    canonical_vertices: np.ndarray

    def __post_init__(self):
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        verts = np.ascontiguousarray(self.canonical_vertices, dtype=np.float64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise TopologyError(f"faces must be F x 3, got {faces.shape}")
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise TopologyError(f"canonical vertices must be V x 3, got {verts.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise TopologyError("face index out of range")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                  | (faces[:, 0] == faces[:, 2])):
            raise TopologyError("face with repeated vertex index")
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "canonical_vertices", verts)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def num_vertices(self) -> int:
        return len(self.canonical_vertices)

    def face_centroids(self) -> np.ndarray:
        return self.canonical_vertices[self.faces].mean(axis=1)


@dataclass
class MeshSequence:
    vertices: np.ndarray  # T x V x 3
    topology: CanonicalTopology
    fps: float
    start_frame: int = field(default=0)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise TopologyError(f"vertices must be T x V x 3, got {self.vertices.shape}")
        if len(self.vertices) < 1:
            raise TopologyError("mesh sequence needs at least one frame")
        if self.vertices.shape[1] != self.topology.num_vertices:
            raise TopologyError(
                f"vertex count {self.vertices.shape[1]} does not match topology "
                f"({self.topology.num_vertices})")
        if not np.all(np.isfinite(self.vertices[..., :2])):
            raise TopologyError("non-finite vertex positions; split the sequence at gaps")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.vertices)


def _check_face(vertices: np.ndarray, face) -> np.ndarray:
    face = np.asarray(face, dtype=np.int64)
    if face.shape != (3,) or face.min() < 0 or face.max() >= len(vertices):
        raise TopologyError(f"face {face.tolist()} invalid for {len(vertices)} vertices")
    return face


def face_normal(vertices_at_t: np.ndarray, face) -> tuple[np.ndarray, bool]:
    """Unit normal of one face and a flag that is True for zero-area triangles."""
    vertices_at_t = np.asarray(vertices_at_t, dtype=np.float64)
    v0, v1, v2 = vertices_at_t[_check_face(vertices_at_t, face)]
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(n)
    scale = max(np.abs(v1 - v0).max(), np.abs(v2 - v0).max(), 1.0)
    if norm <= 1e-12 * scale * scale:
        return np.zeros(3), True
    return n / norm, False


def face_normals(vertices_at_t: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`face_normal` over all faces (or over a T x V x 3 stack).

    Returns ``(normals, degenerate)`` with shapes ``(..., F, 3)`` and ``(..., F)``.
    """
    tri = np.asarray(vertices_at_t, dtype=np.float64)[..., faces, :]
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=-1)
    scale = np.maximum(np.maximum(np.abs(e1).max(-1), np.abs(e2).max(-1)), 1.0)
    degenerate = norm <= 1e-12 * scale * scale
    safe = np.where(degenerate, 1.0, norm)
    n = np.where(degenerate[..., None], 0.0, n / safe[..., None])
    return n, degenerate


def is_occluded(normal) -> np.ndarray | bool:
    """Back-face test: the face is hidden when ``normal . d_c < 0`` (i.e. normal_z > 0)."""
    normal = np.asarray(normal, dtype=np.float64)
    out = normal @ CAMERA_DIRECTION < 0
    return bool(out) if out.ndim == 0 else out


def project_face(vertices_at_t: np.ndarray, face) -> tuple[np.ndarray, bool]:
    """Orthographic projection of one face; returns the 3 x 2 triangle and a degenerate flag."""
    vertices_at_t = np.asarray(vertices_at_t, dtype=np.float64)
    tri = vertices_at_t[_check_face(vertices_at_t, face)][:, :2].copy()
    area2 = (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1]) \
        - (tri[1, 1] - tri[0, 1]) * (tri[2, 0] - tri[0, 0])
    return tri, bool(area2 == 0.0)


def project_vertices(vertices: np.ndarray) -> np.ndarray:
    return np.asarray(vertices)[..., :2]


def edge_map(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    """Undirected edge -> list of incident face indices."""
    out: dict[tuple[int, int], list[int]] = {}
    for i, (a, b, c) in enumerate(np.asarray(faces).tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            out.setdefault((min(u, v), max(u, v)), []).append(i)
    return out


def validate_topology(topology: CanonicalTopology) -> None:
    """Check manifoldness and consistent winding; raise TopologyError otherwise."""
    directed: dict[tuple[int, int], int] = {}
    for i, (a, b, c) in enumerate(topology.faces.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            if (u, v) in directed:
                raise TopologyError(
                    f"edge ({u},{v}) traversed in the same direction by faces "
                    f"{directed[(u, v)]} and {i}: inconsistent winding")
            directed[(u, v)] = i
    for (u, v), faces in edge_map(topology.faces).items():
        if len(faces) > 2:
            raise TopologyError(f"non-manifold edge ({u},{v}) shared by {len(faces)} faces")
