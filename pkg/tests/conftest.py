from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def closed_sphere(n: int = 60, seed: int = 0):
    """Convex hull of random sphere points with outward winding (a closed surface)."""
    from scipy.spatial import ConvexHull

    from meshphys.mesh import CanonicalTopology, face_normals

    pts = np.random.default_rng(seed).normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    faces = ConvexHull(pts).simplices.astype(np.int64)
    normals, _ = face_normals(pts, faces)
    outward = np.einsum("fk,fk->f", normals, pts[faces].mean(axis=1)) > 0
    faces = np.where(outward[:, None], faces, faces[:, [0, 2, 1]])
    return CanonicalTopology(faces, pts)


def planar_grid(n: int = 6, cell: float = 8.0, origin: float = 8.0):
    """n x n square cells split into two triangles each, vertices on integer pixels, z = 0."""
    from meshphys.mesh import CanonicalTopology

    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    faces = []
    for r in range(n):
        for c in range(n):
            a, b, d, e = idx[r, c], idx[r, c + 1], idx[r + 1, c], idx[r + 1, c + 1]
            faces += [(a, d, b), (b, d, e)]
    yy, xx = np.mgrid[0:n + 1, 0:n + 1]
    verts = np.c_[origin + cell * xx.ravel(), origin + cell * yy.ravel(), np.zeros(xx.size)]
    return CanonicalTopology(np.array(faces), verts)


def brute_force(tri, width, height):
    """Independent oracle: test every pixel centre against the three edge functions."""
    (ax, ay), (bx, by), (cx, cy) = [tuple(map(float, p)) for p in tri]
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area == 0:
        return set()
    if area < 0:
        (bx, by), (cx, cy) = (cx, cy), (bx, by)
    out = set()
    for py in range(height):
        for px in range(width):
            x, y = px + 0.5, py + 0.5
            ok = True
            for (ux, uy), (vx, vy) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)),
                                       ((cx, cy), (ax, ay))):
                w = (vx - ux) * (y - uy) - (vy - uy) * (x - ux)
                top = vy == uy and vx > ux
                left = vy < uy
                if not (w > 0 or (w == 0 and (top or left))):
                    ok = False
                    break
            if ok:
                out.add((px, py))
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
