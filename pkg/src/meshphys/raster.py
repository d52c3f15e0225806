"""Triangle rasterization with a pixel-centre, top-left fill rule.

A pixel ``(px, py)`` is covered when its centre ``(px + 0.5, py + 0.5)`` lies
strictly inside the triangle, or exactly on an edge that is a *top* or *left*
edge.  With y pointing down and the triangle ordered so that its signed area
is positive, an edge ``a -> b`` is a top edge when it is horizontal with
``b.x > a.x`` and a left edge when ``b.y < a.y``.  Two triangles that share an
edge traverse it in opposite directions, so exactly one of them owns the
pixels on it.
"""
from __future__ import annotations

import numpy as np


def _edge_terms(ax, ay, bx, by, px, py):
    w = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    top_left = ((by == ay) & (bx > ax)) | (by < ay)
    return (w > 0) | ((w == 0) & top_left)


def _oriented(tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reorder vertices so the signed area is positive; also return 2*area."""
    tris = np.array(tris, dtype=np.float64, copy=True)
    area2 = ((tris[..., 1, 0] - tris[..., 0, 0]) * (tris[..., 2, 1] - tris[..., 0, 1])
             - (tris[..., 1, 1] - tris[..., 0, 1]) * (tris[..., 2, 0] - tris[..., 0, 0]))
    neg = area2 < 0
    if np.any(neg):
        swapped = tris[neg][..., [0, 2, 1], :]
        tris[neg] = swapped
    return tris, np.abs(area2)


def rasterize_triangle(triangle, image_extent: tuple[int, int]) -> set[tuple[int, int]]:
    """Pixels ``(px, py)`` covered by one 2D triangle inside a ``width x height`` image."""
    width, height = image_extent
    if width <= 0 or height <= 0:
        raise ValueError("image extent must be positive")
    mask, (x0, y0) = _coverage_block(np.asarray(triangle, dtype=np.float64), width, height)
    ys, xs = np.nonzero(mask)
    return {(int(x + x0), int(y + y0)) for x, y in zip(xs, ys)}


def _coverage_block(tri: np.ndarray, width: int, height: int):
    tri, area2 = _oriented(tri[None])
    tri = tri[0]
    if area2[0] == 0.0 or not np.all(np.isfinite(tri)):
        return np.zeros((0, 0), dtype=bool), (0, 0)
    x0 = max(int(np.floor(tri[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(tri[:, 0].max() - 0.5)), width - 1)
    y0 = max(int(np.floor(tri[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(tri[:, 1].max() - 0.5)), height - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros((0, 0), dtype=bool), (0, 0)
    px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] + 0.5
    inside = np.ones((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        inside &= _edge_terms(tri[a, 0], tri[a, 1], tri[b, 0], tri[b, 1], px, py)
    return inside, (x0, y0)


class FaceCoverage:
    """Pixel coverage of many triangles in one frame, in a padded block layout.

    ``mask[f, j, i]`` says whether pixel ``(x0[f] + i, y0[f] + j)`` belongs to
    face ``f``.  Built in a single vectorised pass, which is what makes
    per-frame STGraph construction and synthetic rendering cheap.
    """

    def __init__(self, triangles: np.ndarray, width: int, height: int,
                 active: np.ndarray | None = None):
        tris, area2 = _oriented(np.asarray(triangles, dtype=np.float64))
        finite = np.all(np.isfinite(tris), axis=(1, 2))
        keep = (area2 > 0) & finite
        if active is not None:
            keep &= np.asarray(active, dtype=bool)
        tris = np.where(keep[:, None, None], tris, 0.0)
        self.width, self.height = int(width), int(height)
        x0 = np.maximum(np.floor(tris[:, :, 0].min(1) - 0.5), 0).astype(np.int64)
        x1 = np.minimum(np.ceil(tris[:, :, 0].max(1) - 0.5), width - 1).astype(np.int64)
        y0 = np.maximum(np.floor(tris[:, :, 1].min(1) - 0.5), 0).astype(np.int64)
        y1 = np.minimum(np.ceil(tris[:, :, 1].max(1) - 0.5), height - 1).astype(np.int64)
        keep &= (x1 >= x0) & (y1 >= y0)
        bw = int(max((x1 - x0)[keep].max(initial=-1) + 1, 1))
        bh = int(max((y1 - y0)[keep].max(initial=-1) + 1, 1))
        ix = x0[:, None, None] + np.arange(bw)[None, None, :]
        iy = y0[:, None, None] + np.arange(bh)[None, :, None]
        px = ix + 0.5
        py = iy + 0.5
        mask = np.broadcast_to(keep[:, None, None], (len(tris), bh, bw)).copy()
        mask &= (ix <= x1[:, None, None]) & (iy <= y1[:, None, None])
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ax, ay = tris[:, a, 0, None, None], tris[:, a, 1, None, None]
            bx, by = tris[:, b, 0, None, None], tris[:, b, 1, None, None]
            mask &= _edge_terms(ax, ay, bx, by, px, py)
        self.mask = mask
        self.x0, self.y0 = x0, y0
        self.ix = np.minimum(np.broadcast_to(ix, mask.shape), width - 1)
        self.iy = np.minimum(np.broadcast_to(iy, mask.shape), height - 1)

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=(1, 2))

    def pixel_sets(self) -> list[set[tuple[int, int]]]:
        out = []
        for f in range(len(self.mask)):
            js, is_ = np.nonzero(self.mask[f])
            out.append({(int(self.x0[f] + i), int(self.y0[f] + j)) for i, j in zip(is_, js)})
        return out

    def sums(self, image: np.ndarray) -> np.ndarray:
        """Per-face sum of pixel values; ``image`` is H x W x C."""
        vals = image[self.iy, self.ix]  # F x bh x bw x C
        return np.einsum("fhwc,fhw->fc", vals, self.mask, dtype=np.float64)

    def paint(self, image: np.ndarray, colors: np.ndarray) -> None:
        """Write one colour per face into ``image`` (last writer wins on overlaps)."""
        f, j, i = np.nonzero(self.mask)
        image[self.iy[f, j, i], self.ix[f, j, i]] = colors[f]

    def label_map(self, fill: int = -1) -> np.ndarray:
        labels = np.full((self.height, self.width), fill, dtype=np.int64)
        f, j, i = np.nonzero(self.mask)
        labels[self.iy[f, j, i], self.ix[f, j, i]] = f
        return labels
