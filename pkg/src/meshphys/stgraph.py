"""STGraph construction: node features, occlusion mask and adjacency.

Every ablation variant (mesh / grid node regions, pixel and patch features,
alternative edge sets, coarser node counts) is produced here so that the model
and trainer only ever see one data type.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import CanonicalTopology, MeshSequence, TopologyError, face_normals, validate_topology
from .pooling import compute_clusters, num_clusters, pool_adjacency, pool_features
from .raster import FaceCoverage

REGION_KINDS = ("mesh3d", "mesh2d", "boxes2d", "box2d_static", "video_grid")
FEATURE_KINDS = ("face_average", "centroid_pixel", "centroid_patch")
EDGE_KINDS = ("shared_vertex", "shared_edge", "self_only", "fully_connected", "random", "grid8")


@dataclass(frozen=True)
class RegionScheme:
    kind: str = "mesh3d"
    grid: int = 29
    feature: str = "face_average"
    patch: tuple[int, int] = (7, 7)

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ValueError(f"unknown region scheme {self.kind!r}")
        if self.feature not in FEATURE_KINDS:
            raise ValueError(f"unknown node feature mode {self.feature!r}")
        if self.grid < 1:
            raise ValueError("grid dimension must be >= 1")
        h, w = self.patch
        if h < 1 or w < 1 or h % 2 == 0 or w % 2 == 0:
            raise ValueError("patch sides must be odd and >= 1")

    @property
    def is_grid(self) -> bool:
        return self.kind in ("boxes2d", "box2d_static", "video_grid")

    @property
    def tag(self) -> str:
        parts = [self.kind]
        if self.is_grid:
            parts.append(f"g{self.grid}")
        if self.feature == "centroid_patch":
            parts.append(f"patch{self.patch[0]}x{self.patch[1]}")
        elif self.feature != "face_average":
            parts.append(self.feature)
        return ":".join(parts)


@dataclass(frozen=True)
class EdgeScheme:
    kind: str = "shared_vertex"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge scheme {self.kind!r}")


@dataclass
class STGraph:
    """Node features ``X`` (C x T x N), adjacency ``A`` (N x N) and occlusion mask (T x N)."""

    features: np.ndarray
    adjacency: sp.csr_array
    occlusion: np.ndarray
    fps: float
    region: str = "mesh3d"
    positions: np.ndarray | None = None
    pixel_counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        c, t, n = self.features.shape
        if self.adjacency.shape != (n, n):
            raise ValueError(f"adjacency {self.adjacency.shape} does not match N={n}")
        if self.occlusion.shape != (t, n):
            raise ValueError(f"occlusion mask {self.occlusion.shape} does not match T x N")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape

    @property
    def num_nodes(self) -> int:
        return self.features.shape[2]

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    def slice_frames(self, start: int, stop: int) -> "STGraph":
        return replace(
            self,
            features=self.features[:, start:stop],
            occlusion=self.occlusion[start:stop],
            pixel_counts=None if self.pixel_counts is None else self.pixel_counts[start:stop],
        )


# ---------------------------------------------------------------- adjacency

def _as_edge_scheme(scheme) -> EdgeScheme:
    return scheme if isinstance(scheme, EdgeScheme) else EdgeScheme(str(scheme))


def face_incidence(topology: CanonicalTopology) -> sp.csr_array:
    f = topology.num_faces
    rows = np.repeat(np.arange(f), 3)
    return sp.csr_array((np.ones(3 * f), (rows, topology.faces.ravel())),
                        shape=(f, topology.num_vertices))


def grid8_adjacency(rows: int, cols: int) -> sp.csr_array:
    """8-neighbour grid connectivity with self-loops, row-major node order."""
    idx = np.arange(rows * cols).reshape(rows, cols)
    src, dst = [], []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r0, r1 = max(0, -dr), rows - max(0, dr)
            c0, c1 = max(0, -dc), cols - max(0, dc)
            src.append(idx[r0:r1, c0:c1].ravel())
            dst.append(idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel())
    src, dst = np.concatenate(src), np.concatenate(dst)
    n = rows * cols
    return sp.csr_array((np.ones(len(src)), (src, dst)), shape=(n, n))


def build_adjacency(topology: CanonicalTopology | None, scheme="shared_vertex",
                    grid: tuple[int, int] | None = None) -> sp.csr_array:
    """Symmetric 0/1 adjacency with unit diagonal for one of the edge schemes."""
    scheme = _as_edge_scheme(scheme)
    if scheme.kind == "grid8":
        if grid is None:
            raise ValueError("grid8 adjacency needs grid=(rows, cols)")
        return grid8_adjacency(*grid)
    if topology is None:
        if grid is None:
            raise ValueError("need a topology or grid dimensions")
        n = grid[0] * grid[1]
    else:
        validate_topology(topology)
        n = topology.num_faces

    if scheme.kind == "self_only":
        return sp.csr_array(sp.eye_array(n, format="csr"))
    if scheme.kind == "fully_connected":
        return sp.csr_array(np.ones((n, n)))

    if topology is None:
        base = grid8_adjacency(*grid)
    else:
        m = face_incidence(topology)
        shared = sp.csr_array(m @ m.T)
        thresh = 2 if scheme.kind == "shared_edge" else 1
        base = sp.csr_array((shared >= thresh).astype(np.float64))
    if scheme.kind in ("shared_vertex", "shared_edge"):
        return base

    # random edges, same number of undirected off-diagonal edges as shared-vertex
    n_edges = (base.nnz - n) // 2
    rng = np.random.default_rng(scheme.seed)
    total_pairs = n * (n - 1) // 2
    picks = rng.choice(total_pairs, size=n_edges, replace=False)
    iu, ju = np.triu_indices(n, k=1)
    i, j = iu[picks], ju[picks]
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    return sp.csr_array((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def average_edges_per_node(adjacency) -> float:
    a = sp.csr_array(adjacency)
    return a.nnz / a.shape[0]


# ------------------------------------------------------------ node features

def node_feature(frame: np.ndarray, pixels: Iterable[tuple[int, int]], occluded: bool) -> np.ndarray:
    """Mean RGB over a pixel set, scaled to [0, 1]; zero when occluded or empty."""
    pixels = list(pixels)
    if occluded or not pixels:
        return np.zeros(3)
    img = _as_unit_image(frame)
    xs = np.array([p[0] for p in pixels])
    ys = np.array([p[1] for p in pixels])
    return img[ys, xs].mean(axis=0)


def _as_unit_image(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    if frame.dtype == np.uint16:
        return frame.astype(np.float64) / 65535.0
    return np.clip(frame.astype(np.float64), 0.0, 1.0)


def _integral(img: np.ndarray) -> np.ndarray:
    s = np.zeros((img.shape[0] + 1, img.shape[1] + 1, img.shape[2]))
    s[1:, 1:] = img.cumsum(0).cumsum(1)
    return s


def _rect_means(integral: np.ndarray, x0, x1, y0, y1):
    """Mean over integer pixel ranges [x0, x1) x [y0, y1) (already clipped)."""
    total = (integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0])
    count = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)
    mean = total / np.maximum(count, 1)[:, None]
    return mean, count


def _patch_ranges(cx, cy, patch, width, height):
    """Integer pixel ranges of an H x W patch centred on the pixel holding (cx, cy)."""
    ph, pw = patch
    px = np.floor(cx).astype(np.int64)
    py = np.floor(cy).astype(np.int64)
    x0 = np.clip(px - pw // 2, 0, width)
    x1 = np.clip(px + pw // 2 + 1, 0, width)
    y0 = np.clip(py - ph // 2, 0, height)
    y1 = np.clip(py + ph // 2 + 1, 0, height)
    return x0, x1, y0, y1


def _grid_cells(box, g, width, height):
    """Integer pixel ranges of the g x g cells (row-major) of ``box`` = (xmin, ymin, xmax, ymax).

    A pixel belongs to a cell when its centre falls in the half-open cell
    rectangle; cells are clipped to the image.
    """
    xmin, ymin, xmax, ymax = box
    xs = xmin + (xmax - xmin) * np.arange(g + 1) / g
    ys = ymin + (ymax - ymin) * np.arange(g + 1) / g
    xe = np.clip(np.ceil(xs - 0.5), 0, width).astype(np.int64)
    ye = np.clip(np.ceil(ys - 0.5), 0, height).astype(np.int64)
    cx0 = np.tile(xe[:-1], g)
    cx1 = np.tile(xe[1:], g)
    cy0 = np.repeat(ye[:-1], g)
    cy1 = np.repeat(ye[1:], g)
    centers_x = np.tile((xs[:-1] + xs[1:]) / 2, g)
    centers_y = np.repeat((ys[:-1] + ys[1:]) / 2, g)
    return cx0, cx1, cy0, cy1, centers_x, centers_y


def grid_positions(g: int) -> np.ndarray:
    c = (np.arange(g) + 0.5) / g
    xx, yy = np.meshgrid(c, c)
    return np.c_[xx.ravel(), yy.ravel(), np.zeros(g * g)]


# ------------------------------------------------------------------- builder

def _frame_iter(frames, count: int):
    if callable(frames):
        for t in range(count):
            yield frames(t)
    else:
        for t in range(count):
            yield frames[t]


def build_stgraph(frames: Sequence[np.ndarray] | np.ndarray, mesh: MeshSequence,
                  region: RegionScheme | str = RegionScheme(),
                  edges: EdgeScheme | str | None = None) -> STGraph:
    """Construct an STGraph from T frames (H x W x 3) and a T-frame mesh sequence.

    ``frames`` may be an array, a sequence, or a callable ``t -> frame``.
    Mesh regions use shared-vertex edges and grid regions 8-neighbour edges
    unless ``edges`` overrides them.
    """
    region = region if isinstance(region, RegionScheme) else RegionScheme(str(region))
    t_count = len(mesh)
    if not callable(frames) and len(frames) != t_count:
        raise ValueError(f"{len(frames)} frames but mesh sequence has {t_count}")
    if t_count == 0:
        raise ValueError("empty frame sequence")
    topo = mesh.topology

    if region.is_grid:
        g = region.grid
        n = g * g
        adjacency = build_adjacency(None, edges or "grid8", grid=(g, g))
        positions = grid_positions(g)
    else:
        n = topo.num_faces
        adjacency = build_adjacency(topo, edges or "shared_vertex")
        positions = topo.face_centroids()

    X = np.zeros((3, t_count, n), dtype=np.float32)
    mask = np.zeros((t_count, n), dtype=bool)
    counts = np.zeros((t_count, n), dtype=np.int32)

    static_box = None
    for t, frame in enumerate(_frame_iter(frames, t_count)):
        img = _as_unit_image(frame)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"frame {t} must be H x W x 3, got {img.shape}")
        height, width = img.shape[:2]
        verts = mesh.vertices[t]
        xy = verts[:, :2]

        if region.is_grid:
            if region.kind == "video_grid":
                box = (0.0, 0.0, float(width), float(height))
            else:
                box = (xy[:, 0].min(), xy[:, 1].min(), xy[:, 0].max(), xy[:, 1].max())
                if region.kind == "box2d_static":
                    if static_box is None:
                        static_box = box
                    box = static_box
            x0, x1, y0, y1, cx, cy = _grid_cells(box, region.grid, width, height)
            cell_count = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)
            empty = cell_count == 0
            integral = _integral(img)
            if region.feature == "face_average":
                vals, cnt = _rect_means(integral, x0, x1, y0, y1)
            else:
                patch = (1, 1) if region.feature == "centroid_pixel" else region.patch
                inside = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
                px0, px1, py0, py1 = _patch_ranges(cx, cy, patch, width, height)
                vals, cnt = _rect_means(integral, px0, px1, py0, py1)
                empty = empty | ~inside | (cnt == 0)
            occluded = empty
        else:
            tris = xy[topo.faces]
            if region.kind == "mesh3d":
                normals, degenerate = face_normals(verts, topo.faces)
                occluded = degenerate | (normals[:, 2] > 0)
            else:
                area2 = ((tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 1] - tris[:, 0, 1])
                         - (tris[:, 1, 1] - tris[:, 0, 1]) * (tris[:, 2, 0] - tris[:, 0, 0]))
                occluded = area2 == 0
            if region.feature == "face_average":
                cov = FaceCoverage(tris, width, height, active=~occluded)
                cnt = cov.counts()
                vals = cov.sums(img) / np.maximum(cnt, 1)[:, None]
                occluded = occluded | (cnt == 0)
            else:
                patch = (1, 1) if region.feature == "centroid_pixel" else region.patch
                c = tris.mean(axis=1)
                inside = (c[:, 0] >= 0) & (c[:, 0] < width) & (c[:, 1] >= 0) & (c[:, 1] < height)
                px0, px1, py0, py1 = _patch_ranges(c[:, 0], c[:, 1], patch, width, height)
                vals, cnt = _rect_means(_integral(img), px0, px1, py0, py1)
                occluded = occluded | ~inside | (cnt == 0)

        vals = np.where(occluded[:, None], 0.0, vals)
        X[:, t, :] = vals.T
        mask[t] = occluded
        counts[t] = np.where(occluded, 0, cnt)

    return STGraph(X, sp.csr_array(adjacency), mask, float(mesh.fps), region.tag,
                   positions=positions, pixel_counts=counts)


def with_adjacency(graph: STGraph, topology: CanonicalTopology | None, scheme) -> STGraph:
    """Same features, different edge set."""
    n = graph.num_nodes
    if topology is not None and topology.num_faces == n:
        adj = build_adjacency(topology, scheme)
    else:
        g = int(round(np.sqrt(n)))
        adj = build_adjacency(None, scheme, grid=(g, n // g))
    return replace(graph, adjacency=adj)


def coarsen_input_nodes(graph: STGraph, target: int, ratio: int = 4, seed: int = 0) -> STGraph:
    """Pool the input graph itself down to ``target`` nodes (852 -> 213 -> 53 -> 13 -> 1)."""
    if target < 1:
        raise ValueError("target node count must be >= 1")
    if target > graph.num_nodes:
        raise ValueError(f"target {target} exceeds node count {graph.num_nodes}")
    if graph.positions is None:
        raise ValueError("graph has no node positions to cluster on")
    adj = graph.adjacency
    pos = graph.positions
    # compose the level maps so every output node averages its original members
    assign = np.arange(graph.num_nodes)
    n = graph.num_nodes
    while n != target:
        step = num_clusters(n, ratio)
        a = compute_clusters(pos, adj, ratio=ratio, seed=seed, k=step if step >= target else target)
        assign = a[assign]
        adj = pool_adjacency(adj, a)
        pos = pool_features(pos.T, a).T
        n = adj.shape[0]
    X = pool_features(graph.features.astype(np.float64), assign)
    mask = pool_features(graph.occlusion.astype(np.float64), assign)
    return STGraph(X.astype(np.float32), sp.csr_array(adj), mask >= 1.0, graph.fps,
                   f"{graph.region}:n{target}", positions=pos)
