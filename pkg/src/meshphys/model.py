"""MeshPhys backbone and head, the STMap ablation variant, and checkpoints.

Layer layout:

* MKTCB: ``x0 = pw(x)``; for each kernel size k a branch
  ``pw -> depthwise temporal conv k -> pw -> batch norm -> relu`` gives Y_p;
  gate logits ``alpha_p = a_p . GAP(Y_p) + c_p`` are softmaxed over branches;
  the gated branches are concatenated, fused by a pointwise conv and relu,
  and ``x0`` is added back.
* SGCB: ``x + relu(bn(A_hat @ pw(x)))`` with the symmetric-normalised
  adjacency of the current level.
* SGPB (at the configured layers): average node features within each cluster
  of the precomputed hierarchy.
* Head: mean over nodes, then a C -> 1 linear map at every time step.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .pooling import (PoolingHierarchy, build_hierarchy, normalized_adjacency, pool_adjacency,
                      pooling_matrix)

VARIANTS = ("graph", "stmap")


@dataclass(frozen=True)
class ArchitectureSpec:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    kernels: tuple[int, ...] = (3, 5, 9)
    pool_ratio: int = 4
    pool_layers: tuple[int, ...] = (2, 3, 4)   # 1-based layer indices
    smooth_layer: int = 4
    variant: str = "graph"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "pool_layers", tuple(int(p) for p in self.pool_layers))
        if not self.channels or min(self.channels) < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError("branch kernel sizes must be odd and positive")
        if any(not 1 <= p <= self.layers for p in self.pool_layers):
            raise ValueError("pooling layers must index existing layers")
        if len(set(self.pool_layers)) != len(self.pool_layers):
            raise ValueError("duplicate pooling layer")
        if not 1 <= self.smooth_layer <= self.layers:
            raise ValueError("smoothness tap layer out of range")
        if self.pool_ratio < 2:
            raise ValueError("pooling ratio must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def layers(self) -> int:
        return len(self.channels)

    @property
    def branches(self) -> int:
        return len(self.kernels)

    @property
    def max_kernel(self) -> int:
        return max(self.kernels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def reduced_spec(**overrides) -> ArchitectureSpec:
    """Desk-scale spec: channels (8, 16, 16), pooling after layers 2 and 3."""
    base = dict(channels=(8, 16, 16), pool_layers=(2, 3), smooth_layer=3)
    base.update(overrides)
    return ArchitectureSpec(**base)


def block_assignment(n: int, ratio: int) -> np.ndarray:
    """Contiguous blocks of ``ratio`` nodes; the remainder joins the last block."""
    k = max(1, n // ratio)
    return np.minimum(np.arange(n) // ratio, k - 1)


def make_hierarchy(spec: ArchitectureSpec, positions: np.ndarray, adjacency,
                   seed: int = 0) -> PoolingHierarchy:
    levels = len(spec.pool_layers)
    if spec.variant == "graph":
        return build_hierarchy(positions, adjacency, levels, spec.pool_ratio, seed)
    adj = sp.csr_array(adjacency, dtype=np.float64)
    pos = [np.asarray(positions, dtype=np.float64)]
    assignments, adjs = [], [adj]
    for _ in range(levels):
        a = block_assignment(adjs[-1].shape[0], spec.pool_ratio)
        assignments.append(a)
        adjs.append(pool_adjacency(adjs[-1], a))
        pm = pooling_matrix(a)
        pos.append(np.asarray(pm @ pos[-1]))
    return PoolingHierarchy(assignments, adjs, pos)


def preprocess(features: np.ndarray, occlusion: np.ndarray | None = None) -> np.ndarray:
    """Per-clip, per-channel standardisation of B x C x T x N features.

    Statistics use visible entries only; occluded entries are set to 0 (the
    standardised mean) so visibility changes do not inject steps.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if occlusion is None:
        vis = np.ones((x.shape[0], 1) + x.shape[2:], dtype=bool)
    else:
        occ = np.asarray(occlusion, dtype=bool)
        vis = ~(occ[None] if occ.ndim == 2 else occ)[:, None]
    vis_b = np.broadcast_to(vis, x.shape)
    count = np.maximum(vis_b.sum(axis=(2, 3), keepdims=True), 1)
    mean = np.where(vis_b, x, 0).sum(axis=(2, 3), keepdims=True) / count
    var = (np.where(vis_b, x - mean, 0) ** 2).sum(axis=(2, 3), keepdims=True) / count
    std = np.sqrt(var)
    out = np.where(vis_b, (x - mean) / np.where(std > 1e-8, std, 1.0), 0.0)
    return out


def _operator(matrix):
    m = sp.csr_array(matrix, dtype=np.float64)
    if m.shape[0] * m.shape[1] <= 65536 or m.nnz > 0.1 * m.shape[0] * m.shape[1]:
        return m.toarray()
    return m


class MeshPhys:
    """Parameters, buffers and forward pass of one network instance."""

    def __init__(self, spec: ArchitectureSpec, hierarchy: PoolingHierarchy, seed: int = 0,
                 dtype=np.float32):
        if hierarchy.num_levels != len(spec.pool_layers) + 1:
            raise ValueError(f"hierarchy has {hierarchy.num_levels} levels, architecture needs "
                             f"{len(spec.pool_layers) + 1}")
        self.spec = spec
        self.hierarchy = hierarchy
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: dict[str, ad.Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.last_gates: list[np.ndarray] = []
        self._propagation = [_operator(normalized_adjacency(a)) for a in hierarchy.adjacencies]
        self._pooling = [_operator(pooling_matrix(a)) for a in hierarchy.assignments]
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters
    def _add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = ad.Parameter(np.asarray(data, dtype=self.dtype), name)

    def _he(self, rng, shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def _add_bn(self, prefix, c):
        self._add(f"{prefix}.gamma", np.ones(c))
        self._add(f"{prefix}.beta", np.zeros(c))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(c, dtype=self.dtype)

    def _init_params(self, rng):
        spec = self.spec
        cin = spec.in_channels
        for li, c in enumerate(spec.channels, start=1):
            p = f"layer{li}"
            self._add(f"{p}.mktcb.proj.W", self._he(rng, (c, cin), cin))
            self._add(f"{p}.mktcb.proj.b", np.zeros(c))
            for bi, k in enumerate(spec.kernels):
                q = f"{p}.mktcb.branch{bi}"
                self._add(f"{q}.pw_in.W", self._he(rng, (c, c), c))
                self._add(f"{q}.pw_in.b", np.zeros(c))
                self._add(f"{q}.dw.K", self._he(rng, (c, k), k))
                self._add(f"{q}.pw_out.W", self._he(rng, (c, c), c))
                self._add(f"{q}.pw_out.b", np.zeros(c))
                self._add_bn(f"{q}.bn", c)
                self._add(f"{q}.gate.a", rng.normal(0.0, np.sqrt(1.0 / c), size=c))
                self._add(f"{q}.gate.c", np.zeros(1))
            nb = spec.branches
            self._add(f"{p}.mktcb.fuse.W", self._he(rng, (c, nb * c), nb * c))
            self._add(f"{p}.mktcb.fuse.b", np.zeros(c))
            if spec.variant == "graph":
                self._add(f"{p}.sgcb.W", self._he(rng, (c, c), c))
            else:
                self._add(f"{p}.sgcb.W", self._he(rng, (c, c, 3), 3 * c))
            self._add(f"{p}.sgcb.b", np.zeros(c))
            self._add_bn(f"{p}.sgcb.bn", c)
            cin = c
        self._add("head.W", rng.normal(0.0, np.sqrt(1.0 / cin), size=(1, cin)))
        self._add("head.b", np.zeros(1))

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def train(self, mode: bool = True) -> "MeshPhys":
        self.training = mode
        return self

    def eval(self) -> "MeshPhys":
        return self.train(False)

    # ---------------------------------------------------------------- blocks
    def _bn(self, x, prefix):
        P = self.params
        return ad.batch_norm(x, P[f"{prefix}.gamma"], P[f"{prefix}.beta"],
                             self.buffers[f"{prefix}.running_mean"],
                             self.buffers[f"{prefix}.running_var"], training=self.training,
                             momentum=self.spec.bn_momentum, eps=self.spec.bn_eps)

    def mktcb(self, x: ad.Tensor, layer: int, force_equal_gates: bool = False) -> ad.Tensor:
        P = self.params
        p = f"layer{layer}.mktcb"
        x0 = ad.pointwise_linear(x, P[f"{p}.proj.W"], P[f"{p}.proj.b"])
        ys, logits = [], []
        for bi in range(self.spec.branches):
            q = f"{p}.branch{bi}"
            h = ad.pointwise_linear(x0, P[f"{q}.pw_in.W"], P[f"{q}.pw_in.b"])
            h = ad.depthwise_temporal_conv(h, P[f"{q}.dw.K"])
            h = ad.pointwise_linear(h, P[f"{q}.pw_out.W"], P[f"{q}.pw_out.b"])
            y = ad.relu(self._bn(h, f"{q}.bn"))
            g = ad.global_avg_pool(y)                                       # B x C
            alpha = ad.tsum(g * ad.reshape(P[f"{q}.gate.a"], (1, -1)), axis=1) + P[f"{q}.gate.c"]
            ys.append(y)
            logits.append(alpha)
        b = x.shape[0]
        if force_equal_gates:
            w = ad.Tensor(np.full((b, len(ys)), 1.0 / len(ys), dtype=x.dtype))
        else:
            w = ad.softmax(ad.stack(logits, axis=1), axis=1)                # B x P
        self.last_gates.append(w.data)
        gated = [y * ad.reshape(w[:, i], (b, 1, 1, 1)) for i, y in enumerate(ys)]
        fused = ad.pointwise_linear(ad.concat(gated, axis=1), P[f"{p}.fuse.W"], P[f"{p}.fuse.b"])
        return ad.relu(fused) + x0

    def sgcb(self, x: ad.Tensor, layer: int, level: int) -> ad.Tensor:
        P = self.params
        p = f"layer{layer}.sgcb"
        if self.spec.variant == "graph":
            h = ad.pointwise_linear(x, P[f"{p}.W"], P[f"{p}.b"])
            h = ad.sparse_propagate(h, self._propagation[level])
        else:
            h = ad.node_conv1d(x, P[f"{p}.W"], P[f"{p}.b"])
        return x + ad.relu(self._bn(h, f"{p}.bn"))

    def sgpb(self, x: ad.Tensor, level: int) -> ad.Tensor:
        return ad.node_matmul(x, self._pooling[level])

    # --------------------------------------------------------------- forward
    def forward(self, x, force_equal_gates: bool = False):
        """Map B x C x T x N (already preprocessed) features to B x T waveforms.

        Returns ``(waveforms, tap)`` where ``tap = (features, adjacency)`` is the
        output of the smoothness layer (after its pooling step, if any) and the
        0/1 adjacency of the level it lives on.
        """
        x = ad.as_tensor(np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=self.dtype))
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        n0 = self.hierarchy.node_counts[0]
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} channels, got {x.shape[1]}")
        if x.shape[3] != n0:
            raise ValueError(f"graph has {x.shape[3]} nodes but the hierarchy root has {n0}")
        self.last_gates = []
        level = 0
        tap = None
        for layer in range(1, self.spec.layers + 1):
            x = self.mktcb(x, layer, force_equal_gates)
            x = self.sgcb(x, layer, level)
            if layer in self.spec.pool_layers:
                x = self.sgpb(x, level)
                level += 1
            if layer == self.spec.smooth_layer:
                tap = (x, self.hierarchy.adjacencies[level])
        b, c, t, _ = x.shape
        pooled = ad.reshape(ad.tmean(x, axis=3), (b, c, t, 1))
        out = ad.pointwise_linear(pooled, self.params["head.W"], self.params["head.b"])
        return ad.reshape(out, (b, t)), tap

    __call__ = forward

    def predict(self, features, occlusion=None) -> np.ndarray:
        """Eval-mode waveform(s) for raw STGraph features, no graph recorded."""
        mode = self.training
        self.eval()
        try:
            with ad.no_grad():
                y, _ = self.forward(preprocess(features, occlusion))
        finally:
            self.train(mode)
        return y.data.astype(np.float64)

    # ----------------------------------------------------------------- state
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer:{k}"], dtype=self.dtype)


def build_model(spec: ArchitectureSpec, positions, adjacency, seed: int = 0,
                dtype=np.float32) -> MeshPhys:
    return MeshPhys(spec, make_hierarchy(spec, positions, adjacency, seed), seed, dtype)


# ---------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model: MeshPhys
    metadata: dict = field(default_factory=dict)


def _hierarchy_to_json(h: PoolingHierarchy) -> dict:
    adjs = []
    for a in h.adjacencies:
        coo = sp.coo_array(a)
        order = np.lexsort((coo.col, coo.row))
        adjs.append({"n": int(a.shape[0]), "rows": coo.row[order].tolist(),
                     "cols": coo.col[order].tolist()})
    return {"assignments": [a.tolist() for a in h.assignments], "adjacencies": adjs,
            "positions": [p.tolist() for p in h.positions]}


def _hierarchy_from_json(d: dict) -> PoolingHierarchy:
    adjs = [sp.csr_array((np.ones(len(a["rows"])), (a["rows"], a["cols"])), shape=(a["n"], a["n"]))
            for a in d["adjacencies"]]
    return PoolingHierarchy([np.asarray(a, dtype=np.int64) for a in d["assignments"]], adjs,
                            [np.asarray(p, dtype=np.float64) for p in d["positions"]])


def save_checkpoint(path: str, model: MeshPhys, metadata: dict | None = None) -> None:
    state = model.state_dict()
    table, offset, blobs = [], 0, []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {"format": 1, "spec": model.spec.to_dict(), "hierarchy": _hierarchy_to_json(model.hierarchy),
              "tensors": table, "metadata": metadata or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"MPH1")
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str, dtype=np.float32) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != b"MPH1":
            raise ValueError(f"{path}: not a MeshPhys checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f4")
    spec = ArchitectureSpec.from_dict(header["spec"])
    model = MeshPhys(spec, _hierarchy_from_json(header["hierarchy"]), seed=0, dtype=dtype)
    state = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        state[entry["name"]] = blob[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
    model.load_state_dict(state)
    return Checkpoint(model, header["metadata"])
