"""Ingestion, training, checkpoint selection, evaluation and ablation runs."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
import yaml

from . import autodiff as ad
from . import fileio
from .dsp import aggregate_clips, estimate_pulse_rate, pulse_rate_metrics
from .fileio import DataError
from .mesh import MeshSequence
from .model import (ArchitectureSpec, MeshPhys, load_checkpoint, make_hierarchy, preprocess,
                    save_checkpoint)
from .objective import ObjectiveConfig, composite_loss
from .stgraph import (EdgeScheme, RegionScheme, STGraph, build_stgraph, coarsen_input_nodes,
                      with_adjacency)

log = logging.getLogger("meshphys")


class NumericError(RuntimeError):
    """Non-finite loss or gradients during training."""


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class DataConfig:
    region: str = "mesh3d"
    grid: int = 29
    feature: str = "face_average"
    patch: tuple[int, int] = (7, 7)
    edges: str | None = None          # None: scheme default (shared_vertex / grid8)
    edge_seed: int = 0
    input_nodes: int | None = None    # coarsen the input graph to this many nodes
    pool_seed: int = 0
    cache_dir: str | None = None

    def region_scheme(self) -> RegionScheme:
        return RegionScheme(self.region, self.grid, self.feature, tuple(self.patch))

    def edge_scheme(self) -> EdgeScheme | None:
        return None if self.edges is None else EdgeScheme(self.edges, self.edge_seed)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    clip_length: int = 256
    clip_stride: int | None = None    # defaults to clip_length
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    data: DataConfig = field(default_factory=DataConfig)
    augmentations: tuple[str, ...] = ()

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.clip_length < self.architecture.max_kernel:
            raise ValueError("clip length shorter than the largest temporal kernel")
        if self.augmentations:
            raise ValueError(f"unknown augmentations {self.augmentations}")
        if not 1 <= self.objective.smooth_layer <= self.architecture.layers:
            raise ValueError("objective smooth_layer exceeds the number of layers")
        if self.architecture.smooth_layer != self.objective.smooth_layer:
            object.__setattr__(self, "architecture",
                               replace(self.architecture, smooth_layer=self.objective.smooth_layer))

    @property
    def stride(self) -> int:
        return self.clip_length if self.clip_stride is None else self.clip_stride

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return _lists(d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        top = {k: v for k, v in d.items() if k not in ("optimizer", "training", "objective",
                                                       "architecture", "data")}
        top.update(d.get("optimizer", {}))
        top.update(d.get("training", {}))
        obj = dict(d.get("objective", {}))
        if "band" in obj:
            obj["band"] = tuple(obj["band"])
        data = dict(d.get("data", {}))
        if "patch" in data:
            data["patch"] = tuple(data["patch"])
        if "augmentations" in top:
            top["augmentations"] = tuple(top["augmentations"] or ())
        return cls(objective=ObjectiveConfig(**obj),
                   architecture=ArchitectureSpec(**d.get("architecture", {})),
                   data=DataConfig(**data), **top)

    def to_yaml_dict(self) -> dict:
        d = self.to_dict()
        return {
            "seed": d["seed"],
            "optimizer": {k: d[k] for k in ("lr", "beta1", "beta2", "weight_decay", "eps")},
            "training": {k: d[k] for k in ("batch_size", "epochs", "clip_length", "clip_stride",
                                           "augmentations")},
            "objective": d["objective"],
            "architecture": d["architecture"],
            "data": d["data"],
        }


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def load_config(path: str) -> TrainConfig:
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    try:
        return TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_config(path: str, config: TrainConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_yaml_dict(), fh, sort_keys=False)


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a config with dotted-key overrides applied, e.g. ``{"data.edges": "self_only"}``."""
    d = config.to_yaml_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) == 1:
            for group in ("optimizer", "training"):
                if key in d[group]:
                    parts = [group, key]
        node = d
        for p in parts[:-1]:
            if p not in node:
                raise KeyError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key}")
        node[parts[-1]] = value
    return TrainConfig.from_dict(d)


# ----------------------------------------------------------------- manifest

@dataclass
class VideoEntry:
    id: str
    frames: str
    landmarks: str
    topology: str
    reference: str
    split: str = "train"

    def check(self) -> None:
        for name in ("landmarks", "topology", "reference"):
            if not os.path.exists(getattr(self, name)):
                raise DataError(f"video {self.id}: {name} file not found: {getattr(self, name)}")
        if not os.path.isdir(self.frames):
            raise DataError(f"video {self.id}: frames directory not found: {self.frames}")


@dataclass
class DatasetManifest:
    videos: list[VideoEntry]
    root: str = "."

    def split(self, name: str | None) -> list[VideoEntry]:
        return [v for v in self.videos if name is None or v.split == name]

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        if not os.path.exists(path):
            raise DataError(f"manifest not found: {path}")
        with open(path) as fh:
            raw = json.load(fh)
        root = os.path.dirname(os.path.abspath(path))
        videos = []
        for v in raw.get("videos", []):
            paths = {k: v[k] if os.path.isabs(v[k]) else os.path.join(root, v[k])
                     for k in ("frames", "landmarks", "topology", "reference")}
            videos.append(VideoEntry(id=v["id"], split=v.get("split", "train"), **paths))
        if len({v.id for v in videos}) != len(videos):
            raise DataError("duplicate video ids in manifest")
        return cls(videos, root)

    def save(self, path: str) -> None:
        root = os.path.dirname(os.path.abspath(path))
        out = []
        for v in self.videos:
            d = dataclasses.asdict(v)
            for k in ("frames", "landmarks", "topology", "reference"):
                d[k] = os.path.relpath(d[k], root)
            out.append(d)
        with open(path, "w") as fh:
            json.dump({"videos": out}, fh, indent=2)


# ---------------------------------------------------------------- ingestion

@dataclass
class Clip:
    video_id: str
    offset: int
    graph: STGraph
    reference: np.ndarray

    def __iter__(self):
        return iter((self.graph, self.reference))


def valid_spans(valid: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive True entries."""
    v = np.r_[False, np.asarray(valid, dtype=bool), False]
    d = np.diff(v.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def clip_windows(valid: np.ndarray, length: int, stride: int) -> list[int]:
    """Start frames of every length-``length`` window lying inside one contiguous valid span."""
    starts = []
    for a, b in valid_spans(valid):
        s = a
        while s + length <= b:
            starts.append(s)
            s += stride
    return starts


def _cache_name(video_id: str, region: RegionScheme) -> str:
    tag = region.tag.replace(":", "_")
    return f"{video_id}.{tag}.stg"


def build_video_graph(entry: VideoEntry, region: RegionScheme,
                      cache_dir: str | None = None) -> tuple[STGraph, np.ndarray]:
    """Full-length STGraph of one video plus the per-frame landmark-validity mask.

    Frames without landmarks are all-occluded with zero features.  With
    ``cache_dir`` the graph is read from / written to an STG1 file.
    """
    entry.check()
    topology = fileio.read_topology(entry.topology)
    landmarks, fps = fileio.read_landmarks(entry.landmarks)
    if landmarks.shape[1] != topology.num_vertices:
        raise DataError(f"video {entry.id}: landmarks have {landmarks.shape[1]} vertices, "
                        f"topology has {topology.num_vertices}")
    frame_paths = fileio.list_frames(entry.frames)
    if len(frame_paths) != len(landmarks):
        raise DataError(f"video {entry.id}: {len(frame_paths)} frames but {len(landmarks)} "
                        "landmark frames")
    valid = np.all(np.isfinite(landmarks[..., :2]), axis=(1, 2))
    positions = None

    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, _cache_name(entry.id, region))
        if os.path.exists(cache_path):
            g = fileio.read_stgraph(cache_path)
            return _attach_positions(g, topology, region), valid

    t_total = len(landmarks)
    n = region.grid ** 2 if region.is_grid else topology.num_faces
    X = np.zeros((3, t_total, n), dtype=np.float32)
    occ = np.ones((t_total, n), dtype=bool)
    adjacency = None
    for a, b in valid_spans(valid):
        mesh = MeshSequence(landmarks[a:b].astype(np.float64), topology, fps, start_frame=a)
        g = build_stgraph(lambda t, a=a: fileio.read_frame(frame_paths[a + t]), mesh, region)
        X[:, a:b] = g.features
        occ[a:b] = g.occlusion
        adjacency = g.adjacency
        positions = g.positions
    if adjacency is None:
        raise DataError(f"video {entry.id}: no frame has landmarks")
    graph = STGraph(X, adjacency, occ, fps, region.tag, positions=positions)
    if cache_path is not None:
        fileio.write_stgraph(cache_path, graph)
    return graph, valid


def _attach_positions(graph: STGraph, topology, region: RegionScheme) -> STGraph:
    from .stgraph import grid_positions

    pos = grid_positions(region.grid) if region.is_grid else topology.face_centroids()
    return replace(graph, positions=pos)


def _adapt_graph(graph: STGraph, entry: VideoEntry, data: DataConfig) -> STGraph:
    edges = data.edge_scheme()
    if edges is not None:
        topo = None if data.region_scheme().is_grid else fileio.read_topology(entry.topology)
        graph = with_adjacency(graph, topo, edges)
    if data.input_nodes is not None and data.input_nodes != graph.num_nodes:
        graph = coarsen_input_nodes(graph, data.input_nodes, seed=data.pool_seed)
    return graph


def read_reference_at(entry: VideoEntry, fps: float, n_frames: int) -> np.ndarray:
    """Reference waveform linearly resampled to the video frame times."""
    ts, vals = fileio.read_reference(entry.reference)
    frame_t = np.arange(n_frames) / fps
    tol = 1.0 / fps
    if ts[0] > frame_t[0] + tol or ts[-1] < frame_t[-1] - tol:
        raise DataError(f"video {entry.id}: reference covers {ts[0]:.3f}-{ts[-1]:.3f} s but "
                        f"the video spans 0-{frame_t[-1]:.3f} s")
    return np.interp(frame_t, ts, vals)


def ingest(manifest: DatasetManifest, config: TrainConfig, split: str | None = None
           ) -> Iterator[Clip]:
    """Yield length-T clips (STGraph slice + reference slice) for the videos of a split."""
    region = config.data.region_scheme()
    for entry in manifest.split(split):
        graph, valid = build_video_graph(entry, region, config.data.cache_dir)
        graph = _adapt_graph(graph, entry, config.data)
        ref = read_reference_at(entry, graph.fps, graph.num_frames)
        starts = clip_windows(valid, config.clip_length, config.stride)
        dropped = len(valid) // config.clip_length - len(starts)
        if dropped > 0:
            log.info("video=%s dropped_windows=%d reason=landmark_gap", entry.id, dropped)
        for s in starts:
            yield Clip(entry.id, s, graph.slice_frames(s, s + config.clip_length),
                       ref[s:s + config.clip_length])


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 1e-4,
               eps: float = 1e-8) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


# ----------------------------------------------------------------- training

@dataclass
class PreparedClips:
    ids: list[str]
    offsets: np.ndarray
    features: np.ndarray        # B x C x T x N, preprocessed
    references: np.ndarray      # B x T
    pulse_rates: np.ndarray     # B, Hz, estimated from the references
    fps: float
    positions: np.ndarray | None
    adjacency: object

    def __len__(self):
        return len(self.ids)

    def batch(self, idx):
        return self.features[idx], self.references[idx], self.pulse_rates[idx]


def prepare_clips(clips: list[Clip], band=(0.5, 3.0)) -> PreparedClips | None:
    if not clips:
        return None
    fps = clips[0].graph.fps
    feats = np.stack([c.graph.features for c in clips])
    occ = np.stack([c.graph.occlusion for c in clips])
    refs = np.stack([c.reference for c in clips])
    rates = np.array([estimate_pulse_rate(r, fps, band) for r in refs])
    return PreparedClips([c.video_id for c in clips], np.array([c.offset for c in clips]),
                         preprocess(feats, occ).astype(np.float32), refs, rates, fps,
                         clips[0].graph.positions, clips[0].graph.adjacency)


def _batch_loss(model: MeshPhys, data: PreparedClips, idx, objective: ObjectiveConfig):
    x, y, f = data.batch(idx)
    yhat, tap = model(x)
    return composite_loss(yhat, y, tap, objective, fs=data.fps, f_pr=f)


def validation_loss(model: MeshPhys, data: PreparedClips, objective: ObjectiveConfig,
                    batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            loss, _, _ = _batch_loss(model, data, idx, objective)
            total += float(loss.data) * len(idx)
            count += len(idx)
    model.train()
    return total / max(count, 1)


@dataclass
class TrainResult:
    checkpoint: str
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str,
          train_clips: PreparedClips | None = None, val_clips: PreparedClips | None = None
          ) -> TrainResult:
    """Train with AdamW, keep the checkpoint with the lowest validation loss.

    Prepared clip sets may be passed in to skip ingestion (used by ablation
    sweeps that share data).
    """
    os.makedirs(out_dir, exist_ok=True)
    band = config.objective.band
    if train_clips is None:
        train_clips = prepare_clips(list(ingest(manifest, config, "train")), band)
    if val_clips is None:
        val_clips = prepare_clips(list(ingest(manifest, config, "val")), band)
    if train_clips is None:
        raise DataError("no training clips")
    if train_clips.positions is None:
        raise DataError("training graph carries no node positions")

    hierarchy = make_hierarchy(config.architecture, train_clips.positions, train_clips.adjacency,
                               seed=config.data.pool_seed)
    model = MeshPhys(config.architecture, hierarchy, seed=config.seed, dtype=np.float32)
    rng = np.random.default_rng(config.seed)
    state = AdamWState()
    ckpt_path = os.path.join(out_dir, "best.mph")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    history: list[dict] = []
    best = (np.inf, -1)
    meta = {"config": config.to_dict(), "train_clips": len(train_clips)}

    with open(log_path, "w") as log_fh:
        def emit(rec):
            history.append(rec)
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in rec.items()))

        step = 0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_clips))
            model.train()
            for s in range(0, len(order), config.batch_size):
                idx = np.sort(order[s:s + config.batch_size])
                loss, terms, _ = _batch_loss(model, train_clips, idx, config.objective)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {terms}")
                for p in model.parameters():
                    p.grad = None
                loss.backward()
                grads = {n: p.grad for n, p in model.params.items()}
                if any(g is not None and not np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericError(f"non-finite gradient at epoch {epoch} step {step}: {terms}")
                adamw_step({n: p.data for n, p in model.params.items()}, grads, state,
                           config.lr, config.beta1, config.beta2, config.weight_decay, config.eps)
                step += 1
                emit({"event": "step", "epoch": epoch, "step": step,
                      **{k: float(v) for k, v in terms.items()}})
            val = (validation_loss(model, val_clips, config.objective, config.batch_size)
                   if val_clips is not None else
                   validation_loss(model, train_clips, config.objective, config.batch_size))
            improved = val < best[0]
            if improved:
                best = (val, epoch)
                save_checkpoint(ckpt_path, model, {**meta, "epoch": epoch, "val_loss": val})
            emit({"event": "epoch", "epoch": epoch, "val_loss": float(val), "best": improved})
    return TrainResult(ckpt_path, history, best[1], float(best[0]))


# --------------------------------------------------------------- evaluation

def evaluate_model(model: MeshPhys, clips: PreparedClips, band=(0.5, 3.0), order: int = 3,
                   batch_size: int = 16) -> dict:
    """Clip- and video-level pulse-rate metrics for prepared clips."""
    model.eval()
    preds = []
    with ad.no_grad():
        for s in range(0, len(clips), batch_size):
            y, _ = model(clips.features[s:s + batch_size])
            preds.append(y.data.astype(np.float64))
    preds = np.concatenate(preds)
    fs = clips.fps
    clip_rows = []
    for i, vid in enumerate(clips.ids):
        f_hat = estimate_pulse_rate(preds[i], fs, band, order)
        clip_rows.append({"id": vid, "offset": int(clips.offsets[i]),
                          "true_bpm": 60.0 * float(clips.pulse_rates[i]), "est_bpm": 60.0 * f_hat})
    video_rows = []
    for vid in dict.fromkeys(clips.ids):
        sel = [i for i, v in enumerate(clips.ids) if v == vid]
        offs = clips.offsets[sel]
        pred = aggregate_clips(preds[sel], offs)
        ref = aggregate_clips(clips.references[sel], offs)
        covered = np.isfinite(pred)
        f_true = estimate_pulse_rate(ref[covered], fs, band, order)
        f_hat = estimate_pulse_rate(pred[covered], fs, band, order)
        video_rows.append({"id": vid, "true_bpm": 60.0 * f_true, "est_bpm": 60.0 * f_hat,
                           "clips": len(sel)})

    def summary(rows):
        t = np.array([r["true_bpm"] for r in rows])
        e = np.array([r["est_bpm"] for r in rows])
        e = np.where(np.isfinite(e), e, 0.0)
        return pulse_rate_metrics(t, e)

    for r in clip_rows + video_rows:
        r["error"] = r["est_bpm"] - r["true_bpm"]
    return {"clips": clip_rows, "videos": video_rows,
            "clip_metrics": summary(clip_rows), "video_metrics": summary(video_rows)}


def evaluate(checkpoint: str, manifest: DatasetManifest, config: TrainConfig | None = None,
             split: str = "test", clips: PreparedClips | None = None) -> dict:
    """Metrics report for one checkpoint on a manifest split."""
    ck = load_checkpoint(checkpoint)
    if config is None:
        config = TrainConfig.from_dict(ck.metadata["config"]) if "config" in ck.metadata else TrainConfig()
    if clips is None:
        clips = prepare_clips(list(ingest(manifest, config, split)), config.objective.band)
    if clips is None:
        raise DataError(f"no clips in split {split!r}")
    report = evaluate_model(ck.model, clips, config.objective.band)
    report["checkpoint"] = checkpoint
    return report


def format_report(report: dict) -> str:
    lines = []
    for r in report["videos"]:
        lines.append(f"video id={r['id']} f_PR={r['true_bpm']:.2f} f_hat={r['est_bpm']:.2f} "
                     f"error={r['error']:+.2f}")
    for level in ("clip", "video"):
        m = report[f"{level}_metrics"]
        lines.append(f"summary level={level} n={m['n']} MAE={m['MAE']:.3f} RMSE={m['RMSE']:.3f} "
                     f"r={m['r']:.3f}")
    return "\n".join(lines)


# ------------------------------------------------------------------ ablation

def load_matrix(path: str) -> list[dict]:
    """Variant list from YAML: ``[{name: ..., overrides: {dotted.key: value}}, ...]``."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    variants = raw.get("variants", raw) if isinstance(raw, dict) else raw
    if not isinstance(variants, list) or not variants:
        raise ValueError(f"{path}: expected a non-empty list of variants")
    for v in variants:
        if "name" not in v:
            raise ValueError("every variant needs a name")
        v.setdefault("overrides", {})
    return variants


def ablate(matrix: list[dict], manifest: DatasetManifest, base: TrainConfig, out_dir: str,
           seeds: tuple[int, ...] | None = None) -> list[dict]:
    """Train and evaluate every variant (and seed); returns one table row per run."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    seeds = (base.seed,) if seeds is None else tuple(seeds)
    for variant in matrix:
        for seed in seeds:
            cfg = apply_overrides(base, {**variant["overrides"], "seed": seed})
            run_dir = os.path.join(out_dir, f"{variant['name']}_seed{seed}")
            result = train(cfg, manifest, run_dir)
            report = evaluate(result.checkpoint, manifest, cfg)
            with open(os.path.join(run_dir, "report.json"), "w") as fh:
                json.dump(report, fh, indent=2)
            row = {"variant": variant["name"], "seed": seed,
                   "region": cfg.data.region_scheme().tag,
                   "edges": cfg.data.edges or "default",
                   "nodes": cfg.data.input_nodes,
                   "clip_MAE": report["clip_metrics"]["MAE"],
                   "clip_RMSE": report["clip_metrics"]["RMSE"],
                   "video_MAE": report["video_metrics"]["MAE"],
                   "video_RMSE": report["video_metrics"]["RMSE"],
                   "video_r": report["video_metrics"]["r"],
                   "best_epoch": result.best_epoch}
            rows.append(row)
            log.info("ablation %s", json.dumps(row, sort_keys=True))
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
    return rows
