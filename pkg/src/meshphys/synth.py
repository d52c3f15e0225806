"""Synthetic facial-surface pulse simulator.

A convex hemispherical cap stands in for the face: geometry does not matter
to the algorithms, and on a convex surface back-facing is exactly the same as
hidden, so occlusion checks have an analytic answer.  Each face gets a base
skin colour and a pulse modulation ``amp(face) * BVP(t)``; frames are filled
with the same rasterizer used for STGraph construction.
"""
from __future__ import annotations

import functools
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .mesh import CanonicalTopology, MeshSequence, face_normals
from .raster import FaceCoverage

CAP_ANGLE = np.deg2rad(75.0)


# ------------------------------------------------------------------ topology

def _disc_points(n_inner: int, n_boundary: int) -> np.ndarray:
    i = np.arange(n_inner) + 0.5
    r = np.sqrt(i / n_inner) * (1.0 - 0.5 / np.sqrt(max(n_inner, 1)))
    a = i * np.pi * (3.0 - np.sqrt(5.0))
    b = np.arange(n_boundary) * 2.0 * np.pi / n_boundary
    return np.r_[np.c_[r * np.cos(a), r * np.sin(a)], np.c_[np.cos(b), np.sin(b)]]


def _triangulate_disc(target_faces: int):
    # a triangulated disc with n vertices, b of them on the boundary, has 2n - b - 2 faces
    nb = max(3, int(round(1.1 * np.sqrt(target_faces))))
    if (nb - target_faces) % 2:
        nb += 1
    n = (target_faces + 2 + nb) // 2
    pts = _disc_points(n - nb, nb)
    faces = Delaunay(pts).simplices.astype(np.int64)
    return pts, faces


def make_synthetic_topology(target_faces: int = 852) -> CanonicalTopology:
    """Triangulated hemispherical cap with outward winding and ~``target_faces`` faces.

    The disc is a sunflower point set with a ring of boundary points, lifted
    onto a 75 degree spherical cap whose apex points at the camera (-z).
    """
    if target_faces < 4:
        raise ValueError("need at least 4 faces")
    pts, faces = _triangulate_disc(target_faces)
    rho = np.linalg.norm(pts, axis=1)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    theta = CAP_ANGLE * np.clip(rho, 0.0, 1.0)
    verts = np.c_[np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)]
    # orient every face so that its normal points away from the sphere centre
    normals, _ = face_normals(verts, faces)
    outward = np.einsum("fk,fk->f", normals, verts[faces].mean(axis=1)) > 0
    faces = np.where(outward[:, None], faces, faces[:, [0, 2, 1]])
    return CanonicalTopology(faces, verts)


# -------------------------------------------------------------------- motion

def rotation_matrix(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rz(roll) @ Ry(yaw) @ Rx(pitch); angles in radians, yaw about the vertical image axis."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp_ = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp_], [0, sp_, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class MotionScript:
    """Sinusoidal rigid motion; angles in degrees, translation in pixels, periods in seconds."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    yaw_offset: float = 0.0
    period: float = 10.0
    translation: tuple[float, float] = (0.0, 0.0)
    translation_period: float = 7.0

    def pose(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        s = np.sin(2 * np.pi * t / self.period)
        c = np.sin(2 * np.pi * t / self.period + np.pi / 3)
        rot = rotation_matrix(np.deg2rad(self.yaw_offset + self.yaw * s),
                              np.deg2rad(self.pitch * c), np.deg2rad(self.roll * s))
        st = np.sin(2 * np.pi * t / self.translation_period)
        shift = np.array([self.translation[0] * st, self.translation[1] * st, 0.0])
        return rot, shift


def animate(topology: CanonicalTopology, motion: MotionScript, t: float, scale: float = 1.0,
            center: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Vertex positions (V x 3, pixel units) at time ``t`` seconds."""
    rot, shift = motion.pose(t)
    v = topology.canonical_vertices @ rot.T
    out = v * scale + shift
    out[:, 0] += center[0]
    out[:, 1] += center[1]
    return out


# ----------------------------------------------------------------- scenario

@dataclass(frozen=True)
class SynthScenario:
    target_faces: int = 200
    fps: float = 30.0
    duration: float = 10.0
    f0: float = 1.2
    f0_end: float | None = None          # linear chirp to this frequency when set
    harmonic_ratio: float = 0.3
    amplitude: float = 0.02               # pulse amplitude relative to base intensity
    amplitude_map: str = "smooth"         # uniform | smooth | patchy
    channel_weights: tuple[float, float, float] = (0.3, 1.0, 0.5)
    base_color: tuple[float, float, float] = (0.78, 0.57, 0.47)
    color_jitter: float = 0.05
    motion: MotionScript = field(default_factory=MotionScript)
    noise_sigma: float = 0.0
    illumination_drift: float = 0.0
    drift_period: float = 17.0
    image_size: tuple[int, int] = (128, 128)  # width, height
    scale: float = 40.0
    background: tuple[float, float, float] = (0.1, 0.1, 0.12)
    landmark_gaps: tuple[tuple[int, int], ...] = ()
    seed: int = 0

    def __post_init__(self):
        for f in (self.f0, self.f0 if self.f0_end is None else self.f0_end):
            if not 0.5 <= f <= 3.0:
                raise ValueError(f"pulse frequency {f} Hz outside [0.5, 3.0]")
        if self.fps < 12.0:
            raise ValueError("fps must be at least 12 to sample the pulse band")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.amplitude_map not in ("uniform", "smooth", "patchy"):
            raise ValueError(f"unknown amplitude map {self.amplitude_map!r}")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.fps))

    @property
    def mean_pulse_rate(self) -> float:
        """Average pulse frequency in Hz."""
        return self.f0 if self.f0_end is None else 0.5 * (self.f0 + self.f0_end)

    def bvp(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        k = 0.0 if self.f0_end is None else (self.f0_end - self.f0) / self.duration
        phase = 2 * np.pi * (self.f0 * t + 0.5 * k * t * t)
        return np.sin(phase) + self.harmonic_ratio * np.sin(2 * phase)


class SynthRenderer:
    """Caches the topology and per-face colour maps of one scenario."""

    def __init__(self, scenario: SynthScenario):
        self.scenario = sc = scenario
        self.topology = make_synthetic_topology(sc.target_faces)
        rng = np.random.default_rng(sc.seed)
        f = self.topology.num_faces
        jitter = 1.0 + sc.color_jitter * rng.uniform(-1, 1, size=(f, 1))
        self.base = np.clip(np.asarray(sc.base_color)[None, :] * jitter, 0.0, 1.0)
        cz = -self.topology.face_centroids()[:, 2]
        if sc.amplitude_map == "uniform":
            amp = np.ones(f)
        elif sc.amplitude_map == "smooth":
            amp = 0.5 + 0.5 * np.clip(cz, 0.0, 1.0)
        else:
            amp = np.where(rng.uniform(size=f) < 0.25, 0.0, 1.0)
        self.amp = sc.amplitude * amp
        self.center = (sc.image_size[0] / 2.0, sc.image_size[1] / 2.0)

    def vertices(self, frame: int) -> np.ndarray:
        sc = self.scenario
        return animate(self.topology, sc.motion, frame / sc.fps, sc.scale, self.center)

    def face_colors(self, frame: int) -> np.ndarray:
        """Noise-free colour of every face at a frame index (F x 3)."""
        sc = self.scenario
        t = frame / sc.fps
        pulse = self.amp[:, None] * np.asarray(sc.channel_weights)[None, :] * sc.bvp(t)
        light = 1.0 + sc.illumination_drift * np.sin(2 * np.pi * t / sc.drift_period + 0.3)
        return np.clip(self.base * (1.0 + pulse) * light, 0.0, 1.0)

    def visible(self, verts: np.ndarray) -> np.ndarray:
        normals, degenerate = face_normals(verts, self.topology.faces)
        return ~degenerate & (normals[:, 2] < 0)

    def frame(self, frame: int) -> tuple[np.ndarray, float]:
        sc = self.scenario
        w, h = sc.image_size
        verts = self.vertices(frame)
        img = np.empty((h, w, 3), dtype=np.float64)
        img[:] = sc.background
        cov = FaceCoverage(verts[self.topology.faces][:, :, :2], w, h, active=self.visible(verts))
        cov.paint(img, self.face_colors(frame))
        if sc.noise_sigma > 0:
            rng = np.random.default_rng([sc.seed, frame, 7])
            img += rng.normal(0.0, sc.noise_sigma, size=img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        return img, float(sc.bvp(frame / sc.fps))

    def mesh_sequence(self, start: int = 0, stop: int | None = None) -> MeshSequence:
        stop = self.scenario.num_frames if stop is None else stop
        verts = np.stack([self.vertices(i) for i in range(start, stop)])
        return MeshSequence(verts, self.topology, self.scenario.fps, start_frame=start)


@functools.lru_cache(maxsize=8)
def _renderer(scenario: SynthScenario) -> SynthRenderer:
    return SynthRenderer(scenario)


def render(scenario: SynthScenario, frame: int) -> tuple[np.ndarray, float]:
    """Float RGB frame (H x W x 3 in [0, 1]) and the reference BVP sample at a frame index."""
    return _renderer(scenario).frame(frame)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def scenario_to_dict(scenario: SynthScenario) -> dict:
    return asdict(scenario)


def scenario_from_dict(d: dict) -> SynthScenario:
    d = dict(d)
    if "motion" in d and isinstance(d["motion"], dict):
        m = dict(d["motion"])
        if "translation" in m:
            m["translation"] = tuple(m["translation"])
        d["motion"] = MotionScript(**m)
    for key in ("channel_weights", "base_color", "image_size", "background"):
        if key in d:
            d[key] = tuple(d[key])
    if "landmark_gaps" in d:
        d["landmark_gaps"] = tuple(tuple(g) for g in d["landmark_gaps"])
    return SynthScenario(**d)


def emit_dataset(scenario: SynthScenario, out_dir: str, name: str | None = None) -> dict:
    """Write frames, landmarks, topology, reference waveform and metadata for one video.

    Returns a manifest entry (paths relative to ``out_dir``'s parent are not
    assumed; all paths are absolute).
    """
    from . import fileio

    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    r = SynthRenderer(scenario)
    n = scenario.num_frames
    ref = np.empty(n)
    for i in range(n):
        img, ref[i] = r.frame(i)
        fileio.write_frame(os.path.join(frames_dir, f"{i:06d}.png"), to_uint8(img))
    verts = np.stack([r.vertices(i) for i in range(n)]).astype(np.float32)
    for a, b in scenario.landmark_gaps:
        verts[a:b] = np.nan
    paths = {
        "frames": frames_dir,
        "landmarks": os.path.join(out_dir, "landmarks.lmk"),
        "topology": os.path.join(out_dir, "topology.top"),
        "reference": os.path.join(out_dir, "reference.csv"),
    }
    fileio.write_landmarks(paths["landmarks"], verts, scenario.fps)
    fileio.write_topology(paths["topology"], r.topology)
    fileio.write_reference(paths["reference"], np.arange(n) / scenario.fps, ref)
    meta = {
        "id": name or os.path.basename(os.path.normpath(out_dir)),
        "pulse_rate_hz": scenario.mean_pulse_rate,
        "pulse_rate_bpm": 60.0 * scenario.mean_pulse_rate,
        "fps": scenario.fps,
        "num_frames": n,
        "scenario": scenario_to_dict(scenario),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return {"id": meta["id"], **paths, "pulse_rate_bpm": meta["pulse_rate_bpm"]}


def suite_scenarios(base: SynthScenario, counts: dict[str, int], seed: int = 0,
                    f0_range: tuple[float, float] = (0.8, 2.2)) -> list[tuple[str, str, SynthScenario]]:
    """Per-video scenarios for a train/val/test suite with varied pulse rates and seeds.

    Returns ``(video_id, split, scenario)`` triples; everything is derived
    from ``seed`` so suites are reproducible.
    """
    rng = np.random.default_rng(seed)
    out = []
    for split in ("train", "val", "test"):
        for i in range(counts.get(split, 0)):
            f0 = float(np.round(rng.uniform(*f0_range), 4))
            motion = base.motion
            if motion.yaw or motion.pitch or motion.roll:
                motion = MotionScript(motion.yaw, motion.pitch, motion.roll, motion.yaw_offset,
                                      motion.period * float(rng.uniform(0.8, 1.25)),
                                      motion.translation, motion.translation_period)
            sc = SynthScenario(**{**asdict(base), "motion": motion, "f0": f0, "f0_end": None,
                                  "seed": int(rng.integers(0, 2 ** 31 - 1))})
            out.append((f"{split}{i:02d}", split, sc))
    return out


def emit_suite(base: SynthScenario, out_dir: str, counts: dict[str, int], seed: int = 0,
               f0_range: tuple[float, float] = (0.8, 2.2)) -> str:
    """Emit a multi-video dataset plus ``manifest.json``; returns the manifest path."""
    videos = []
    for vid, split, sc in suite_scenarios(base, counts, seed, f0_range):
        entry = emit_dataset(sc, os.path.join(out_dir, vid), vid)
        entry["split"] = split
        entry.pop("pulse_rate_bpm")
        for k in ("frames", "landmarks", "topology", "reference"):
            entry[k] = os.path.relpath(entry[k], out_dir)
        videos.append(entry)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"videos": videos}, fh, indent=2)
    return path
