"""Pulse-rate evaluation: band-pass filtering, Welch PSD, peak picking and metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

BAND = (0.5, 3.0)


@dataclass
class WaveformRecord:
    samples: np.ndarray
    fs: float
    pulse_rate: float | None = None   # Hz
    source: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if self.samples.ndim != 1 or len(self.samples) < 2:
            raise ValueError("waveform needs at least two samples")


def _check_band(fs: float, band) -> tuple[float, float]:
    lo, hi = float(band[0]), float(band[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid band {band}")
    if hi >= fs / 2:
        raise ValueError(f"band edge {hi} Hz is not below Nyquist ({fs / 2} Hz)")
    return lo, hi


def butterworth_bandpass(x, fs: float, order: int = 3, band=BAND) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward, second-order sections)."""
    lo, hi = _check_band(fs, band)
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        return np.zeros_like(x)
    return signal.sosfiltfilt(sos, x, axis=-1)


def welch_segment(n: int, max_segment: int = 256) -> int:
    return min(n, max_segment)


def welch_psd(x, fs: float, max_segment: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Welch PSD along the last axis.

    Periodic Hann window, segment ``min(T, 256)``, 50% overlap, mean removed
    per segment, density scaling, periodograms averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("need at least two samples")
    seg = welch_segment(n, max_segment)
    step = seg // 2 if seg > 1 else 1
    starts = np.arange(0, n - seg + 1, step)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(seg) / seg)
    scale = 1.0 / (fs * np.sum(win * win))
    idx = starts[:, None] + np.arange(seg)[None, :]
    segs = x[..., idx]                                   # (..., S, seg)
    segs = segs - segs.mean(axis=-1, keepdims=True)
    spec = np.abs(np.fft.rfft(segs * win, axis=-1)) ** 2 * scale
    if seg % 2 == 0:
        spec[..., 1:-1] *= 2
    else:
        spec[..., 1:] *= 2
    return np.fft.rfftfreq(seg, 1.0 / fs), spec.mean(axis=-2)


def dominant_frequency(x, fs: float, band=BAND) -> float:
    """Peak of the Welch PSD inside ``band`` with parabolic refinement on log power (Hz).

    Returns NaN when the band holds no power.
    """
    freqs, power = welch_psd(x, fs)
    lo, hi = float(band[0]), float(band[1])
    inband = np.flatnonzero((freqs >= lo) & (freqs <= hi))
    if len(inband) == 0:
        raise ValueError("no Welch bin falls inside the band; clip too short")
    k = inband[np.argmax(power[inband])]
    if power[k] <= 0:
        return float("nan")
    df = freqs[1] - freqs[0]
    if 0 < k < len(power) - 1:
        floor = power[k] * 1e-12
        a, b, c = np.log(np.maximum(power[k - 1:k + 2], floor))
        denom = a - 2 * b + c
        delta = 0.5 * (a - c) / denom if denom < 0 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
    else:
        delta = 0.0
    return float(freqs[k] + delta * df)


def estimate_pulse_rate(x, fs: float, band=BAND, order: int = 3) -> float:
    """Band-pass then dominant frequency, in Hz."""
    return dominant_frequency(butterworth_bandpass(x, fs, order, band), fs, band)


def pulse_rate_metrics(true_bpm, est_bpm) -> dict[str, float]:
    t = np.asarray(true_bpm, dtype=np.float64)
    e = np.asarray(est_bpm, dtype=np.float64)
    if t.shape != e.shape or t.ndim != 1 or len(t) == 0:
        raise ValueError("need two equal-length, non-empty lists of pulse rates")
    err = e - t
    r = float("nan")
    if len(t) >= 2 and np.std(t) > 0 and np.std(e) > 0:
        r = float(np.corrcoef(t, e)[0, 1])
    elif len(t) >= 2 and np.array_equal(t, e):
        r = 1.0
    return {"MAE": float(np.mean(np.abs(err))), "RMSE": float(np.sqrt(np.mean(err ** 2))),
            "r": r, "n": int(len(t))}


def aggregate_clips(clips, offsets, length: int | None = None) -> np.ndarray:
    """Place clip waveforms at their frame offsets; overlapping samples are averaged.

    Samples not covered by any clip are NaN.
    """
    clips = [np.asarray(c, dtype=np.float64) for c in clips]
    offsets = [int(o) for o in offsets]
    if len(clips) != len(offsets):
        raise ValueError("one offset per clip required")
    if length is None:
        length = max((o + len(c) for c, o in zip(clips, offsets)), default=0)
    total = np.zeros(length)
    count = np.zeros(length)
    for c, o in zip(clips, offsets):
        total[o:o + len(c)] += c
        count[o:o + len(c)] += 1
    out = np.full(length, np.nan)
    covered = count > 0
    out[covered] = total[covered] / count[covered]
    return out
