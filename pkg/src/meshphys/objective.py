"""Composite training objective.

Three morphological correlation terms on the waveform and its first and
second differences, each marginalised over circular time shifts with softmin
weights and scaled per sample by the reference's spectral concentration, plus
a Laplacian smoothness penalty on band-passed late-layer node features.
Every term can be switched off through its weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from . import autodiff as ad
from .dsp import welch_psd
from .pooling import laplacian


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_pearson: float = 1.0
    lambda_d1: float = 0.5
    lambda_d2: float = 0.1
    lambda_smooth: float = 0.002
    max_shift: int = 50
    tau: float = 10.0
    gamma: float = 0.5
    snr_floor: float = 0.10
    snr_cap: float = 1.0
    sigma: float = 0.1
    band: tuple[float, float] = (0.5, 3.0)
    smooth_layer: int = 4

    def __post_init__(self):
        if min(self.lambda_pearson, self.lambda_d1, self.lambda_d2, self.lambda_smooth) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if not 0 < self.snr_floor <= 1:
            raise ValueError("snr_floor must lie in (0, 1]")
        if not 0 < self.band[0] < self.band[1]:
            raise ValueError("band must be ordered and positive")
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")


# --------------------------------------------------------------- correlation

def difference(x: ad.Tensor, order: int) -> ad.Tensor:
    """Forward difference (order 1) or central second difference (order 2) along the last axis."""
    if order == 0:
        return x
    if order == 1:
        return x[..., 1:] - x[..., :-1]
    if order == 2:
        return x[..., 2:] - 2.0 * x[..., 1:-1] + x[..., :-2]
    raise ValueError("difference order must be 0, 1 or 2")


def correlation_losses(yhat, y, order: int = 0) -> tuple[ad.Tensor, np.ndarray]:
    """Row-wise ``1 - rho`` of the ``order``-th differences; returns (losses, zero-variance flags)."""
    yhat = ad.as_tensor(yhat)
    y = ad.as_tensor(y, yhat.dtype)
    if yhat.shape[-1] < 3:
        raise ValueError("sequences need at least 3 samples")
    rho, flags = ad.pearson(difference(yhat, order), difference(y, order))
    return 1.0 - rho, flags


def pearson_loss(yhat, y, order: int = 0) -> tuple[ad.Tensor, bool]:
    """Mean ``1 - rho`` over rows; ``order`` selects the plain, first- or second-difference variant."""
    losses, flags = correlation_losses(yhat, y, order)
    return losses.mean(), bool(np.any(flags))


def phase_shift_loss(yhat, y, max_shift: int, tau: float, order: int = 0):
    """Softmin-weighted correlation loss over circular shifts of ``yhat`` in [-max_shift, max_shift].

    Shifts are applied before differencing.  Returns ``(per-row loss, weights, flags)``
    with weights of shape (..., 2 * max_shift + 1).
    """
    yhat = ad.as_tensor(yhat)
    y = ad.as_tensor(y, yhat.dtype)
    t = yhat.shape[-1]
    if max_shift < 0:
        raise ValueError("max_shift must be >= 0")
    if max_shift and 2 * max_shift >= t:
        raise ValueError(f"max_shift {max_shift} must be below T/2 = {t / 2}")
    if max_shift == 0:
        losses, flags = correlation_losses(yhat, y, order)
        return losses, np.ones(losses.shape + (1,)), flags
    shifted = ad.circular_shifts(yhat, np.arange(-max_shift, max_shift + 1))  # (..., S, T)
    yb = ad.reshape(y, y.shape[:-1] + (1, t))
    losses, flags = correlation_losses(shifted, yb, order)                     # (..., S)
    w = ad.softmax(losses * (-tau), axis=-1)
    return ad.tsum(w * losses, axis=-1), w.data, flags.any(axis=-1)


# ------------------------------------------------------------- SNR weighting

def snr_ratio(y, fs: float, f_pr: float, sigma: float = 0.1, band=(0.5, 3.0)) -> float:
    freqs, power = welch_psd(y, fs)
    g = np.exp(-0.5 * ((freqs - f_pr) / sigma) ** 2)
    inband = (freqs >= band[0]) & (freqs <= band[1])
    den = trapezoid(power[inband], freqs[inband]) if inband.sum() > 1 else power[inband].sum()
    if den <= 0:
        return 0.0
    return float(trapezoid(g * power, freqs) / den)


def snr_weight(y, fs: float, f_pr: float, config: ObjectiveConfig = ObjectiveConfig()):
    """Per-sample weight from the reference's spectral concentration around ``f_pr``.

    Returns ``(weight, flag)``; the flag is set for an all-zero reference,
    which gets the floor weight.  The weight carries no gradient.
    """
    y = np.asarray(y, dtype=np.float64)
    lo, hi = config.band
    if not lo <= f_pr <= hi:
        raise ValueError(f"reference pulse rate {f_pr} Hz outside the band")
    if not np.any(y - y.mean()):
        return config.snr_floor, True
    ratio = snr_ratio(y, fs, f_pr, config.sigma, config.band)
    weight = ratio ** config.gamma if ratio > 0 else (1.0 if config.gamma == 0 else 0.0)
    return float(np.clip(weight, config.snr_floor, config.snr_cap)), False


# --------------------------------------------------------- graph smoothness

def bandpass_matrix(t: int, fs: float, band=(0.5, 3.0)) -> np.ndarray:
    """T x T matrix of the hard frequency-mask band-pass (circular, symmetric)."""
    freqs = np.fft.rfftfreq(t, 1.0 / fs)
    mask = ((freqs >= band[0]) & (freqs <= band[1])).astype(np.float64)
    eye = np.eye(t)
    return np.fft.irfft(mask[:, None] * np.fft.rfft(eye, axis=0), n=t, axis=0)


def graph_smoothness(features: ad.Tensor, adjacency, fs: float, band=(0.5, 3.0)) -> ad.Tensor:
    """Mean Laplacian quadratic form of band-passed node features.

    ``features`` is B x C x T x N (or C x T x N); returns
    ``sum_{c,t} z^T L z / (C T N)`` averaged over the batch.
    """
    features = ad.as_tensor(features)
    if features.ndim == 3:
        features = ad.reshape(features, (1,) + features.shape)
    t, n = features.shape[-2], features.shape[-1]
    if adjacency.shape != (n, n):
        raise ValueError("adjacency does not match the node axis")
    z = ad.temporal_matmul(features, bandpass_matrix(t, fs, band))
    lz = ad.node_matmul(z, laplacian(adjacency))
    return ad.tsum(z * lz) * (1.0 / features.data.size)


# ------------------------------------------------------------------ composite

def composite_loss(yhat, y, tap=None, config: ObjectiveConfig = ObjectiveConfig(), fs: float = 30.0,
                   f_pr=None):
    """Total loss and per-term breakdown for a batch of waveforms.

    ``yhat`` and ``y`` are B x T (or T); ``tap`` is ``(features, adjacency)``
    for the smoothness term; ``f_pr`` gives reference pulse rates in Hz per
    row (estimated from ``y`` when omitted).  Returns ``(loss, breakdown, flags)``.
    """
    from .dsp import estimate_pulse_rate

    yhat = ad.as_tensor(yhat)
    if yhat.ndim == 1:
        yhat = ad.reshape(yhat, (1, -1))
    y_np = np.atleast_2d(np.asarray(y.data if isinstance(y, ad.Tensor) else y, dtype=np.float64))
    y_t = ad.Tensor(y_np.astype(yhat.dtype))
    b = yhat.shape[0]

    if f_pr is None:
        f_pr = [estimate_pulse_rate(row, fs, config.band) for row in y_np]
    f_pr = np.broadcast_to(np.asarray(f_pr, dtype=np.float64), (b,))
    weights, snr_flags = [], []
    for row, f in zip(y_np, f_pr):
        if config.gamma == 0:
            weights.append(1.0)
            snr_flags.append(False)
        elif not np.isfinite(f):
            weights.append(config.snr_floor)
            snr_flags.append(True)
        else:
            w, fl = snr_weight(row, fs, float(np.clip(f, *config.band)), config)
            weights.append(w)
            snr_flags.append(fl)
    w_snr = np.asarray(weights, dtype=yhat.dtype)

    terms = {}
    flags = np.zeros(b, dtype=bool)
    morph = None
    for key, lam, order in (("pearson", config.lambda_pearson, 0),
                            ("pearson_d1", config.lambda_d1, 1),
                            ("pearson_d2", config.lambda_d2, 2)):
        losses, _, fl = phase_shift_loss(yhat, y_t, config.max_shift, config.tau, order)
        flags |= fl
        terms[key] = float(losses.data.mean())
        if lam > 0:
            morph = losses * lam if morph is None else morph + losses * lam
    total = ad.tmean(morph * ad.Tensor(w_snr)) if morph is not None else ad.Tensor(np.zeros((), yhat.dtype))

    if tap is not None and config.lambda_smooth > 0:
        feats, adj = tap
        gs = graph_smoothness(feats, adj, fs, config.band)
        terms["smoothness"] = float(gs.data)
        total = total + gs * config.lambda_smooth
    else:
        terms["smoothness"] = 0.0
    terms["snr_weight"] = float(w_snr.mean())
    terms["total"] = float(total.data)
    return total, terms, {"zero_variance": flags, "snr": np.asarray(snr_flags)}
