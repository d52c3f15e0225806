from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from meshphys import autodiff as ad
from meshphys.objective import (ObjectiveConfig, bandpass_matrix, composite_loss, difference,
                                graph_smoothness, pearson_loss, phase_shift_loss, snr_weight)

FS = 30.0


def T(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rho_oracle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    da, db = a - a.mean(), b - b.mean()
    return (da @ db) / np.sqrt((da @ da) * (db @ db))


def test_pearson_examples(rng):
    y = rng.normal(size=32)
    assert abs(pearson_loss(y, y)[0].item()) < 1e-12
    assert abs(pearson_loss(-y, y)[0].item() - 2.0) < 1e-12
    got = pearson_loss([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])[0].item()
    assert abs(got - (1 - rho_oracle([1, 2, 3], [1, 2, 4]))) < 1e-12


def test_pearson_zero_variance_flagged():
    loss, flag = pearson_loss(np.ones(10), np.arange(10.0))
    assert loss.item() == 1.0 and flag


def test_difference_variants(rng):
    y = rng.normal(size=12)
    assert np.allclose(difference(ad.Tensor(y), 1).data, np.diff(y))
    assert np.allclose(difference(ad.Tensor(y), 2).data, np.diff(y, 2))
    z = y + rng.normal(size=12)
    for order in (1, 2):
        got = pearson_loss(y, z, order)[0].item()
        assert abs(got - (1 - rho_oracle(np.diff(y, order), np.diff(z, order)))) < 1e-12


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 2))
def test_pearson_scale_offset_invariance(seed, a, b, order):
    rng = np.random.default_rng(seed)
    yhat, y = rng.normal(size=(3, 40)), rng.normal(size=(3, 40))
    l0 = pearson_loss(yhat, y, order)[0].item()
    l1 = pearson_loss(a * yhat + b, y, order)[0].item()
    assert abs(l0 - l1) < 1e-9


@given(st.integers(0, 10 ** 6), st.integers(1, 12), st.floats(0.1, 50))
def test_softmin_weights_sum_to_one(seed, phi, tau):
    rng = np.random.default_rng(seed)
    _, w, _ = phase_shift_loss(rng.normal(size=(2, 32)), rng.normal(size=(2, 32)), phi, tau)
    assert w.shape == (2, 2 * phi + 1)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)


@given(st.integers(0, 10 ** 6), st.integers(0, 2))
def test_phi_zero_is_exactly_base_loss(seed, order):
    rng = np.random.default_rng(seed)
    yhat, y = rng.normal(size=(4, 30)), rng.normal(size=(4, 30))
    losses, w, _ = phase_shift_loss(yhat, y, 0, 10.0, order)
    base, _ = pearson_loss(yhat, y, order)
    assert losses.data.mean() == base.item()
    assert np.array_equal(w, np.ones((4, 1)))


def test_phase_shift_on_delayed_sinusoid():
    t = np.arange(128) / FS
    y = np.sin(2 * np.pi * 1.3 * t)
    yhat = np.roll(y, 7)
    base = pearson_loss(yhat, y)[0].item()
    shifts = range(-10, 11)
    per_shift = [pearson_loss(np.roll(yhat, s), y)[0].item() for s in shifts]
    for tau in (10.0, 100.0, 1e4):
        loss = phase_shift_loss(yhat[None], y[None], 10, tau)[0].item()
        assert loss <= base + 1e-12
        assert loss >= min(per_shift) - 1e-12
    assert abs(phase_shift_loss(yhat[None], y[None], 10, 1e6)[0].item() - min(per_shift)) < 1e-6


def test_phase_shift_rejects_large_phi():
    with pytest.raises(ValueError):
        phase_shift_loss(np.zeros((1, 20)), np.zeros((1, 20)), 10, 10.0)


def _snr_oracle(y, f_pr, sigma=0.1, gamma=0.5, band=(0.5, 3.0)):
    from scipy import signal

    f, p = signal.welch(y, FS, window="hann", nperseg=min(len(y), 256), noverlap=None,
                        detrend="constant", scaling="density")
    g = np.exp(-0.5 * ((f - f_pr) / sigma) ** 2)
    m = (f >= band[0]) & (f <= band[1])
    return (trapezoid(g * p, f) / trapezoid(p[m], f[m])) ** gamma


def test_snr_weight_sinusoid_matches_oracle():
    t = np.arange(1800) / FS
    f_pr = 10 * FS / 256        # on a Welch bin
    w, flag = snr_weight(np.sin(2 * np.pi * f_pr * t), FS, f_pr)
    assert not flag
    assert abs(w - min(_snr_oracle(np.sin(2 * np.pi * f_pr * t), f_pr), 1.0)) < 1e-9
    assert 0.9 < w <= 1.0


def test_snr_weight_white_noise_matches_oracle(rng):
    y = rng.normal(size=4096)
    w, _ = snr_weight(y, FS, 1.2)
    assert abs(w - max(_snr_oracle(y, 1.2), 0.1)) < 1e-9
    # flat spectrum: ratio ~ sigma * sqrt(2 pi) / band width
    assert abs(w - np.sqrt(0.1 * np.sqrt(2 * np.pi) / 2.5)) < 0.05


def test_snr_weight_floor_gamma_zero_and_zero_signal(rng):
    cfg = ObjectiveConfig(gamma=0.0)
    assert snr_weight(rng.normal(size=512), FS, 1.2, cfg)[0] == 1.0
    w, flag = snr_weight(np.zeros(256), FS, 1.2)
    assert w == 0.1 and flag
    t = np.arange(512) / FS
    assert snr_weight(np.sin(2 * np.pi * 2.8 * t), FS, 0.6)[0] == 0.1


@given(st.integers(0, 10 ** 6), st.floats(0.5, 3.0), st.floats(0.0, 2.0))
def test_snr_weight_range(seed, f_pr, gamma):
    rng = np.random.default_rng(seed)
    t = np.arange(300) / FS
    y = rng.normal() * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t) + rng.uniform() * rng.normal(size=300)
    w, _ = snr_weight(y, FS, f_pr, ObjectiveConfig(gamma=gamma))
    assert 0.1 <= w <= 1.0


def _dense_smoothness(x, a, band=(0.5, 3.0)):
    b, c, t, n = x.shape
    m = bandpass_matrix(t, FS, band)
    lap = np.diag(a.sum(1)) - a
    z = np.einsum("st,bctn->bcsn", m, x)
    return np.einsum("bctn,nm,bctm->", z, lap, z) / x.size


def test_bandpass_matrix_is_frequency_mask():
    m = bandpass_matrix(64, FS)
    t = np.arange(64) / FS
    inside = np.sin(2 * np.pi * (4 * FS / 64) * t)
    outside = np.sin(2 * np.pi * (0 * FS / 64) * t) + np.sin(2 * np.pi * (20 * FS / 64) * t)
    assert np.allclose(m @ inside, inside)
    assert np.allclose(m @ outside, 0, atol=1e-12)


def test_graph_smoothness_examples(rng):
    x = rng.normal(size=(2, 3, 32, 5))
    a = np.ones((5, 5))
    const = np.repeat(x[..., :1], 5, axis=-1)
    assert abs(graph_smoothness(ad.Tensor(const), sp.csr_array(a), FS).item()) < 1e-12
    two = np.array([[1.0, 1.0], [1.0, 1.0]])
    y = rng.normal(size=(1, 1, 32, 2))
    z = bandpass_matrix(32, FS) @ y[0, 0]
    ref = np.sum((z[:, 0] - z[:, 1]) ** 2) / y.size
    assert abs(graph_smoothness(ad.Tensor(y), sp.csr_array(two), FS).item() - ref) < 1e-12


@given(st.integers(0, 10 ** 6))
def test_graph_smoothness_dense_oracle_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    m = rng.uniform(size=(n, n)) < 0.4
    a = ((m | m.T) | np.eye(n, dtype=bool)).astype(float)
    x = rng.normal(size=(2, 2, 24, n))
    got = graph_smoothness(ad.Tensor(x), sp.csr_array(a), FS).item()
    assert abs(got - _dense_smoothness(x, a)) < 1e-9
    assert got >= -1e-15


def test_composite_reduces_to_pearson(rng):
    y, yhat = rng.normal(size=(3, 64)), rng.normal(size=(3, 64))
    cfg = ObjectiveConfig(lambda_d1=0, lambda_d2=0, lambda_smooth=0, max_shift=0, gamma=0)
    total, terms, _ = composite_loss(yhat, y, None, cfg, FS, f_pr=[1.2] * 3)
    assert abs(total.item() - pearson_loss(yhat, y)[0].item()) < 1e-12
    assert set(terms) >= {"pearson", "pearson_d1", "pearson_d2", "smoothness", "snr_weight", "total"}


def test_composite_zero_on_perfect_prediction(rng):
    t = np.arange(128) / FS
    y = np.sin(2 * np.pi * 1.2 * t)[None] + 0.1 * rng.normal(size=(2, 128))
    tap = (ad.Tensor(np.repeat(rng.normal(size=(2, 3, 128, 1)), 4, -1)), sp.csr_array(np.ones((4, 4))))
    total, _, _ = composite_loss(y, y, tap, ObjectiveConfig(max_shift=0), FS, f_pr=[1.2, 1.2])
    assert abs(total.item()) < 1e-12


def test_composite_gradient_wrt_prediction(rng):
    t = np.arange(48) / FS
    y = np.sin(2 * np.pi * 1.5 * t)[None] + 0.2 * rng.normal(size=(2, 48))
    yhat = T(rng.normal(size=(2, 48)))
    cfg = ObjectiveConfig(max_shift=5)
    err = ad.grad_check(lambda: composite_loss(yhat, y, None, cfg, FS, f_pr=[1.5, 1.5])[0], [yhat])
    assert err < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_d1=-1)
    with pytest.raises(ValueError):
        ObjectiveConfig(snr_floor=0)
    with pytest.raises(ValueError):
        ObjectiveConfig(band=(3.0, 0.5))
