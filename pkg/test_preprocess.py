import numpy as np
import pytest

from model import Recording, SeizureEvent
from preprocess import (Biquad, PreprocessConfig, Preprocessor, RollingStats, compare_sigma_modes, highpass,
                        lintanh, normalize, notch50, rolling_sigma, window_stream)

FS = 256.0


def _sine(freq, seconds, fs=FS, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def _steady_amplitude(y, fs=FS, settle_s=5.0):
    return np.max(np.abs(y[int(settle_s * fs):]))


def test_notch_removes_50hz():
    y = notch50(_sine(50.0, 20.0), FS)
    assert _steady_amplitude(y) <= 0.1


def test_notch_preserves_dc_and_10hz():
    y = notch50(np.full(int(20 * FS), 3.0), FS)
    assert y[-1] == pytest.approx(3.0, rel=0.01)
    y = notch50(_sine(10.0, 20.0), FS)
    assert _steady_amplitude(y) == pytest.approx(1.0, rel=0.1)


def test_notch_passband_and_stopband():
    b = Biquad.notch(FS)
    w = np.array([20.0, 39.0, 50.0, 61.0, 100.0])
    z = np.exp(-2j * np.pi * w / FS)
    h = (b.b[0] + b.b[1] * z + b.b[2] * z ** 2) / (b.a[0] + b.a[1] * z + b.a[2] * z ** 2)
    db = 20 * np.log10(np.abs(h))
    assert db[2] <= -20
    assert np.all(np.abs(db[[0, 1, 3, 4]]) <= 1.0)


def test_notch_needs_fs_above_100hz():
    with pytest.raises(ValueError):
        notch50(np.zeros(10), fs=100.0)


def test_highpass_rejects_dc():
    y = highpass(np.full(int(120 * FS), 5.0), FS)
    assert abs(y[-1]) < 0.01
    assert np.all(highpass(np.zeros(1000), FS) == 0.0)


def test_highpass_keeps_1hz():
    y = highpass(_sine(1.0, 60.0), FS)
    assert _steady_amplitude(y, settle_s=40.0) == pytest.approx(1.0, rel=0.05)


def test_highpass_step_decays_with_time_constant():
    y = highpass(np.ones(int(10 * FS)), FS)
    tau = 1.0 / (2 * np.pi * 0.1)
    t = np.arange(len(y)) / FS
    np.testing.assert_allclose(y[::256], np.exp(-t[::256] / tau), atol=0.01)


def test_highpass_invalid_cutoff():
    with pytest.raises(ValueError):
        highpass(np.zeros(10), FS, cutoff=0.0)
    with pytest.raises(ValueError):
        highpass(np.zeros(10), FS, cutoff=200.0)


def test_biquad_is_streaming():
    x = np.random.default_rng(0).standard_normal((2000, 3))
    whole = Biquad.notch(FS, n_channels=3).process(x)
    chunked = Biquad.notch(FS, n_channels=3)
    parts = [chunked.process(x[i:i + 137]) for i in range(0, len(x), 137)]
    np.testing.assert_allclose(np.vstack(parts), whole, atol=1e-12)


def test_biquad_rejects_unstable_poles():
    with pytest.raises(ValueError, match="Unstable"):
        Biquad([1.0], [1.0, -2.5, 1.5])


def test_exact_sigma_constant_is_floored():
    stats = RollingStats(1, fs=4, window_s=10, mode="exact", sigma_floor=1e-6)
    sigma = stats.update(np.full((100, 1), 7.0))
    assert sigma[-1, 0] == 1e-6


def test_exact_sigma_alternating_is_one():
    stats = RollingStats(1, fs=4, window_s=10, mode="exact")
    x = np.tile([1.0, -1.0], 50)[:, None]
    sigma = stats.update(x)
    assert stats.warm
    assert sigma[-1, 0] == pytest.approx(1.0)


def test_exact_sigma_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((500, 2)) * [1.0, 3.0] + [10.0, -4.0]
    stats = RollingStats(2, fs=8, window_s=5, mode="exact")
    sigma = np.vstack([stats.update(x[i:i + 33]) for i in range(0, len(x), 33)])
    for t in (0, 5, 39, 40, 41, 250, 499):
        ref = x[max(0, t - 39):t + 1].std(axis=0)
        np.testing.assert_allclose(sigma[t], np.maximum(ref, 1e-6), rtol=1e-9, atol=1e-12)


def test_rolling_sigma_single_sample_matches_batch():
    x = np.random.default_rng(2).standard_normal((64, 2))
    a = RollingStats(2, fs=4, window_s=4, mode="grand_mean")
    b = RollingStats(2, fs=4, window_s=4, mode="grand_mean")
    one_by_one = np.array([rolling_sigma(a, row) for row in x])
    np.testing.assert_allclose(one_by_one, b.update(x))


def test_block_modes_need_whole_seconds():
    with pytest.raises(ValueError):
        RollingStats(1, fs=256.5, window_s=600, mode="grand_mean")


def test_grand_mean_equals_exact_for_blockwise_constant_signal():
    fs, window = 8, 6
    levels = np.random.default_rng(3).standard_normal((40, 1))
    x = np.repeat(levels, fs, axis=0)
    exact = RollingStats(1, fs, window, "exact").update(x)
    approx = RollingStats(1, fs, window, "grand_mean").update(x)
    for t in range(window * fs, len(x), fs):
        assert approx[t, 0] == pytest.approx(exact[t - 1, 0], rel=1e-9)


def test_approximation_bounds_on_highpassed_noise():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((int(700 * FS), 1))
    table = compare_sigma_modes(x, FS, window_s=600.0).set_index("mode")
    assert table.loc["exact", "max_rel_error"] == 0.0
    assert table.loc["grand_mean", "max_rel_error"] <= 0.01
    assert table.loc["zero_mean", "max_rel_error"] <= 0.02


def test_lintanh_values():
    assert lintanh(0.0) == 0.0
    assert lintanh(0.6) == pytest.approx(0.5)
    assert lintanh(-1.3) == -1.0
    assert lintanh(5.0) == 1.0


def test_lintanh_tanh_gap_on_dense_grid():
    x = np.linspace(-4, 4, 80001)
    gap = np.abs(lintanh(x) - np.tanh(x))
    assert gap.max() == pytest.approx(0.17, abs=0.01)
    assert abs(x[np.argmax(gap)]) == pytest.approx(1.2, abs=1e-3)


def test_normalize():
    assert normalize(0.0, 1.0, "tanh") == 0.0
    assert normalize(0.0, 1.0, "lintanh") == 0.0
    assert normalize(5.0, 1.0, "tanh") == pytest.approx(np.tanh(1.0))
    assert normalize(10.0, 1.0, "lintanh") == 1.0
    x = np.linspace(-100, 100, 1001)
    y = normalize(x, 2.0, "tanh")
    assert np.all(np.diff(y) >= 0)
    assert np.all(np.abs(y) <= 1)
    with pytest.raises(ValueError):
        normalize(1.0, 0.0)
    with pytest.raises(ValueError):
        normalize(1.0, 1.0, "relu")


def test_preprocess_config_rejects_unknown_keys():
    assert PreprocessConfig.from_dict({"mode": "zero_mean"}).mode == "zero_mean"
    with pytest.raises(ValueError, match="Unknown preprocess keys"):
        PreprocessConfig.from_dict({"mode": "exact", "window": 10})
    with pytest.raises(ValueError):
        PreprocessConfig(mode="median")


def test_preprocessor_is_causal():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3000, 2))
    y = x.copy()
    y[2000:] += 100.0
    cfg = PreprocessConfig(window_s=5.0)
    a = Preprocessor(FS, 2, cfg).run(x, chunk_s=1.0)
    b = Preprocessor(FS, 2, cfg).run(y, chunk_s=3.0)
    np.testing.assert_allclose(a[:2000], b[:2000], atol=1e-12)


def _recording(seconds, events=(), fs=FS, channels=2):
    data = np.random.default_rng(6).standard_normal((int(seconds * fs), channels))
    return Recording(data=data, fs=fs, annotations=list(events))


def test_window_counts():
    rec = _recording(10)
    ws = window_stream(rec, stride_s=1.0)
    assert len(ws) == 10
    assert ws.t_end[0] == 1.0
    assert ws.x.shape == (10, 2, 256)
    assert len(window_stream(rec, stride_s=0.5)) == 19


def test_window_labels_and_weights():
    rec = _recording(10, [SeizureEvent(4.0, 7.0)])
    ws = window_stream(rec, stride_s=1.0)
    assert list(ws.t_end[ws.label == 1]) == [5.0, 6.0, 7.0]
    np.testing.assert_allclose(ws.onset_weight[ws.label == 1], [2 / 3, 1 / 3, 0.0])
    assert np.all(ws.onset_weight[ws.label == 0] == 0)
    sample = ws[4]
    assert sample.label == 1 and sample.t_end == 5.0


def test_windows_are_normalized_and_flag_warmup():
    rec = _recording(20)
    ws = window_stream(rec, 1.0, PreprocessConfig(window_s=10.0, nonlinearity="lintanh"))
    assert np.all(np.abs(ws.x) <= 1.0)
    assert ws.warmup.sum() == 9
    assert not ws.warmup[-1]


def test_window_labels_ignore_signal_scale():
    rec = _recording(10, [SeizureEvent(2.5, 6.0)])
    scaled = Recording(data=rec.data * 1000.0, fs=rec.fs, annotations=rec.annotations)
    a, b = window_stream(rec), window_stream(scaled)
    np.testing.assert_array_equal(a.label, b.label)
    np.testing.assert_array_equal(a.t_end, b.t_end)


def test_window_stream_too_short():
    with pytest.raises(ValueError, match="shorter than one"):
        window_stream(_recording(0.5))
