import logging
import struct

import numpy as np
import pytest

from net import (ActivationArena, ArchDescriptor, BatchNorm, Conv2D, Dense, Dropout, MaxPool2D, ReLU, Sigmoid,
                 WeightFileError, WeightSet, arena_elements, baseline_archs, count_params, fold_batchnorm, forward,
                 infer_shapes, init_weights, layer_params, load_weights, param_shapes, predict, quantize,
                 reconcile_params, save_weights, seizurenet_arch, to_q15, zero_weights)


def _reference_forward(arch, weights, window):
    """Layer-by-layer loops over output positions, independent of the arena engine."""
    t = weights.tensors
    x = np.asarray(window, dtype=np.float64).reshape(arch.input_shape)
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2D):
            k, b = t[f"{i}.kernel"], t[f"{i}.bias"]
            kh, kw = k.shape[:2]
            y = np.empty((x.shape[0] - kh + 1, x.shape[1] - kw + 1, k.shape[3]))
            for r in range(y.shape[0]):
                for s in range(y.shape[1]):
                    y[r, s] = np.tensordot(x[r:r + kh, s:s + kw, :], k, axes=3) + b
            x = y
        elif isinstance(layer, MaxPool2D):
            oh, ow = x.shape[0] // layer.pool_h, x.shape[1] // layer.pool_w
            y = np.empty((oh, ow, x.shape[2]))
            for r in range(oh):
                for s in range(ow):
                    block = x[r * layer.pool_h:(r + 1) * layer.pool_h, s * layer.pool_w:(s + 1) * layer.pool_w]
                    y[r, s] = block.max(axis=(0, 1))
            x = y
        elif isinstance(layer, BatchNorm):
            if not weights.folded:
                x = ((x - t[f"{i}.mean"]) / np.sqrt(t[f"{i}.var"] + layer.eps) * t[f"{i}.gamma"]
                     + t[f"{i}.beta"])
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Dense):
            x = (x.reshape(-1) @ t[f"{i}.kernel"] + t[f"{i}.bias"]).reshape(1, 1, -1)
        elif isinstance(layer, Sigmoid):
            x = 1.0 / (1.0 + np.exp(-x))
    return float(x.reshape(-1)[0])


def _random_weights(arch, rng):
    w = init_weights(arch, rng)
    for name, v in w.tensors.items():
        if name.endswith(".bias"):
            w.tensors[name] = rng.normal(0, 0.1, v.shape)
        elif name.endswith(".gamma"):
            w.tensors[name] = rng.uniform(0.5, 1.5, v.shape)
        elif name.endswith(".beta"):
            w.tensors[name] = rng.normal(0, 0.2, v.shape)
        elif name.endswith(".mean"):
            w.tensors[name] = rng.normal(0, 0.2, v.shape)
        elif name.endswith(".var"):
            w.tensors[name] = rng.uniform(0.2, 2.0, v.shape)
    return w


def _windows(rng, n, E=4, W=256):
    return rng.uniform(-1, 1, (n, E, W))


def test_seizurenet_shape_trace_matches_table():
    arch = seizurenet_arch(4)
    shapes = [s for layer, s in zip(arch.layers, infer_shapes(arch))
              if isinstance(layer, (Conv2D, MaxPool2D, Sigmoid))]
    assert shapes == [(1, 240, 20), (1, 60, 20), (1, 56, 10), (1, 14, 10), (1, 10, 10),
                      (1, 5, 10), (1, 1, 10), (1, 1, 1), (1, 1, 1)]
    assert arch.input_shape == (4, 256, 1)


def test_seizurenet_layer_stack():
    arch = seizurenet_arch(4)
    convs = [l for l in arch.layers if isinstance(l, Conv2D)]
    assert [(c.out_channels, c.kernel_h, c.kernel_w) for c in convs] == [
        (20, 4, 17), (10, 1, 5), (10, 1, 5), (10, 1, 5), (1, 1, 1)]
    assert sum(isinstance(l, BatchNorm) for l in arch.layers) == 4
    assert all(l.rate == 0.2 for l in arch.layers if isinstance(l, Dropout))
    for i, layer in enumerate(arch.layers[:-2]):
        if isinstance(layer, Conv2D):
            assert isinstance(arch.layers[i + 1], BatchNorm)
            assert isinstance(arch.layers[i + 2], ReLU)


def test_seizurenet_parameter_total():
    arch = seizurenet_arch(4)
    assert count_params(arch) == 3621
    per_layer = layer_params(arch)
    conv = sum(n for l, n in zip(arch.layers, per_layer) if isinstance(l, Conv2D))
    bn = sum(n for l, n in zip(arch.layers, per_layer) if isinstance(l, BatchNorm))
    assert (conv, bn) == (3421, 200)
    assert count_params(seizurenet_arch(1)) == 3621 - 3 * 17 * 20 == 2601


def test_seizurenet_window_too_short():
    with pytest.raises(ValueError, match="too short"):
        seizurenet_arch(4, fs=64, window_s=1.0)
    assert seizurenet_arch(2, fs=512).layers[15].kernel_w == 13


def test_infer_shapes_known_values():
    assert infer_shapes(ArchDescriptor("a", (4, 256, 1), (Conv2D(20, 4, 17),))) == [(1, 240, 20)]
    assert infer_shapes(ArchDescriptor("b", (1, 60, 20), (Conv2D(10, 1, 5),))) == [(1, 56, 10)]
    assert infer_shapes(ArchDescriptor("c", (1, 61, 3), (MaxPool2D(1, 4),))) == [(1, 15, 3)]
    with pytest.raises(ValueError, match="kernel height"):
        infer_shapes(ArchDescriptor("d", (4, 256, 1), (Conv2D(20, 5, 17),)))


def test_count_params_small_cases():
    assert count_params(ArchDescriptor("c", (1, 1, 10), (Conv2D(1, 1, 1),))) == 11
    n = 37
    assert count_params(ArchDescriptor("d", (1, n, 1), (Dense(50),))) == 50 * n + 50
    assert count_params(ArchDescriptor("p", (1, 8, 2), (ReLU(), MaxPool2D(1, 2), Dropout(0.5)))) == 0


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        Conv2D(0, 1, 1)
    with pytest.raises(ValueError):
        MaxPool2D(1, 0)
    with pytest.raises(ValueError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        Conv2D(1, 1, 1, padding="full")


def test_validate_requires_final_sigmoid():
    with pytest.raises(ValueError):
        ArchDescriptor("x", (1, 1, 3), (Conv2D(1, 1, 1),)).validate()
    ArchDescriptor("ok", (1, 1, 3), (Conv2D(1, 1, 1), Sigmoid())).validate()


def test_baselines():
    archs = baseline_archs(4)
    acharya, kiral, eegnet = archs["acharya"], archs["kiral"], archs["eegnet"]
    assert acharya.input_shape == (4, 4097, 1)
    first = acharya.layers[0]
    assert (first.out_channels, first.kernel_h, first.kernel_w) == (4, 4, 6)
    assert count_params(acharya) == 96220

    assert kiral.input_shape == (32, 32, 4)
    assert kiral.frontend == "stft"
    kinds = [l.kind for l in kiral.layers if isinstance(l, (Conv2D, MaxPool2D, Dense))]
    assert kinds[:7] == ["conv2d", "maxpool2d"] * 3 + ["dense"]
    assert [l.units for l in kiral.layers if isinstance(l, Dense)][0] == 32

    assert count_params(eegnet) == 957


def test_reconcile_reports_mismatch(caplog):
    with caplog.at_level(logging.WARNING):
        counts = reconcile_params(baseline_archs(4))
    assert counts["eegnet"] == (957, 957)
    assert counts["acharya"] == (96220, 96220)
    counted, target = counts["kiral"]
    assert target == 15665
    if counted != target:
        assert "kiral" in caplog.text


def test_descriptor_json_roundtrip(tmp_path):
    arch = baseline_archs(2)["eegnet"]
    p = tmp_path / "arch.json"
    arch.save_to_json(str(p))
    loaded = ArchDescriptor.load_from_json(str(p))
    assert loaded == arch
    assert loaded.digest() == arch.digest()
    assert seizurenet_arch(2).digest() != seizurenet_arch(3).digest()


def test_zero_weights_give_one_half():
    arch = seizurenet_arch(4)
    window = np.random.default_rng(0).uniform(-1, 1, (4, 256))
    assert forward(arch, zero_weights(arch), window) == 0.5


def test_forward_matches_reference():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(1)
    arena = ActivationArena.for_arch(arch)
    worst = 0.0
    for _ in range(100):
        weights = _random_weights(arch, rng)
        for window in _windows(rng, 10):
            p = forward(arch, weights, window, arena=arena)
            worst = max(worst, abs(p - _reference_forward(arch, weights, window)))
            assert 0.0 < p < 1.0
    assert worst <= 1e-5


def test_forward_matches_reference_with_dense_layers():
    arch = ArchDescriptor("mlp", (2, 16, 1), (Conv2D(3, 2, 3), ReLU(), MaxPool2D(1, 2), Dense(5), ReLU(),
                                             Dropout(0.5), Dense(1), Sigmoid()))
    rng = np.random.default_rng(2)
    weights = _random_weights(arch, rng)
    for window in rng.uniform(-1, 1, (20, 2, 16)):
        assert forward(arch, weights, window) == pytest.approx(_reference_forward(arch, weights, window), abs=1e-12)


def test_forward_is_deterministic_and_uses_two_buffers():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(3)
    weights = _random_weights(arch, rng)
    window = _windows(rng, 1)[0]
    arena = ActivationArena.for_arch(arch)
    assert arena.size == arena_elements(arch) == 240 * 20
    p1 = forward(arch, weights, window, arena=arena)
    trace = list(arena.trace)
    p2 = forward(arch, weights, window, arena=arena)
    assert p1 == p2
    assert arena.trace == trace
    computing = [i for i, l in enumerate(arch.layers) if not isinstance(l, Dropout)]
    assert [i for i, _, _ in trace] == computing
    for (_, src, dst), (_, nxt_src, _) in zip(trace, trace[1:]):
        assert src != dst
        assert dst == nxt_src


def test_forward_rejects_bad_inputs():
    arch = seizurenet_arch(4)
    weights = zero_weights(arch)
    with pytest.raises(ValueError, match="shape"):
        forward(arch, weights, np.zeros((3, 256)))
    with pytest.raises(ValueError):
        forward(arch, weights, np.zeros((4, 256)), arena=ActivationArena(100))
    with pytest.raises(ValueError):
        forward(arch, weights, np.zeros((4, 256)), mode="q15")
    eegnet = baseline_archs(4)["eegnet"]
    with pytest.raises(ValueError, match="valid"):
        forward(eegnet, zero_weights(eegnet), np.zeros((4, 256)))


def test_sigmoid_is_monotone_in_final_bias():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(4)
    weights = _random_weights(arch, rng)
    window = _windows(rng, 1)[0]
    last = f"{len(arch.layers) - 2}.bias"
    probs = []
    for bias in (-2.0, -0.5, 0.0, 0.5, 2.0):
        weights.tensors[last] = np.array([bias])
        probs.append(forward(arch, weights, window))
    assert all(a < b for a, b in zip(probs, probs[1:]))


def test_scaled_inputs_stay_finite():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(5)
    weights = _random_weights(arch, rng)
    window = _windows(rng, 1)[0]
    for scale in (1e-3, 1.0, 1e3):
        assert np.isfinite(forward(arch, weights, scale * window))


def test_fold_identity():
    arch = ArchDescriptor("f", (1, 1, 1), (Conv2D(1, 1, 1), BatchNorm(eps=0.0), Sigmoid()))
    weights = WeightSet({"0.kernel": np.full((1, 1, 1, 1), 0.7), "0.bias": np.array([0.1]),
                         "1.gamma": np.ones(1), "1.beta": np.zeros(1),
                         "1.mean": np.zeros(1), "1.var": np.ones(1)})
    folded = fold_batchnorm(arch, weights)
    assert folded.folded
    assert folded.tensors["0.kernel"].item() == 0.7
    assert folded.tensors["0.bias"].item() == 0.1
    assert set(folded.tensors) == {"0.kernel", "0.bias"}


def test_fold_algebra():
    arch = ArchDescriptor("f", (1, 1, 1), (Conv2D(1, 1, 1), BatchNorm(eps=0.0), Sigmoid()))
    weights = WeightSet({"0.kernel": np.ones((1, 1, 1, 1)), "0.bias": np.zeros(1),
                         "1.gamma": np.array([2.0]), "1.beta": np.array([3.0]),
                         "1.mean": np.zeros(1), "1.var": np.ones(1)})
    folded = fold_batchnorm(arch, weights)
    assert folded.tensors["0.kernel"].item() == 2.0
    assert folded.tensors["0.bias"].item() == 3.0


def test_fold_preserves_forward():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(6)
    weights = _random_weights(arch, rng)
    folded = fold_batchnorm(arch, weights)
    folded.check(arch)
    windows = _windows(rng, 100)
    a = predict(arch, weights, windows)
    b = predict(arch, folded, windows)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_fold_needs_running_stats():
    arch = seizurenet_arch(2)
    weights = init_weights(arch, 0)
    del weights.tensors["1.mean"]
    with pytest.raises(ValueError, match="missing"):
        fold_batchnorm(arch, weights)


def test_q15_close_to_float():
    arch = seizurenet_arch(4)
    rng = np.random.default_rng(7)
    weights = _random_weights(arch, rng)
    windows = _windows(rng, 1000)
    q = quantize(arch, weights, windows[:256])
    assert q.folded and q.q15 is not None
    arena = ActivationArena.for_arch(arch, "q15")
    p_float = predict(arch, weights, windows)
    p_q15 = np.array([forward(arch, q, w, "q15", arena) for w in windows])
    assert arena.a.dtype == np.int16
    assert np.max(np.abs(p_q15 - p_float)) <= 0.02
    assert np.all((p_q15 > 0) & (p_q15 < 1))


def test_q15_layers_store_int16():
    arch = seizurenet_arch(2)
    rng = np.random.default_rng(8)
    q = quantize(arch, _random_weights(arch, rng), _windows(rng, 8, E=2))
    for layer in q.q15.layers.values():
        assert layer.kernel.dtype == np.int16
        assert np.max(np.abs(layer.kernel.astype(np.int32))) >= 32767
        assert layer.out_scale > 0 and np.log2(layer.out_scale).is_integer()


def test_to_q15_saturates():
    np.testing.assert_array_equal(to_q15([-2.0, -1.0, 0.5, 1.0, 3.0]), [-32768, -32768, 16384, 32767, 32767])


def test_q15_products_are_accumulated_before_rounding():
    arch = ArchDescriptor("acc", (1, 8, 1), (Conv2D(1, 1, 8), Sigmoid()))
    weights = zero_weights(arch)
    weights.tensors["0.kernel"][0, :, 0, 0] = [1.0] + [0.5] * 7
    lsb = 1.0 / 32768
    window = np.array([[0.0] + [lsb] * 7])
    q = quantize(arch, weights, [window])
    np.testing.assert_array_equal(q.q15.layers[0].kernel[0, :, 0, 0], [32767] + [16384] * 7)
    # seven products of half an LSB each: 3.5 LSB summed, 4 after one rounding, 7 when rounded per product
    p = forward(arch, q, window, "q15")
    assert p == pytest.approx(1.0 / (1.0 + np.exp(-4 * lsb)), abs=1e-12)
    assert abs(p - forward(arch, weights, window)) <= 0.5 * lsb / 4 + 1e-12


def test_weight_file_roundtrip(tmp_path):
    arch = seizurenet_arch(2)
    rng = np.random.default_rng(9)
    weights = _random_weights(arch, rng)
    p = tmp_path / "w.bin"
    save_weights(str(p), arch, weights)
    loaded = load_weights(str(p), arch)
    assert not loaded.folded
    for name, v in weights.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], v)

    windows = _windows(rng, 5, E=2)
    q = quantize(arch, weights, windows)
    save_weights(str(p), arch, q)
    loaded = load_weights(str(p), arch)
    assert loaded.folded and loaded.q15 is not None
    for w in windows:
        assert forward(arch, loaded, w, "q15") == forward(arch, q, w, "q15")


def test_weight_file_errors(tmp_path):
    arch = seizurenet_arch(2)
    p = tmp_path / "w.bin"
    save_weights(str(p), arch, init_weights(arch, 0))
    with pytest.raises(WeightFileError, match="different descriptor"):
        load_weights(str(p), seizurenet_arch(3))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(WeightFileError, match="magic"):
        load_weights(str(bad), arch)
    assert issubclass(WeightFileError, ValueError)


def test_corrupt_weight_body_raises_weight_file_error(tmp_path):
    arch = seizurenet_arch(2)
    p = tmp_path / "w.bin"
    save_weights(str(p), arch, init_weights(arch, 0))
    raw = p.read_bytes()
    head = struct.calcsize("<4sH32sBI")

    for cut in (head + 1, head + 5, len(raw) // 2, len(raw) - 1):
        short = tmp_path / f"cut{cut}.bin"
        short.write_bytes(raw[:cut])
        with pytest.raises(WeightFileError, match="truncated"):
            load_weights(str(short), arch)

    (name_len,) = struct.unpack_from("<H", raw, head)
    code_at = head + 2 + name_len
    bad_code = bytearray(raw)
    bad_code[code_at] = 99
    (tmp_path / "code.bin").write_bytes(bytes(bad_code))
    with pytest.raises(WeightFileError, match="dtype code 99"):
        load_weights(str(tmp_path / "code.bin"), arch)

    (tmp_path / "tail.bin").write_bytes(raw + b"\0\0")
    with pytest.raises(WeightFileError, match="trailing"):
        load_weights(str(tmp_path / "tail.bin"), arch)


def test_weights_check_shapes():
    arch = seizurenet_arch(2)
    weights = init_weights(arch, 0)
    assert set(weights.tensors) == set(param_shapes(arch))
    weights.tensors["0.kernel"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError, match="Shape mismatch"):
        weights.check(arch)
