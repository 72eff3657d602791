import logging

import numpy as np
import pytest

from net import ActivationArena, ArchDescriptor, Conv2D, Dense, MaxPool2D, ReLU, Sigmoid, baseline_archs, forward, \
    init_weights, quantize, seizurenet_arch
from resources import (HardwareProfile, MemoryModel, compare_architectures, count_ops, estimate_power,
                       feasibility_report, memory_footprint, preproc_cycles, realtime_check, summarize_architectures,
                       truenorth_power, weight_storage_check)


def test_count_ops_known_values():
    single = count_ops(ArchDescriptor("c", (1, 1, 10), (Conv2D(1, 1, 1),)))
    assert single[0].macs == 10
    assert single[0].bias_adds == 1

    costs = count_ops(seizurenet_arch(4))
    assert costs[0].macs == 240 * 20 * 4 * 17 == 326_400
    assert costs[3].kind == "maxpool2d"
    assert costs[3].compares == 60 * 20 * 3 == 3_600
    assert costs[2].compares == 4_800

    dense = count_ops(ArchDescriptor("d", (1, 6, 2), (Dense(5),)))
    assert dense[0].macs == 60


def test_folded_batchnorm_costs_nothing():
    arch = seizurenet_arch(4)
    folded = count_ops(arch)
    unfolded = count_ops(arch, model=MemoryModel(fold_bn=False))
    assert all(c.param_bytes == 0 and c.misc_ops == 0 for c in folded if c.kind == "batchnorm")
    assert sum(c.param_bytes for c in unfolded) - sum(c.param_bytes for c in folded) == 200 * 2


@pytest.mark.parametrize("arch", [seizurenet_arch(4), baseline_archs(4)["acharya"]], ids=["seizurenet", "acharya"])
def test_mac_count_matches_instrumented_forward(arch):
    rng = np.random.default_rng(0)
    weights = init_weights(arch, 0)
    window = rng.uniform(-1, 1, arch.input_shape[:2])
    arena = ActivationArena.for_arch(arch)
    forward(arch, weights, window, arena=arena)
    assert arena.macs == sum(c.macs for c in count_ops(arch))

    q15_arena = ActivationArena.for_arch(arch, "q15")
    forward(arch, quantize(arch, weights, [window]), window, "q15", q15_arena)
    assert q15_arena.macs == arena.macs


def test_arena_matches_engine_allocation():
    for arch in [seizurenet_arch(4), seizurenet_arch(1), baseline_archs(4)["acharya"]]:
        mem = memory_footprint(arch)
        assert mem.arena_elements == ActivationArena.for_arch(arch).size
        assert mem.arena_bytes == ActivationArena.for_arch(arch, "q15").nbytes


def test_seizurenet_memory_is_feasible():
    mem = memory_footprint(seizurenet_arch(4))
    assert mem.param_bytes == 3421 * 2
    assert mem.arena_bytes == 2 * 4800 * 2
    assert mem.preproc_ring_bytes == 2 * 600 * 4 * 4
    assert mem.lut_bytes == 0
    assert mem.total_bytes == 6842 + 19200 + 19200
    assert mem.feasible


def test_preprocessing_ring_per_mode():
    arch = seizurenet_arch(4)
    exact = memory_footprint(arch, preproc_mode="exact")
    assert exact.preproc_ring_bytes == 600 * 256 * 4 * 4
    assert not exact.feasible
    assert memory_footprint(arch, preproc_mode="zero_mean").preproc_ring_bytes == 600 * 4 * 4
    assert memory_footprint(arch, MemoryModel(nonlinearity="tanh")).lut_bytes == 512


def test_empty_network_is_preproc_ring_only():
    mem = memory_footprint(ArchDescriptor("empty", (4, 256, 1), ()))
    assert mem.total_bytes == mem.preproc_ring_bytes == 19200


def test_binary_weights_exceed_budget():
    check = weight_storage_check()
    assert check.required_bytes == 525_000
    assert not check.feasible


def test_realtime_boundary():
    assert realtime_check(8e6).utilization == 1.0
    assert realtime_check(8e6).passes
    assert not realtime_check(8e6 + 1).passes
    assert realtime_check(4e6, period_s=2.0).utilization == 0.25


def test_seizurenet_runs_in_realtime_and_acharya_costs_more():
    seizurenet = feasibility_report(seizurenet_arch(4))
    acharya = feasibility_report(baseline_archs(4)["acharya"])
    assert seizurenet.realtime.passes
    assert seizurenet.realtime.utilization < 0.1
    assert seizurenet.feasible
    assert acharya.total_cycles > 2 * seizurenet.total_cycles
    assert seizurenet.total_cycles == pytest.approx(seizurenet.preproc_cycles + seizurenet.forward_cycles)
    assert seizurenet.total_macs == sum(c.macs for c in seizurenet.layers)


def test_acharya_memory_is_dominated_by_dense_layers():
    acharya = baseline_archs(4)["acharya"]
    report = feasibility_report(acharya)
    assert report.dense_param_share >= 0.70
    assert feasibility_report(acharya, MemoryModel(precision="float32")).dense_param_share >= 0.70

    same_precision = feasibility_report(acharya, MemoryModel(baseline_precision=None))
    assert same_precision.dense_param_share < report.dense_param_share
    assert report.memory.param_bytes == 2 * same_precision.memory.param_bytes

    seizurenet = feasibility_report(seizurenet_arch(4))
    assert seizurenet.memory.param_bytes == 6842
    with pytest.raises(ValueError, match="baseline precision"):
        MemoryModel(baseline_precision="int4")


def test_stft_frontend_costs_preprocessing_cycles():
    kiral = baseline_archs(4)["kiral"]
    seizurenet = seizurenet_arch(4)
    assert preproc_cycles(kiral) > preproc_cycles(seizurenet)
    table = summarize_architectures([seizurenet, kiral])
    assert table["runtime_ratio"].iloc[0] == 1.0
    assert table["runtime_ratio"].iloc[1] > 0


def test_power_estimates():
    assert estimate_power(8e6) == pytest.approx(2.832e-3)
    assert estimate_power(0.0) == pytest.approx(1.5e-6)
    assert estimate_power(4e6) == pytest.approx(0.5 * 2.832e-3 + 0.5 * 1.5e-6)
    with pytest.raises(ValueError):
        estimate_power(9e6)
    lo, hi = truenorth_power()
    assert lo == pytest.approx(4.296e-3)
    assert hi == pytest.approx(7.518e-3)
    p = feasibility_report(seizurenet_arch(4)).power_w
    assert 1.5e-6 < p < lo


def test_feasibility_is_monotone_in_budget():
    arch = baseline_archs(4)["acharya"]
    model = MemoryModel(precision="float32")
    flags = [feasibility_report(arch, model, HardwareProfile(memory_budget_bytes=b)).memory.feasible
             for b in (100_000, 262_144, 600_000, 1_000_000)]
    assert flags == sorted(flags)
    assert flags[-1]


def test_infeasible_report_logs(caplog):
    with caplog.at_level(logging.WARNING):
        report = feasibility_report(seizurenet_arch(4), MemoryModel(preproc_mode="exact"))
    assert not report.feasible
    assert "budget" in caplog.text


def test_compare_architectures_table():
    arch = seizurenet_arch(4)
    table = compare_architectures([arch])
    assert list(table.columns) == ["arch", "block", "kind", "memory_bytes", "cycles"]
    assert table["block"].iloc[0] == "preprocessing"
    assert table["block"].iloc[-1] == "arena"
    assert table["memory_bytes"].sum() == pytest.approx(memory_footprint(arch).total_bytes)
    assert table["cycles"].sum() == pytest.approx(feasibility_report(arch).total_cycles)
    layer_blocks = [b for b in table["block"] if b[0].isdigit()]
    assert [int(b.split(":")[0]) for b in layer_blocks] == list(range(len(arch.layers)))


def test_profile_and_model_validation():
    with pytest.raises(ValueError, match="Unknown hardware profile keys"):
        HardwareProfile.from_dict({"clock": 1})
    with pytest.raises(ValueError):
        HardwareProfile(supply_V=0)
    with pytest.raises(ValueError):
        MemoryModel(precision="int4")
    assert MemoryModel.from_dict({"precision": "float32"}).bytes_per_weight == 4.0


def test_count_ops_is_static():
    arch = ArchDescriptor("s", (2, 16, 1), (Conv2D(2, 2, 3), ReLU(), MaxPool2D(1, 2), Conv2D(1, 1, 7), Sigmoid()))
    a = count_ops(arch)
    b = count_ops(arch, input_shape=(2, 16, 1))
    assert [c.macs for c in a] == [c.macs for c in b] == [14 * 2 * 6, 0, 0, 7 * 2, 0]
