import numpy as np
import pytest

from gnnpipe import (BatchShape, DeviceSpec, SamplerConfig, SamplingProfile,
                     equal_split_assignment, initial_mapping, predict_iteration,
                     sample_minibatch, t_aggregate, t_load, t_prop, t_sync,
                     t_trainer, t_trans, t_update)
from gnnpipe.perf import expected_shapes
from conftest import random_graph


def shape_of(v0, f0=100, dims=(100, 256, 47)):
    counts = [0] * len(dims)
    counts[0] = v0
    return BatchShape(tuple(counts), (0,) * len(dims), tuple(dims))


CPU = DeviceSpec("cpu0", "cpu", 734, 2.45e9, 205e9)
FPGA = DeviceSpec("fpga0", "accelerator", 2048, 3e8, 77e9,
                  pcie_bandwidth=16e9, pipelined_kernels=True)


def test_device_spec_pcie_rules():
    with pytest.raises(ValueError):
        DeviceSpec("a", "accelerator", 10, 1e9, 1e9)  # missing pcie
    with pytest.raises(ValueError):
        DeviceSpec("c", "cpu", 10, 1e9, 1e9, pcie_bandwidth=1e9)


def test_t_load_examples():
    assert t_load([], 4, 205e9) == 0.0
    two = [shape_of(5000), shape_of(5000)]
    assert t_load(two, 4, 205e9) == pytest.approx(4_000_000 / 205e9, rel=1e-12)
    doubled = [shape_of(10000), shape_of(10000)]
    assert t_load(doubled, 4, 205e9) == pytest.approx(2 * t_load(two, 4, 205e9), rel=1e-12)
    with pytest.raises(ValueError):
        t_load(two, 4, 0.0)


def test_t_trans_examples():
    assert t_trans(shape_of(0), 4, 16e9) == 0.0
    assert t_trans(shape_of(5000), 4, 16e9) == pytest.approx(1.25e-4, rel=1e-12)
    assert t_trans(shape_of(5000), 4, 8e9) == pytest.approx(2.5e-4, rel=1e-12)


def test_t_aggregate_examples():
    shape = BatchShape((0, 0, 0), (10_000, 0, 0), (100, 256, 47))
    got = t_aggregate(shape, 1, 4, 77e9)
    assert got == pytest.approx(1.024e7 / 7.7e10, rel=1e-12)
    zero = BatchShape((0, 0, 0), (0, 0, 0), (100, 256, 47))
    assert t_aggregate(zero, 1, 4, 77e9) == 0.0
    shape2 = BatchShape((0, 0, 0), (10_000, 0, 0), (100, 512, 47))
    assert t_aggregate(shape2, 1, 4, 77e9) == pytest.approx(2 * got, rel=1e-12)


def test_t_update_examples():
    shape = BatchShape((1000, 0, 0), (0, 0, 0), (100, 256, 47))
    got = t_update(shape, 0, 2048, 3e8)
    assert got == pytest.approx(2.56e7 / 6.144e11, rel=1e-12)
    assert t_update(shape, 0, 4096, 3e8) == pytest.approx(got / 2, rel=1e-12)
    empty = BatchShape((0, 0, 0), (0, 0, 0), (100, 256, 47))
    assert t_update(empty, 0, 2048, 3e8) == 0.0


def test_t_trainer_pipelined_collapse():
    # aggregation dominates each layer on a pipelined device: the forward sum
    # collapses to the aggregate terms, backward keeps the layer-1 update.
    shape = BatchShape((100, 50, 10), (500, 200, 0), (8, 8, 8))
    dev = DeviceSpec("x", "accelerator", 10**9, 1e9, 1e3,
                     pcie_bandwidth=1e9, pipelined_kernels=True)
    agg = [t_aggregate(shape, l, 4, dev.mem_bandwidth) for l in (1, 2)]
    upd = [t_update(shape, l, dev.mac_parallelism, dev.frequency) for l in (0, 1)]
    expect = sum(agg) + upd[0] + agg[1]
    assert t_trainer(dev, shape) == pytest.approx(expect, rel=1e-12)


def test_t_trainer_single_layer_structure():
    shape = BatchShape((40, 10), (80, 0), (6, 3))
    dev = DeviceSpec("c", "cpu", 100, 1e9, 1e9)
    agg1 = t_aggregate(shape, 1, 4, dev.mem_bandwidth)
    upd1 = t_update(shape, 0, dev.mac_parallelism, dev.frequency)
    # non-pipelined: forward = agg + upd, backward = upd
    assert t_trainer(dev, shape) == pytest.approx(agg1 + upd1 + upd1, rel=1e-12)


def test_t_trainer_two_layer_independent_reimplementation():
    shape = BatchShape((1716, 286, 26), (1716, 286, 0), (100, 256, 47))
    for dev in (CPU, FPGA):
        s = 4
        a1 = shape.edge_counts[0] * shape.dims[1] * s / dev.mem_bandwidth
        a2 = shape.edge_counts[1] * shape.dims[2] * s / dev.mem_bandwidth
        u1 = shape.vertex_counts[0] * shape.dims[0] * shape.dims[1] / (
            dev.mac_parallelism * dev.frequency)
        u2 = shape.vertex_counts[1] * shape.dims[1] * shape.dims[2] / (
            dev.mac_parallelism * dev.frequency)
        if dev.pipelined_kernels:
            expect = max(a1, u1) + max(a2, u2) + u1 + max(a2, u2)
        else:
            expect = (a1 + u1) + (a2 + u2) + u1 + (a2 + u2)
        assert t_trainer(dev, shape) == pytest.approx(expect, rel=1e-12)


def test_t_sync_examples():
    got = t_sync((100, 256, 47), 4, 16e9)
    assert got == pytest.approx((25600 + 12032) * 4 * 2 / 16e9, rel=1e-12)
    assert t_sync((100,), 4, 16e9) == 0.0
    assert t_sync((100, 256, 47), 8, 16e9) == pytest.approx(2 * got, rel=1e-12)


def test_t_prop():
    assert t_prop([1.0, 2.0, 3.0], 0.5) == 3.5
    assert t_prop([2.0], 0.1) == pytest.approx(2.1)
    with pytest.raises(ValueError):
        t_prop([], 0.0)


def test_expected_shapes_fanout_bounds():
    shape = BatchShape.expected(1024, [25, 10], (100, 256, 47))
    assert shape.vertex_counts == (1024 * 26 * 11, 1024 * 26, 1024)
    assert shape.edge_counts == (1024 * 26 * 11, 1024 * 26, 0)


def make_platform(cpu_nf=1.0, accel_nf=4.0):
    cpu = DeviceSpec("cpu0", "cpu", 1000, int(cpu_nf * 1e9), 1e15)
    accel = DeviceSpec("acc0", "accelerator", 1000, int(accel_nf * 1e9), 1e15,
                       pcie_bandwidth=1e14, pipelined_kernels=True)
    return [cpu, accel]


def predict_for(platform, assignment, fanouts=(25, 10), dims=(100, 256, 47),
                profile=None):
    profile = profile or SamplingProfile.linear(1e-12)
    shapes = expected_shapes(assignment, list(fanouts), dims)
    return predict_iteration(platform, assignment, shapes, profile, dims)


def test_predict_execution_is_stage_max():
    # stage times (2, 3, 5, 4) ms: feed them via a degenerate profile and a
    # platform crafted so each stage hits the target value exactly.
    platform = make_platform()
    assignment = equal_split_assignment(platform, 64, 4)
    pred = predict_for(platform, assignment)
    stages = [pred.t_samp, pred.t_load, pred.t_trans or 0.0, pred.t_prop]
    assert pred.t_execution == max(stages)
    assert pred.t_execution in stages


def test_predict_mteps_arithmetic():
    # one trainer, 11,000 edges total, iteration time 0.01 s -> 1.1 MTEPS
    platform = [DeviceSpec("cpu0", "cpu", 1000, 1e9, 1e12)]
    assignment = equal_split_assignment(platform, 1000, 4)
    dims = (10, 10)
    shapes = {"cpu0": BatchShape((11000, 1000), (11000, 0), dims)}
    profile = SamplingProfile(np.array([1.0]), np.array([1.0]), np.array([[0.01]]))
    pred = predict_iteration(platform, assignment, shapes, profile, dims)
    assert pred.t_execution == pytest.approx(0.01)
    assert pred.throughput_mteps == pytest.approx(1.1)


def test_predict_zero_edges_zero_mteps():
    platform = [DeviceSpec("cpu0", "cpu", 1000, 1e9, 1e12)]
    assignment = equal_split_assignment(platform, 32, 4)
    dims = (4, 2)
    shapes = {"cpu0": BatchShape((0, 0), (0, 0), dims)}
    profile = SamplingProfile(np.array([1.0]), np.array([1.0]), np.array([[0.001]]))
    pred = predict_iteration(platform, assignment, shapes, profile, dims)
    assert pred.throughput_mteps == 0.0


def test_initial_mapping_symmetric_accelerators_equal_split():
    cpu = DeviceSpec("cpu0", "cpu", 1000, 1e9, 1e15)
    acc1 = DeviceSpec("a1", "accelerator", 1000, 4e9, 1e15, pcie_bandwidth=1e14,
                      pipelined_kernels=True)
    acc2 = DeviceSpec("a2", "accelerator", 1000, 4e9, 1e15, pcie_bandwidth=1e14,
                      pipelined_kernels=True)
    profile = SamplingProfile.linear(1e-12)
    mapping = initial_mapping([cpu, acc1, acc2], 576, [5, 5], (16, 16, 4),
                              profile, cpu_workers=4)
    assert mapping.batch_sizes["a1"] == mapping.batch_sizes["a2"]


def test_initial_mapping_single_device_gets_all():
    cpu = DeviceSpec("cpu0", "cpu", 1000, 1e9, 1e15)
    mapping = initial_mapping([cpu], 128, [5, 5], (16, 16, 4),
                              SamplingProfile.linear(1e-12), cpu_workers=4)
    assert mapping.batch_sizes == {"cpu0": 128}


def test_initial_mapping_favors_faster_device_and_matches_exhaustive():
    platform = make_platform(cpu_nf=1.0, accel_nf=4.0)
    profile = SamplingProfile.linear(1e-12)
    dims, fanouts = (16, 16, 4), [5, 5]
    mapping = initial_mapping(platform, 512, fanouts, dims, profile, cpu_workers=4)
    assert mapping.batch_sizes["acc0"] >= 2 * mapping.batch_sizes["cpu0"]

    best = None
    for c in range(0, 513, 32):
        asn = mapping.copy()
        asn.batch_sizes["cpu0"], asn.batch_sizes["acc0"] = c, 512 - c
        t = predict_for(platform, asn, fanouts, dims, profile).t_execution
        if best is None or t < best[0]:
            best = (t, c)
    assert mapping.batch_sizes["cpu0"] == best[1]


def test_initial_mapping_min_share_error():
    platform = make_platform()
    with pytest.raises(ValueError):
        initial_mapping(platform, 32, [5, 5], (16, 16, 4),
                        SamplingProfile.linear(), cpu_workers=4, min_share=64)


def test_initial_mapping_not_worse_than_equal_split():
    rng = np.random.default_rng(5)
    for _ in range(5):
        platform = make_platform(cpu_nf=float(rng.uniform(0.5, 2)),
                                 accel_nf=float(rng.uniform(0.5, 8)))
        profile = SamplingProfile.linear(10 ** rng.uniform(-12, -8))
        mapping = initial_mapping(platform, 256, [4, 4], (8, 8, 4), profile, 4)
        equal = equal_split_assignment(platform, 256, 4)
        t_map = predict_for(platform, mapping, (4, 4), (8, 8, 4), profile).t_execution
        t_eq = predict_for(platform, equal, (4, 4), (8, 8, 4), profile).t_execution
        assert t_map <= t_eq + 1e-15


def test_homogeneity_scaling():
    dims, fanouts = (16, 16, 4), [5, 5]
    k = 3.0
    base = [DeviceSpec("cpu0", "cpu", 100, 1e9, 1e10),
            DeviceSpec("a0", "accelerator", 100, 2e9, 1e10, pcie_bandwidth=1e10)]
    scaled = [DeviceSpec("cpu0", "cpu", 100, k * 1e9, k * 1e10),
              DeviceSpec("a0", "accelerator", 100, k * 2e9, k * 1e10,
                         pcie_bandwidth=k * 1e10)]
    prof_base = SamplingProfile.linear(1e-7)
    prof_scaled = SamplingProfile.linear(1e-7 / k)
    asn = equal_split_assignment(base, 256, 4)
    p1 = predict_for(base, asn, fanouts, dims, prof_base)
    p2 = predict_for(scaled, asn, fanouts, dims, prof_scaled)
    for a, b in ((p1.t_samp, p2.t_samp), (p1.t_load, p2.t_load),
                 (p1.t_trans, p2.t_trans), (p1.t_prop, p2.t_prop),
                 (p1.t_execution, p2.t_execution)):
        assert a == pytest.approx(k * b, rel=1e-9)
    m1 = initial_mapping(base, 256, fanouts, dims, prof_base, 4)
    m2 = initial_mapping(scaled, 256, fanouts, dims, prof_scaled, 4)
    assert m1.batch_sizes == m2.batch_sizes


def test_trainer_monotone_in_edges():
    dims = (8, 8, 4)
    base = BatchShape((100, 40, 8), (200, 60, 0), dims)
    more = BatchShape((100, 40, 8), (300, 60, 0), dims)
    for dev in (CPU, FPGA):
        assert t_trainer(dev, more) >= t_trainer(dev, base)


def test_shape_from_minibatch_counts():
    rng = np.random.default_rng(8)
    g = random_graph(rng, num_vertices=50, avg_degree=5)
    batch = sample_minibatch(g, np.arange(6), SamplerConfig([3, 2], 6, 0), 0)
    shape = BatchShape.from_minibatch(batch, (5, 4, 3))
    assert shape.vertex_counts == tuple(v.size for v in batch.layer_vertices)
    assert shape.edge_counts[-1] == 0
    assert shape.total_edges() == batch.total_edges()


def test_profile_interpolation_and_clamp():
    profile = SamplingProfile([1, 2], [10, 20], [[1.0, 2.0], [0.5, 1.0]])
    assert profile.time(1, 10) == 1.0
    assert profile.time(2, 20) == 1.0
    assert profile.time(1.5, 15) == pytest.approx((1.5 + 0.75) / 2)
    assert profile.time(0.5, 5) == 1.0  # clamps to the nearest corner
    assert profile.time(9, 99) == 1.0


def test_profile_csv_roundtrip(tmp_path):
    profile = SamplingProfile.linear(3e-6, (1, 2, 4), (10, 100))
    path = tmp_path / "profile.csv"
    profile.to_csv(path)
    loaded = SamplingProfile.from_csv(path)
    assert np.array_equal(loaded.worker_counts, profile.worker_counts)
    assert np.array_equal(loaded.batch_sizes, profile.batch_sizes)
    assert np.array_equal(loaded.seconds, profile.seconds)


def test_profile_incomplete_grid_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("worker_count,batch_size,seconds\n1,10,0.5\n2,20,0.25\n")
    with pytest.raises(ValueError, match="incomplete"):
        SamplingProfile.from_csv(path)
