import math

import numpy as np
import pytest

from brpsnn.data import Dataset
from brpsnn.encode import label_encode
from brpsnn.layers import Network, network_forward
from brpsnn.learn import TrainConfig, TrainState, train_epoch
from brpsnn.metrics import (
    CSV_COLUMNS,
    EpochMetrics,
    OpCount,
    RunMetrics,
    SilentCounter,
    count_ops,
    emit_csv,
    fit_affine,
    silent_fraction,
)


class TestSilentFraction:
    def test_zero_weight_network_is_silent(self):
        net = Network.build("Cov3*3x4-FC8-FC3", (1, 6, 6), seed=0)
        for w in net.weights:
            if w is not None:
                w[:] = 0
        x = np.ones((10, 5, 1, 6, 6), np.float32)
        _, trace = network_forward(net, x, capture=True)
        sc = SilentCounter()
        sc.update(trace, net)
        assert all(v == 1.0 for v in sc.fractions().values())
        assert sc.by_kind(net) == (1.0, 1.0)

    def test_label_copy_output(self):
        # identity weights copy a one-hot label train to the output layer
        net = Network.build("FC10", (10,), seed=0)
        net.weights[0][:] = np.eye(10)
        labels = np.arange(20) % 10
        x = label_encode(labels, 10, 8).data.astype(np.float32)
        _, trace = network_forward(net, x, capture=True)
        assert silent_fraction(trace.spike_totals(0)) == pytest.approx(0.9)

    def test_averaged_over_samples(self):
        totals = np.array([[0, 0, 1, 1], [0, 3, 3, 3]])
        assert silent_fraction(totals) == pytest.approx((0.5 + 0.25) / 2)

    def test_counter_weights_batches_by_size(self):
        net = Network.build("FC4-FC2", (3,), seed=0, init_scale=3.0)
        rng = np.random.default_rng(0)
        xs = [(rng.random((6, b, 3)) < 0.5).astype(np.float32) for b in (2, 5)]
        sc = SilentCounter()
        for x in xs:
            _, tr = network_forward(net, x, capture=True)
            sc.update(tr, net)
        _, whole = network_forward(net, np.concatenate(xs, axis=1), capture=True)
        assert sc.fractions()[0] == pytest.approx(silent_fraction(whole.spike_totals(0)))


class TestOpCount:
    def test_zero_epoch_is_zero(self):
        ops = OpCount("brp", 2)
        assert ops.forward_ops == 0 and ops.update_ops == 0

    def test_merge(self):
        a, b = OpCount("brp", 1), OpCount("brp", 1)
        a.add_forward(0, 5)
        b.add_forward(0, 7)
        b.add_update(1, 3)
        a.merge(b)
        assert a.forward_ops == 12 and a.update_ops == 3

    @pytest.mark.parametrize("mode", ["brp", "err", "sign", "pseudo_bp"])
    @pytest.mark.parametrize("topology,shape", [
        ("FC16-FC16-FC4", (12,)),
        ("Cov3*3x2-S2-FC8-FC4", (1, 8, 8)),
        ("Cov1*3x3-FC4", (2, 9)),
    ])
    def test_instrumentation_matches_closed_form(self, mode, topology, shape):
        n = 23
        rng = np.random.default_rng(0)
        data = Dataset(rng.random((n,) + shape).astype(np.float32), np.arange(n) % 4, 4)
        net = Network.build(topology, shape, seed=1, init_scale=3.0)
        cfg = TrainConfig(mode=mode, T=6, batch=10)
        m = train_epoch(net, data, cfg, TrainState.create(net, cfg))
        ref = count_ops(mode, Network.build(topology, shape), 6, n)
        assert m.fwd_ops == ref.forward_ops
        assert m.upd_ops == ref.update_ops

    def test_brp_fc_stack_is_affine_in_depth(self):
        ks = [2, 4, 8]
        ups = []
        for k in ks:
            net = Network.build("-".join(["FC64"] * (k - 1) + ["FC10"]), (64,))
            ups.append(count_ops("brp", net, 20, 1).update_ops)
        a, b, r2 = fit_affine(ks, ups)
        assert r2 > 0.999999
        assert a == pytest.approx(64 * 10 + 64 * 64)

    def test_forward_is_dense_macs(self):
        net = Network.build("Cov5*5x28-FC1000-FC10", (1, 28, 28))
        ops = count_ops("brp", net, 20, 1)
        assert ops.forward[0] == 20 * 28 * 24 * 24 * 25
        assert ops.forward[1] == 20 * 28 * 24 * 24 * 1000
        assert ops.forward[2] == 20 * 1000 * 10


class TestFitAffine:
    def test_exact_line(self):
        a, b, r2 = fit_affine([1, 2, 3], [5, 7, 9])
        assert (a, b, r2) == pytest.approx((2, 3, 1))

    def test_noisy(self):
        _, _, r2 = fit_affine([1, 2, 3, 4], [1, 4, 9, 16])
        assert r2 < 1


class TestCsv:
    def test_empty_run_header_only(self, tmp_path):
        p = tmp_path / "m.csv"
        emit_csv(RunMetrics(), p)
        assert p.read_bytes() == (",".join(CSV_COLUMNS) + "\n").encode()

    def test_three_epochs_four_lines(self, tmp_path):
        rm = RunMetrics()
        for e in range(1, 4):
            rm.add(EpochMetrics(e, "test", 0.5, 0.1, 0.4, math.nan, 10, 20, 3))
        p = tmp_path / "m.csv"
        emit_csv(rm, p)
        raw = p.read_bytes()
        assert raw.count(b"\n") == 4 and b"\r" not in raw
        assert raw.splitlines()[1] == b"1,test,0.500000,0.100000,0.400000,,10,20,3"

    def test_reemission_is_byte_identical(self, tmp_path):
        rm = RunMetrics()
        rm.add(EpochMetrics(1, "train", 1 / 3, 0.25))
        emit_csv(rm, tmp_path / "a.csv")
        emit_csv(rm, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_accuracy_range_checked(self):
        with pytest.raises(ValueError):
            RunMetrics().add(EpochMetrics(1, "train", 1.5))
