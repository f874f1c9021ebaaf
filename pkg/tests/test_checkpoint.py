import struct
import zlib

import numpy as np
import pytest

from brpsnn import checkpoint as ckpt
from brpsnn.data import Dataset
from brpsnn.layers import Network
from brpsnn.learn import TrainConfig, TrainState, evaluate, train_epoch


def trained(seed=0):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.random((20, 1, 7, 7)).astype(np.float32), np.arange(20) % 3, 3)
    net = Network.build("Cov3*3x2-S2-FC5-FC3", (1, 7, 7), seed=seed, init_scale=3.0)
    cfg = TrainConfig(T=5, batch=10, eta_conv=1e-2, eta_fc=1e-2)
    state = TrainState.create(net, cfg)
    train_epoch(net, data, cfg, state)
    return net, state, data, cfg


class TestRoundTrip:
    def test_save_load_save_identical(self, tmp_path):
        net, state, *_ = trained()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save(a, ckpt.from_training(net, state))
        ck = ckpt.load(a)
        ckpt.save(b, ck)
        assert a.read_bytes() == b.read_bytes()

    def test_contents_restored(self, tmp_path):
        net, state, data, cfg = trained()
        p = tmp_path / "m.ckpt"
        ckpt.save(p, ckpt.from_training(net, state))
        ck = ckpt.load(p)
        assert ck.net.topology == net.topology and ck.net.input_shape == net.input_shape
        assert ck.epoch == 1
        for i in net.learnable:
            np.testing.assert_array_equal(ck.net.weights[i], net.weights[i])
            np.testing.assert_array_equal(ck.feedback[i], state.feedback.mats[i])
            t, m, v = ck.optim[i]
            assert t == state.optim[i].t
            np.testing.assert_array_equal(m, state.optim[i].m)
        restored = ckpt.to_training(ck)
        assert restored.feedback.digest() == state.feedback.digest()
        assert evaluate(ck.net, data, cfg).accuracy == evaluate(net, data, cfg).accuracy

    def test_resume_matches_uninterrupted(self, tmp_path):
        net, state, data, cfg = trained()
        p = tmp_path / "m.ckpt"
        ckpt.save(p, ckpt.from_training(net, state))
        ck = ckpt.load(p)
        st2 = ckpt.to_training(ck)
        train_epoch(net, data, cfg, state)
        train_epoch(ck.net, data, cfg, st2)
        for i in net.learnable:
            np.testing.assert_array_equal(ck.net.weights[i], net.weights[i])

    def test_without_feedback_or_optimizer(self, tmp_path):
        net = Network.build("FC4-FC2", (3,), seed=0)
        p = tmp_path / "bare.ckpt"
        ckpt.save(p, ckpt.Checkpoint(net, None, None))
        ck = ckpt.load(p)
        assert ck.feedback is None and ck.optim is None
        assert ckpt.to_training(ck).optim[0].t == 0


class TestCorruption:
    def payload(self, tmp_path):
        net, state, *_ = trained()
        p = tmp_path / "m.ckpt"
        ckpt.save(p, ckpt.from_training(net, state))
        return p, bytearray(p.read_bytes())

    def test_layout_header(self, tmp_path):
        _, raw = self.payload(tmp_path)
        assert raw[:8] == b"BRPSNN01"
        (n,) = struct.unpack("<I", raw[8:12])
        assert raw[12:12 + n] == b"Cov3*3x2-S2-FC5-FC3"
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(bytes(raw[:-4]))

    def test_bad_magic(self, tmp_path):
        p, raw = self.payload(tmp_path)
        raw[0:8] = b"BRPSNN02"
        p.write_bytes(raw)
        with pytest.raises(ckpt.CheckpointError, match="magic"):
            ckpt.load(p)

    def test_flipped_byte(self, tmp_path):
        p, raw = self.payload(tmp_path)
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(raw)
        with pytest.raises(ckpt.CheckpointError, match="CRC"):
            ckpt.load(p)

    @pytest.mark.parametrize("cut", [1, 10, 100])
    def test_truncated(self, tmp_path, cut):
        p, raw = self.payload(tmp_path)
        p.write_bytes(raw[:-cut])
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(p)

    def test_valid_crc_wrong_shape(self, tmp_path):
        net = Network.build("FC4-FC2", (3,), seed=0)
        ck = ckpt.Checkpoint(net, None, None)
        raw = bytearray(ckpt.encode(ck)[:-4])
        # rewrite the first weight tensor's leading dim from 4 to 5
        off = raw.index(struct.pack("<II", 2, 4))
        raw[off + 4:off + 8] = struct.pack("<I", 5)
        raw += struct.pack("<I", zlib.crc32(bytes(raw)))
        with pytest.raises(ckpt.CheckpointError, match="shape"):
            ckpt.decode(bytes(raw))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(tmp_path / "nope.ckpt")
