"""Binary checkpoints: weights, fixed feedback projections and optimizer moments.

Layout (all integers u32 little-endian, all tensors row-major f32 little-endian)::

    b"BRPSNN01"
    topology length, topology bytes (UTF-8)
    input ndim, input dims
    epoch
    learnable layer count K
    K tensors W                      tensor = ndim, dims, data
    feedback flag (u32 0/1), then K tensors B if set
    optimizer flag (u32 0/1), then K x (step t, tensor m, tensor v) if set
    CRC32 of every preceding byte

Loading then saving reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LifParams
from .layers import Network

MAGIC = b"BRPSNN01"


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or corrupted checkpoint files."""


@dataclass
class Checkpoint:
    net: Network
    feedback: dict | None  # learnable index -> B
    optim: dict | None     # learnable index -> (t, m, v)
    epoch: int = 0


def _u32(n: int) -> bytes:
    if not 0 <= n < 2**32:
        raise CheckpointError(f"value {n} does not fit in u32")
    return struct.pack("<I", n)


def _tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return _u32(a.ndim) + b"".join(_u32(d) for d in a.shape) + a.tobytes()


def encode(ck: Checkpoint) -> bytes:
    net = ck.net
    topo = net.topology.encode("utf-8")
    parts = [MAGIC, _u32(len(topo)), topo, _u32(len(net.input_shape))]
    parts += [_u32(d) for d in net.input_shape]
    parts += [_u32(ck.epoch), _u32(len(net.learnable))]
    parts += [_tensor(net.weights[i]) for i in net.learnable]
    parts.append(_u32(ck.feedback is not None))
    if ck.feedback is not None:
        parts += [_tensor(ck.feedback[i]) for i in net.learnable]
    parts.append(_u32(ck.optim is not None))
    if ck.optim is not None:
        for i in net.learnable:
            t, m, v = ck.optim[i]
            parts += [_u32(t), _tensor(m), _tensor(v)]
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self, expect=None) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise CheckpointError(f"implausible tensor rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        if expect is not None and shape != tuple(expect):
            raise CheckpointError(f"tensor shape {shape} does not match expected {tuple(expect)}")
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def decode(buf: bytes, lif: LifParams | None = None) -> Checkpoint:
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    body, footer = buf[:-4], buf[-4:]
    if struct.unpack("<I", footer)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    try:
        topology = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("topology is not valid UTF-8") from exc
    input_shape = tuple(r.u32() for _ in range(r.u32()))
    epoch = r.u32()
    try:
        net = Network.build(topology, input_shape, lif=lif)
    except ValueError as exc:
        raise CheckpointError(f"stored topology is invalid: {exc}") from exc
    if r.u32() != len(net.learnable):
        raise CheckpointError("learnable layer count does not match topology")
    for i in net.learnable:
        net.weights[i] = r.tensor(net.specs[i].weight_shape)
    feedback = None
    if r.u32():
        C = net.num_classes
        feedback = {i: r.tensor((net.specs[i].out_size, C)) for i in net.learnable}
    optim = None
    if r.u32():
        optim = {}
        for i in net.learnable:
            t = r.u32()
            shape = net.specs[i].weight_shape
            optim[i] = (t, r.tensor(shape), r.tensor(shape))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes before footer")
    return Checkpoint(net, feedback, optim, epoch)


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load(path, lif: LifParams | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, lif)


def from_training(net: Network, state) -> Checkpoint:
    """Snapshot a network and its :class:`brpsnn.learn.TrainState`."""
    fb = None if state.feedback is None else dict(state.feedback.mats)
    optim = {i: (o.t, o.m, o.v) for i, o in state.optim.items()}
    return Checkpoint(net, fb, optim, state.epoch)


def to_training(ck: Checkpoint):
    """Rebuild a :class:`brpsnn.learn.TrainState` from a checkpoint."""
    from .learn import FeedbackMatrices, OptimState, TrainState

    fb = None if ck.feedback is None else FeedbackMatrices(dict(ck.feedback))
    if ck.optim is None:
        optim = {i: OptimState.zeros_like(ck.net.weights[i]) for i in ck.net.learnable}
    else:
        optim = {i: OptimState(m.copy(), v.copy(), t) for i, (t, m, v) in ck.optim.items()}
    return TrainState(fb, optim, ck.epoch)
