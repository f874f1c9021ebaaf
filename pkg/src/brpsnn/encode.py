"""Spike encoding of analog inputs and labels, and firerate readout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ContractError

POLARITIES = ("intensity", "literal")


@dataclass(frozen=True)
class EncoderConfig:
    t_window: int = 20
    alpha: float = 1.0
    polarity: str = "intensity"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.t_window < 1:
            raise ContractError("t_window must be >= 1")
        if self.polarity not in POLARITIES:
            raise ContractError(f"unknown polarity {self.polarity!r}")


@dataclass
class SpikeTrain:
    """Binary spikes with time on axis 0."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim < 1 or self.data.shape[0] < 1:
            raise ContractError("a spike train needs at least one time step")

    @property
    def t_window(self) -> int:
        return self.data.shape[0]

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0, 1)).all())


def rate_encode(raw, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.uint8) -> SpikeTrain:
    """Bernoulli spikes drawn independently per element and step.

    ``intensity``: spike iff u < alpha * raw. ``literal``: spike iff
    raw < alpha * u (the inverted comparison, kept for fidelity runs).
    """
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0):
        raise ContractError("raw values must be normalized to [0, 1]")
    u = rng.random((cfg.t_window,) + raw.shape, dtype=np.float32)
    if cfg.polarity == "intensity":
        spikes = u < np.float32(cfg.alpha) * raw
    else:
        spikes = raw < np.float32(cfg.alpha) * u
    return SpikeTrain(spikes.astype(dtype))


def label_encode(cls, num_classes: int, T: int) -> SpikeTrain:
    """Target neuron fires at every step, the rest stay silent.

    ``cls`` may be a single index or an array of indices (batched output
    has shape ``[T, batch, num_classes]``).
    """
    cls = np.asarray(cls)
    if np.any(cls < 0) or np.any(cls >= num_classes):
        raise ContractError(f"class index out of range for {num_classes} classes")
    if T < 1:
        raise ContractError("T must be >= 1")
    onehot = np.eye(num_classes, dtype=np.uint8)[cls]
    return SpikeTrain(np.broadcast_to(onehot, (T,) + onehot.shape).copy())


def firerate(train) -> np.ndarray:
    data = train.data if isinstance(train, SpikeTrain) else np.asarray(train)
    return data.mean(axis=0, dtype=np.float64)
