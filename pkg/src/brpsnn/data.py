"""Dataset ingestion, synthetic temporal tasks and deterministic batching.

Analog samples are stored as float32 in [0, 1] with shape ``[N, *features]``.
Event samples are already spikes: uint8 with shape ``[N, T, *features]``.

Event-stream text format::

    classes=<n> width=<w> height=<h> t_bins=<T>
    label:<k> [duration=<D>]
    <t> <x> <y> <p>
    ...
    label:<k>
    ...

Lines starting with ``#`` are ignored. Timestamps within a sample must be
non-decreasing. Each sample is binned into ``t_bins`` equal-width bins over
``[0, D)`` when ``duration`` is given, otherwise over the span from its first
to its last event. A bin is 1 when at least one event (of either polarity)
falls in it. Frames are ``[1, h, w]``, or ``[1, w]`` when ``h == 1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """A data file does not match its declared format."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    modality: str = "analog"  # analog | event
    name: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataFormatError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataFormatError("label outside the class range")
        if self.modality not in ("analog", "event"):
            raise DataFormatError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_shape(self) -> tuple:
        """Per-step input shape seen by the network."""
        return tuple(self.x.shape[2:] if self.modality == "event" else self.x.shape[1:])

    @property
    def t_bins(self) -> int | None:
        return self.x.shape[1] if self.modality == "event" else None

    def subset(self, n: int, start: int = 0) -> Dataset:
        """A fixed, contiguous slice of ``n`` samples."""
        sl = slice(start, start + n)
        return Dataset(self.x[sl], self.y[sl], self.num_classes, self.modality, self.name)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Per-feature min-max scaling to [0, 1] across samples (constant features map to 0)."""
    x = np.asarray(x, dtype=np.float32)
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return ((x - lo) / span).astype(np.float32)


# -- IDX / CIFAR ---------------------------------------------------------------


def _read_idx_file(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DataFormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def read_idx(images_path, labels_path) -> Dataset:
    """MNIST-style IDX pair (decompressed). Pixels scaled to [0, 1]."""
    images = _read_idx_file(images_path, IDX_IMAGES, 3)
    labels = _read_idx_file(labels_path, IDX_LABELS, 1)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    return Dataset(x, labels.astype(np.int64), 10, "analog", Path(images_path).name)


def read_cifar10_bin(paths) -> Dataset:
    """CIFAR-10 binary batches: 3073-byte records (label, then 3x32x32 pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() > 9:
            raise DataFormatError(f"{p}: label byte above 9")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    x = np.concatenate(xs) if xs else np.zeros((0, 3, 32, 32), np.float32)
    y = np.concatenate(ys) if ys else np.zeros(0, np.int64)
    return Dataset(x, y, 10, "analog", "cifar10")


# -- event streams --------------------------------------------------------------


def _parse_header(line: str, path) -> dict:
    fields = {}
    for part in line.split():
        key, sep, val = part.partition("=")
        if not sep:
            raise DataFormatError(f"{path}: malformed header field {part!r}")
        try:
            fields[key] = int(val)
        except ValueError:
            raise DataFormatError(f"{path}: header field {key} is not an integer") from None
    missing = {"classes", "width", "height", "t_bins"} - fields.keys()
    if missing:
        raise DataFormatError(f"{path}: header missing {sorted(missing)}")
    return fields


def _bin_sample(events, duration, T, h, w, out_h, out_w, frame_shape, path):
    frames = np.zeros((T,) + frame_shape, dtype=np.uint8)
    if not events:
        return frames
    ev = np.asarray(events, dtype=np.float64)
    t, x, y = ev[:, 0], ev[:, 1].astype(np.int64), ev[:, 2].astype(np.int64)
    if duration is not None and (t[0] < 0 or t[-1] >= duration):
        raise DataFormatError(f"{path}: event timestamp outside [0, {duration})")
    start = 0.0 if duration is not None else t[0]
    span = duration if duration is not None else t[-1] - t[0]
    if span > 0:
        bins = np.minimum(np.floor((t - start) * T / span).astype(np.int64), T - 1)
    else:
        bins = np.zeros(len(t), dtype=np.int64)
    xs = x * out_w // w
    ys = y * out_h // h
    if len(frame_shape) == 2:
        frames[bins, 0, xs] = 1
    else:
        frames[bins, 0, ys, xs] = 1
    return frames


def read_event_stream(path, resize: tuple | None = None) -> Dataset:
    """Parse an event-stream file into binned binary frames.

    ``resize=(out_h, out_w)`` downsamples coordinates by integer scaling.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise DataFormatError(f"{path}: missing header")
    hdr = _parse_header(body[0], path)
    n_cls, w, h, T = hdr["classes"], hdr["width"], hdr["height"], hdr["t_bins"]
    if min(n_cls, w, h, T) < 1:
        raise DataFormatError(f"{path}: header values must be >= 1")
    out_h, out_w = resize if resize else (h, w)
    frame_shape = (1, out_w) if out_h == 1 else (1, out_h, out_w)

    samples, labels = [], []
    cur, label, duration = None, None, None

    def flush():
        if cur is not None:
            samples.append(_bin_sample(cur, duration, T, h, w, out_h, out_w, frame_shape, path))
            labels.append(label)

    for lineno, ln in enumerate(body[1:], start=2):
        if ln.startswith("label:"):
            flush()
            parts = ln.split()
            try:
                label = int(parts[0][len("label:"):])
                duration = None
                for extra in parts[1:]:
                    key, _, val = extra.partition("=")
                    if key != "duration":
                        raise ValueError(extra)
                    duration = float(val)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad sample separator {ln!r}") from exc
            if not 0 <= label < n_cls:
                raise DataFormatError(f"{path}:{lineno}: label {label} outside {n_cls} classes")
            if duration is not None and duration <= 0:
                raise DataFormatError(f"{path}:{lineno}: duration must be > 0")
            cur = []
            continue
        if cur is None:
            raise DataFormatError(f"{path}:{lineno}: event before any label line")
        parts = ln.split()
        if len(parts) != 4:
            raise DataFormatError(f"{path}:{lineno}: expected 't x y p', got {ln!r}")
        try:
            t, x, y, p = float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric event {ln!r}") from exc
        if not (0 <= x < w and 0 <= y < h):
            raise DataFormatError(f"{path}:{lineno}: coordinate ({x}, {y}) outside {w}x{h}")
        if p not in (-1, 0, 1):
            raise DataFormatError(f"{path}:{lineno}: polarity must be -1, 0 or 1")
        if cur and t < cur[-1][0]:
            raise DataFormatError(f"{path}:{lineno}: timestamps must be non-decreasing")
        cur.append((t, x, y))
    flush()

    x = np.stack(samples) if samples else np.zeros((0, T) + frame_shape, np.uint8)
    return Dataset(x, np.asarray(labels, np.int64), n_cls, "event", Path(path).name)


def write_event_stream(ds: Dataset, path) -> None:
    """Write event samples so that :func:`read_event_stream` restores them exactly."""
    if ds.modality != "event":
        raise DataFormatError("only event datasets can be written as event streams")
    frame = ds.x.shape[2:]
    if frame[0] != 1 or len(frame) not in (2, 3):
        raise DataFormatError(f"event frames must be [1, W] or [1, H, W], got {frame}")
    T = ds.x.shape[1]
    h, w = (1, frame[1]) if len(frame) == 2 else frame[1:]
    out = [f"classes={ds.num_classes} width={w} height={h} t_bins={T}"]
    for sample, label in zip(ds.x, ds.y):
        out.append(f"label:{int(label)} duration={T}")
        grid = sample[:, 0] if len(frame) == 3 else sample[:, 0][:, None, :]
        for t, yy, xx in zip(*np.nonzero(grid)):
            out.append(f"{t} {xx} {yy} 1")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")


# -- synthetic temporal tasks ---------------------------------------------------


def order2_gaps(num_classes: int, T: int) -> list[int]:
    """Delay between the two spikes of each class; two classes give 1 and 9."""
    span = min(9, T - 1)
    if num_classes == 1:
        return [1]
    return [1 + round(k * (span - 1) / (num_classes - 1)) for k in range(num_classes)]


def synth_temporal(kind: str, n: int, seed: int, T: int = 20, length: int = 16,
                   num_classes: int = 2) -> Dataset:
    """Event datasets whose classes share firerate statistics but differ in timing.

    ``order2``: each active channel fires exactly twice, at its own random
    onset and again after a class-specific delay. ``ramp``: channels fire with a probability that
    rises (class 0) or falls (class 1) across the window.
    ``n`` is the number of samples per class; samples are interleaved by class.
    """
    if n < 1:
        raise ValueError("n must be >= 1 samples per class")
    if num_classes < 2:
        raise ValueError("synthetic tasks need at least 2 classes")
    rng = np.random.default_rng([seed, 0x5E7])
    x = np.zeros((n * num_classes, T, 1, length), dtype=np.uint8)
    y = np.tile(np.arange(num_classes), n)
    if kind == "order2":
        gaps = order2_gaps(num_classes, T)
        if T < max(gaps) + 1:
            raise ValueError(f"T={T} too short for gap {max(gaps)}")
        for i, cls in enumerate(y):
            k = rng.integers(max(1, length // 4), max(2, length // 2) + 1)
            chans = rng.choice(length, size=k, replace=False)
            onsets = rng.integers(0, T - max(gaps), size=k)
            x[i, onsets, 0, chans] = 1
            x[i, onsets + gaps[cls], 0, chans] = 1
    elif kind == "ramp":
        if num_classes != 2:
            raise ValueError("ramp has exactly two classes (rising, falling)")
        ramp = np.linspace(0.0, 1.0, T)
        for i, cls in enumerate(y):
            amp = rng.uniform(0.3, 0.9)
            p = amp * (ramp if cls == 0 else ramp[::-1])
            x[i, :, 0, :] = rng.random((T, length)) < p[:, None]
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return Dataset(x, y, num_classes, "event", f"synth-{kind}")


# -- batching ---------------------------------------------------------------------


def batch_iter(ds, batch: int, shuffle: bool, seed: int, epoch: int = 0):
    """Index arrays covering every sample once; the final partial batch is kept."""
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]
