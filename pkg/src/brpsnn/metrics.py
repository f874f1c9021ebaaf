"""Run metrics, silent-neuron accounting and operation counters.

Counting convention: ``forward_ops`` are synaptic multiply-accumulates
(dense, every synapse every step). ``update_ops`` are arithmetic element
operations spent in the learning phase: feedback projections, weight-gradient
accumulations and, for pseudo-BP, the backward chain through upper layers.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = ("epoch", "split", "accuracy", "loss", "silent_conv", "silent_fc",
               "fwd_ops", "upd_ops", "wall_ms")


@dataclass
class OpCount:
    mode: str = ""
    k: int = 0
    forward: dict = field(default_factory=lambda: defaultdict(int))
    update: dict = field(default_factory=lambda: defaultdict(int))

    def add_forward(self, layer: int, n: int):
        self.forward[layer] += int(n)

    def add_update(self, layer: int, n: int):
        self.update[layer] += int(n)

    @property
    def forward_ops(self) -> int:
        return int(sum(self.forward.values()))

    @property
    def update_ops(self) -> int:
        return int(sum(self.update.values()))

    def merge(self, other: OpCount):
        for k, v in sorted(other.forward.items()):
            self.forward[k] += v
        for k, v in sorted(other.update.items()):
            self.update[k] += v


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    accuracy: float
    loss: float = float("nan")
    silent_conv: float = float("nan")
    silent_fc: float = float("nan")
    fwd_ops: int = 0
    upd_ops: int = 0
    wall_ms: int = 0

    def row(self) -> list[str]:
        def f(x):
            return "" if isinstance(x, float) and np.isnan(x) else f"{x:.6f}"
        return [str(self.epoch), self.split, f(self.accuracy), f(self.loss),
                f(self.silent_conv), f(self.silent_fc), str(self.fwd_ops),
                str(self.upd_ops), str(self.wall_ms)]


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)

    def add(self, m: EpochMetrics):
        if not 0.0 <= m.accuracy <= 1.0:
            raise ValueError(f"accuracy out of range: {m.accuracy}")
        self.epochs.append(m)

    def last(self, split: str) -> EpochMetrics | None:
        rows = [m for m in self.epochs if m.split == split]
        return rows[-1] if rows else None


def silent_fraction(spike_totals: np.ndarray) -> float:
    """Fraction of neurons that never fired, averaged over samples.

    ``spike_totals`` holds per-sample spike counts over the window with the
    sample axis first, ``[B, *neurons]``.
    """
    totals = np.asarray(spike_totals)
    per_sample = (totals.reshape(totals.shape[0], -1) == 0).mean(axis=1)
    return float(per_sample.mean())


class SilentCounter:
    """Accumulates silent fractions for each neuron layer across batches."""

    def __init__(self):
        self._sum = defaultdict(float)
        self._n = 0

    def update(self, trace, net):
        b = trace.layers[0].pre.shape[1]
        for i in net.learnable:
            self._sum[i] += silent_fraction(trace.spike_totals(i)) * b
        self._n += b

    def fractions(self) -> dict[int, float]:
        return {i: s / self._n for i, s in self._sum.items()} if self._n else {}

    def by_kind(self, net) -> tuple[float, float]:
        """(first conv layer, first hidden FC layer) silent fractions; NaN if absent."""
        fr = self.fractions()
        conv = [i for i in net.learnable if net.specs[i].kind.startswith("conv")]
        fc = [i for i in net.learnable[:-1] if net.specs[i].kind == "fc"]
        pick = lambda ids: fr.get(ids[0], float("nan")) if ids else float("nan")  # noqa: E731
        return pick(conv), pick(fc)


def needs_input_grad(net, index: int) -> bool:
    """Whether pseudo-BP must push a delta below layer ``index``."""
    return any(net.specs[j].has_neurons for j in range(index))


def update_cost(mode: str, net, index: int, T: int, tp_apply: str = "per_window") -> int:
    """Per-sample learning-phase element operations charged to one layer."""
    spec = net.specs[index]
    if mode == "pseudo_bp":
        if spec.kind == "pool":
            return T * spec.in_size if needs_input_grad(net, index) else 0
        n = T * spec.out_size + T * spec.macs_per_step
        if needs_input_grad(net, index):
            n += T * spec.macs_per_step
        return n
    if not spec.has_neurons:
        return 0
    # one projection matvec plus one outer-product gradient (per step if asked)
    reps = T if tp_apply == "per_step" else 1
    return spec.out_size * net.num_classes + reps * spec.macs_per_step


def count_ops(mode: str, net, T: int, n_samples: int, tp_apply: str = "per_window") -> OpCount:
    """Closed-form counts for one pass over ``n_samples`` samples.

    Agrees exactly with the instrumentation in ``learn.train_epoch``.
    """
    ops = OpCount(mode=mode, k=len(net.learnable))
    for i, spec in enumerate(net.specs):
        if spec.has_neurons:
            ops.add_forward(i, n_samples * T * spec.macs_per_step)
        cost = update_cost(mode, net, i, T, tp_apply)
        if cost:
            ops.add_update(i, n_samples * cost)
    return ops


def fit_affine(xs, ys) -> tuple[float, float, float]:
    """Least-squares ``y = a*x + b``; returns ``(a, b, r2)``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def emit_csv(metrics: RunMetrics, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in metrics.epochs:
        writer.writerow(m.row())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
