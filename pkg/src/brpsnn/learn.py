"""Reward/target propagation, local weight consolidation and the pseudo-BP baseline.

Every learnable layer ``l`` is fitted by its own loss on the time-averaged
membrane potential::

    L_l = 1/2 * || mean_t h_l(t) - target_l ||^2

with the temporal recurrence detached, so ``dL_l/dW_l`` is the outer product
(or correlation, for conv kernels) of the error with the time-averaged input
spikes. The target depends on the propagation mode:

* ``brp``   target_l = B_l @ label_rate               (a goal state)
* ``err``   target_l = h_l - B_l @ (y - label_rate)   (a displacement)
* ``sign``  target_l = h_l - B_l @ sign(y - label_rate)

``B_l`` is a fixed random matrix for hidden layers and the identity for the
output layer.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, surrogate_grad
from .encode import EncoderConfig, SpikeTrain, firerate, label_encode, rate_encode
from .layers import (
    LayerTrace,
    Network,
    Trace,
    conv_input_grad,
    conv_weight_grad,
    network_forward,
    pool_input_grad,
)
from .metrics import EpochMetrics, OpCount, SilentCounter, update_cost

TP_MODES = ("brp", "err", "sign", "pseudo_bp")
TP_APPLY = ("per_window", "per_step")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "brp"
    T: int = 20
    alpha: float = 1.0
    polarity: str = "intensity"
    eta_conv: float = 1e-4
    eta_fc: float = 1e-4
    batch: int = 50
    seed: int = 0
    tp_apply: str = "per_window"
    feedback_scale: str = "unit"
    shuffle: bool = True

    def __post_init__(self):
        if self.mode not in TP_MODES:
            raise ContractError(f"unknown tp mode {self.mode!r}; expected one of {TP_MODES}")
        if self.tp_apply not in TP_APPLY:
            raise ContractError(f"unknown tp.apply {self.tp_apply!r}")
        if self.T < 1 or self.batch < 1:
            raise ContractError("T and batch must be >= 1")
        if self.eta_conv < 0 or self.eta_fc < 0:
            raise ContractError("learning rates must be >= 0")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.T, self.alpha, self.polarity)


# -- propagated signals -------------------------------------------------------


def compute_tp(mode: str, label_train, output_train) -> np.ndarray:
    """Class-space signal delivered to every layer.

    ``brp`` returns the label firerate and never looks at ``output_train``.
    """
    if mode not in ("brp", "err", "sign"):
        raise ContractError(f"compute_tp has no signal for mode {mode!r}")
    ybar = firerate(label_train)
    if mode == "brp":
        return ybar
    y = firerate(output_train)
    if y.shape != ybar.shape:
        raise ContractError(f"output rate shape {y.shape} != label rate shape {ybar.shape}")
    return np.sign(y - ybar) if mode == "sign" else y - ybar


@dataclass
class FeedbackMatrices:
    """Fixed projections from class space into each learnable layer, ``[neurons, classes]``."""

    mats: dict[int, np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for i in sorted(self.mats):
            h.update(str(i).encode())
            h.update(np.ascontiguousarray(self.mats[i]).tobytes())
        return h.hexdigest()


def feedback_bound(scale, n_neurons: int) -> float:
    if scale == "unit":
        return 1.0
    if scale == "fan":
        return 1.0 / np.sqrt(n_neurons)
    return float(scale)


def init_feedback(net: Network, seed: int, scale="unit", dtype=np.float32) -> FeedbackMatrices:
    """Uniform(-1, 1) entries times a scale; identity for the output layer."""
    rng = np.random.default_rng([seed, 0xB5A9D])
    C = net.num_classes
    mats = {}
    out_idx = net.learnable[-1]
    for i in net.learnable:
        if i == out_idx:
            mats[i] = np.eye(C, dtype=dtype)
            continue
        n = net.specs[i].out_size
        mats[i] = (rng.uniform(-1.0, 1.0, size=(n, C)) * feedback_bound(scale, n)).astype(dtype)
    return FeedbackMatrices(mats)


def project_target(b: np.ndarray, tp: np.ndarray, out_shape=None) -> np.ndarray:
    """``b @ tp`` for a single class vector or a ``[B, C]`` batch."""
    tp = np.asarray(tp)
    if tp.shape[-1] != b.shape[1]:
        raise ContractError(f"signal has {tp.shape[-1]} classes, projection expects {b.shape[1]}")
    out = tp @ b.T.astype(tp.dtype, copy=False) if tp.ndim > 1 else b @ tp
    if out_shape is not None:
        out = out.reshape(tp.shape[:-1] + tuple(out_shape))
    return out


# -- local consolidation ------------------------------------------------------


def _weight_grad(err: np.ndarray, pre: np.ndarray, spec) -> np.ndarray:
    """Sum over the leading sample axis of d(currents)/dW contracted with ``err``."""
    if spec.kind == "fc":
        n = err.shape[0]
        return err.reshape(n, -1).T @ pre.reshape(n, -1)
    return conv_weight_grad(err, pre, spec)


def local_grad(trace_l: LayerTrace, target_l: np.ndarray, spec, tp_apply: str = "per_window"):
    """Gradient of the per-layer membrane MSE, averaged over the batch.

    ``trace_l`` arrays are ``[T, B, ...]``; ``target_l`` is ``[B, *out_shape]``
    or a per-step ``[T, B, *out_shape]``.
    Returns ``(grad, loss)``.
    """
    if trace_l is None or trace_l.membrane is None:
        raise ContractError("local_grad needs a captured neuron-layer trace")
    mem, pre = trace_l.membrane, trace_l.pre
    T, B = mem.shape[:2]
    target_l = np.asarray(target_l, dtype=mem.dtype)
    if target_l.ndim != mem.ndim:
        target_l = target_l.reshape((B,) + mem.shape[2:])[None]
    if tp_apply == "per_window":
        err = mem.mean(axis=0) - target_l.mean(axis=0)
        grad = _weight_grad(err, pre.mean(axis=0), spec) / B
        loss = 0.5 * float(np.square(err, dtype=np.float64).sum()) / B
    else:
        err = mem - target_l
        flat = lambda a: a.reshape((T * B,) + a.shape[2:])  # noqa: E731
        grad = _weight_grad(flat(err), flat(pre), spec) / (T * B)
        loss = 0.5 * float(np.square(err, dtype=np.float64).sum()) / (T * B)
    return grad.astype(mem.dtype, copy=False), loss


def layer_targets(mode: str, net: Network, trace: Trace, fb: FeedbackMatrices, tp: np.ndarray,
                  tp_apply: str = "per_window") -> dict:
    """Per-layer targets for the tp modes.

    Goal targets are ``[B, *out_shape]``; displacement targets follow the
    membrane they are taken from (window mean, or every step for ``per_step``).
    """
    targets = {}
    for i in net.learnable:
        spec = net.specs[i]
        proj = project_target(fb.mats[i], tp.astype(np.float32), spec.out_shape)
        mem = trace.layers[i].membrane
        if mode == "brp":
            targets[i] = proj
        elif tp_apply == "per_step":
            targets[i] = mem - proj[None]
        else:
            targets[i] = mem.mean(axis=0) - proj
    return targets


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, w: np.ndarray) -> OptimState:
        return cls(np.zeros_like(w), np.zeros_like(w))


def adam_update(w: np.ndarray, grad: np.ndarray, opt: OptimState, eta: float):
    """Bias-corrected Adam step, in place on ``w`` and ``opt``. Returns ``(w, opt)``."""
    if grad.shape != w.shape or opt.m.shape != w.shape:
        raise ContractError(f"shape mismatch: w {w.shape}, grad {grad.shape}, moments {opt.m.shape}")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    opt.m *= b1
    opt.m += (1.0 - b1) * grad
    opt.v *= b2
    sq = np.multiply(grad, grad)
    sq *= 1.0 - b2
    opt.v += sq
    # w -= eta * (m / bc1) / (sqrt(v / bc2) + eps)
    denom = np.sqrt(opt.v, out=sq)
    denom *= 1.0 / np.sqrt(1.0 - b2 ** opt.t)
    denom += opt.eps
    step = np.divide(opt.m, denom, out=denom)
    step *= eta / (1.0 - b1 ** opt.t)
    w -= step
    return w, opt


# -- pseudo-BP baseline ---------------------------------------------------------


def pseudo_bp_grads(trace: Trace, label_train, net: Network, ops: OpCount | None = None):
    """Spatial backprop through spike nonlinearities with the rectangular surrogate.

    Output loss is ``1/2 ||y - label_rate||^2`` on window firerates, averaged
    over the batch. No gradient flows through the membrane recurrence.
    Returns ``({layer: grad}, loss)``.
    """
    if trace is None:
        raise ContractError("pseudo_bp_grads needs a captured trace")
    out_spikes = trace.layers[-1].spikes
    T, B = out_spikes.shape[:2]
    y = out_spikes.mean(axis=0, dtype=np.float64)
    ybar = firerate(label_train)
    e = y - ybar
    loss = 0.5 * float(np.square(e).sum()) / B
    # d loss / d output spike at each step
    g = np.broadcast_to((e / (T * B)).astype(out_spikes.dtype), out_spikes.shape)
    grads = {}
    for i in range(len(net.specs) - 1, -1, -1):
        spec, lt = net.specs[i], trace.layers[i]
        below = any(s.has_neurons for s in net.specs[:i])
        flat = lambda a: a.reshape((T * B,) + a.shape[2:])  # noqa: E731
        if spec.kind == "pool":
            if not below:
                break
            g = pool_input_grad(flat(g), flat(lt.pre), spec).reshape(lt.pre.shape)
            continue
        delta = g * surrogate_grad(lt.membrane, net.lif)
        grads[i] = _weight_grad(flat(delta), flat(lt.pre), spec).astype(lt.membrane.dtype, copy=False)
        if not below:
            break
        w = net.weights[i]
        if spec.kind == "fc":
            g = (flat(delta) @ w.astype(delta.dtype, copy=False)).reshape(lt.pre.shape)
        else:
            g = conv_input_grad(flat(delta), w, spec).reshape(lt.pre.shape)
    if ops is not None:
        for i in range(len(net.specs)):
            cost = update_cost("pseudo_bp", net, i, T)
            if cost:
                ops.add_update(i, B * cost)
    return grads, loss


# -- training loop ------------------------------------------------------------


@dataclass
class TrainState:
    feedback: FeedbackMatrices | None
    optim: dict[int, OptimState]
    epoch: int = 0

    @classmethod
    def create(cls, net: Network, cfg: TrainConfig) -> TrainState:
        fb = None
        if cfg.mode != "pseudo_bp":
            fb = init_feedback(net, cfg.seed, cfg.feedback_scale)
        optim = {i: OptimState.zeros_like(net.weights[i]) for i in net.learnable}
        return cls(fb, optim)


def encode_batch(x: np.ndarray, modality: str, cfg: TrainConfig, key: tuple,
                 input_keep: float = 1.0) -> np.ndarray:
    """Spike tensor ``[T, B, ...]`` for a batch of samples.

    Analog samples are rate-encoded with a generator keyed on ``key`` so the
    same batch always yields the same spikes. ``input_keep`` < 1 thins the
    spikes, delivering only that proportion of them.
    """
    rng = np.random.default_rng([cfg.seed, *key])
    if modality == "event":
        spikes = np.moveaxis(x, 1, 0).astype(np.float32)
    else:
        spikes = rate_encode(x, cfg.encoder, rng, dtype=np.float32).data
    if input_keep < 1.0:
        spikes = spikes * (rng.random(spikes.shape, dtype=np.float32) < input_keep)
    return spikes


def apply_update(net: Network, state: TrainState, grads: dict, cfg: TrainConfig):
    for i, grad in grads.items():
        eta = cfg.eta_conv if net.specs[i].kind.startswith("conv") else cfg.eta_fc
        if eta == 0.0:
            continue
        net.weights[i], state.optim[i] = adam_update(net.weights[i], grad, state.optim[i], eta)


def train_step(net: Network, state: TrainState, spikes: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, ops: OpCount | None = None):
    """One forward with trace and one weight update. Returns ``(output train, output loss)``."""
    out, trace = network_forward(net, spikes, capture=True, ops=ops)
    T = spikes.shape[0]
    label_train = label_encode(labels, net.num_classes, T)
    if cfg.mode == "pseudo_bp":
        grads, loss = pseudo_bp_grads(trace, label_train, net, ops)
    else:
        tp = compute_tp(cfg.mode, label_train, out)
        targets = layer_targets(cfg.mode, net, trace, state.feedback, tp, cfg.tp_apply)
        grads = {}
        for i in net.learnable:
            grads[i], _ = local_grad(trace.layers[i], targets[i], net.specs[i], cfg.tp_apply)
            if ops is not None:
                ops.add_update(i, spikes.shape[1] * update_cost(cfg.mode, net, i, T, cfg.tp_apply))
        e = firerate(out) - firerate(label_train)
        loss = 0.5 * float(np.square(e).sum()) / spikes.shape[1]
    apply_update(net, state, grads, cfg)
    return out, loss


def train_epoch(net: Network, data, cfg: TrainConfig, state: TrainState,
                progress=None) -> EpochMetrics:
    """One pass over ``data`` (a :class:`brpsnn.data.Dataset`). Mutates weights."""
    from .data import batch_iter

    t0 = time.perf_counter()
    ops = OpCount(mode=cfg.mode, k=len(net.learnable))
    correct, loss_sum, n = 0, 0.0, 0
    epoch = state.epoch
    for b, idx in enumerate(batch_iter(data, cfg.batch, cfg.shuffle, cfg.seed, epoch)):
        spikes = encode_batch(data.x[idx], data.modality, cfg, (1, epoch, b))
        labels = data.y[idx]
        out, loss = train_step(net, state, spikes, labels, cfg, ops)
        pred = predict_from_output(out.data)
        correct += int((pred == labels).sum())
        loss_sum += loss * len(idx)
        n += len(idx)
        if progress is not None:
            progress(b, correct / n)
    state.epoch += 1
    wall = int(round((time.perf_counter() - t0) * 1000))
    return EpochMetrics(epoch + 1, "train", correct / n if n else 0.0,
                        loss_sum / n if n else float("nan"), fwd_ops=ops.forward_ops,
                        upd_ops=ops.update_ops, wall_ms=wall)


def predict_from_output(out_spikes: np.ndarray) -> np.ndarray:
    """Index of the maximum firerate per sample; ties go to the lowest index."""
    return np.argmax(out_spikes.sum(axis=0), axis=-1)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    predictions: np.ndarray
    silent: dict = field(default_factory=dict)
    silent_conv: float = float("nan")
    silent_fc: float = float("nan")
    ops: OpCount | None = None


def evaluate(net: Network, data, cfg: TrainConfig, input_keep: float = 1.0,
             split_key: int = 2) -> EvalResult:
    """Accuracy over the whole set in fixed order, plus silent-neuron fractions."""
    from .data import batch_iter

    ops = OpCount(mode=cfg.mode, k=len(net.learnable))
    silent = SilentCounter()
    preds, loss_sum = [], 0.0
    for b, idx in enumerate(batch_iter(data, cfg.batch, False, cfg.seed, 0)):
        spikes = encode_batch(data.x[idx], data.modality, cfg, (split_key, b), input_keep)
        out, trace = network_forward(net, spikes, capture=True, ops=ops)
        silent.update(trace, net)
        p = predict_from_output(out.data)
        preds.append(p)
        e = firerate(out) - np.eye(net.num_classes)[data.y[idx]]
        loss_sum += 0.5 * float(np.square(e).sum())
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    n = len(preds)
    acc = float((preds == data.y[:n]).mean()) if n else 0.0
    conv, fc = silent.by_kind(net)
    return EvalResult(acc, loss_sum / n if n else float("nan"), preds,
                      silent.fractions(), conv, fc, ops)
