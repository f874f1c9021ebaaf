"""Spiking convolution, pooling and fully-connected layers.

Tensors carry time on axis 0 and batch on axis 1: ``[T, B, *features]``.
Conv feature maps are ``[C, H, W]`` (2D) or ``[C, L]`` (1D).

Topology grammar (tokens joined by ``-``)::

    topology := layer ("-" layer)*
    layer    := conv | pool | fc | echo
    conv     := "Cov" INT "*" INT "x" INT ["(" opts ")"]   kernel h*w, channels
    pool     := "S" INT                                    OR-pool k x k, stride k; S1 = identity
    fc       := "FC" INT
    echo     := INT                                        input-size annotation, ignored
    opts     := "valid" | "stride1" | opts "," opts

A ``Cov1*k`` kernel on a ``[C, L]`` input is a 1D convolution.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ContractError, LifParams, LifState, lif_run, lif_step, reset_state
from .encode import SpikeTrain

_CONV = re.compile(r"^Cov(\d+)\*(\d+)x(\d+)(?:\(([a-z0-9,\s]*)\))?$")
_POOL = re.compile(r"^S(\d+)$")
_FC = re.compile(r"^FC(\d+)$")
_ECHO = re.compile(r"^\d+$")


class TopologyError(ContractError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | conv1d | pool | fc
    in_shape: tuple
    out_shape: tuple
    kernel: tuple = ()
    stride: int = 1
    channels: int = 0

    @property
    def has_neurons(self) -> bool:
        return self.kind != "pool"

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "fc":
            return (self.out_shape[0], self.in_size)
        if self.kind in ("conv2d", "conv1d"):
            return (self.channels, self.in_shape[0]) + self.kernel
        return ()

    @property
    def macs_per_step(self) -> int:
        """Synaptic multiply-accumulates for one sample and one step."""
        if self.kind == "fc":
            return self.in_size * self.out_size
        if self.kind in ("conv2d", "conv1d"):
            return self.out_size * self.in_shape[0] * int(np.prod(self.kernel))
        return 0


def parse_topology(text: str) -> list[tuple]:
    """Tokenize a topology string into ``(kind, *args)`` tuples."""
    tokens = []
    # split on '-' outside parentheses
    for raw in re.split(r"-(?![^(]*\))", text.strip()):
        tok = raw.strip()
        if m := _CONV.match(tok):
            kh, kw, ch = (int(g) for g in m.groups()[:3])
            opts = {o.strip() for o in (m.group(4) or "").split(",") if o.strip()}
            if opts - {"valid", "stride1"}:
                raise TopologyError(f"unsupported conv options {sorted(opts)} in {tok!r}")
            tokens.append(("conv", kh, kw, ch))
        elif m := _POOL.match(tok):
            tokens.append(("pool", int(m.group(1))))
        elif m := _FC.match(tok):
            tokens.append(("fc", int(m.group(1))))
        elif _ECHO.match(tok):
            continue
        else:
            raise TopologyError(f"cannot parse topology token {tok!r} in {text!r}")
    if not tokens or tokens[-1][0] != "fc":
        raise TopologyError(f"topology must end with an FC layer: {text!r}")
    first_fc = next(i for i, t in enumerate(tokens) if t[0] == "fc")
    if any(t[0] != "fc" for t in tokens[first_fc:]):
        raise TopologyError("conv and pool layers must precede FC layers")
    return tokens


def build_specs(text: str, input_shape: tuple) -> list[LayerSpec]:
    """Resolve a topology string against an input feature shape.

    ``input_shape`` is ``(C, H, W)`` for images/frames or ``(C, L)`` for 1D.
    """
    shape = tuple(int(s) for s in input_shape)
    specs = []
    for tok in parse_topology(text):
        if tok[0] == "conv":
            _, kh, kw, ch = tok
            if len(shape) == 3:
                _, h, w = shape
                if kh > h or kw > w:
                    raise TopologyError(f"kernel {kh}x{kw} exceeds input {h}x{w}")
                out = (ch, h - kh + 1, w - kw + 1)
                specs.append(LayerSpec("conv2d", shape, out, (kh, kw), 1, ch))
            elif len(shape) == 2:
                if kh != 1:
                    raise TopologyError(f"1D input needs a 1*k kernel, got {kh}*{kw}")
                _, length = shape
                if kw > length:
                    raise TopologyError(f"kernel {kw} exceeds input length {length}")
                out = (ch, length - kw + 1)
                specs.append(LayerSpec("conv1d", shape, out, (kw,), 1, ch))
            else:
                raise TopologyError(f"conv needs a [C,H,W] or [C,L] input, got {shape}")
        elif tok[0] == "pool":
            k = tok[1]
            if k == 1:
                continue
            if len(shape) not in (2, 3):
                raise TopologyError("pooling needs a conv feature map")
            spatial = shape[1:]
            if any(s < k for s in spatial):
                raise TopologyError(f"pool window {k} exceeds input {spatial}")
            out = (shape[0],) + tuple(s // k for s in spatial)
            specs.append(LayerSpec("pool", shape, out, (k,) * len(spatial), k))
        else:
            n = tok[1]
            specs.append(LayerSpec("fc", shape, (n,)))
        shape = specs[-1].out_shape
    return specs


# -- currents ---------------------------------------------------------------


def _as_2d(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    # conv1d runs as a 2D correlation over a height-1 map
    return x[:, :, None, :] if spec.kind == "conv1d" else x


def conv_currents(x: np.ndarray, w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Valid, stride-1 cross-correlation. ``x`` is ``[N, *in_shape]``."""
    x2 = _as_2d(x, spec)
    w2 = w[:, :, None, :] if spec.kind == "conv1d" else w
    n, c = x2.shape[:2]
    o, _, kh, kw = w2.shape
    win = sliding_window_view(x2, (kh, kw), axis=(2, 3))  # [N, C, Ho, Wo, kh, kw]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w2.reshape(o, -1).T.astype(cols.dtype, copy=False)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if spec.kind == "conv1d":
        out = out[:, :, 0, :]
    return np.ascontiguousarray(out)


def conv_weight_grad(err: np.ndarray, x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Sum over samples and positions of ``err[n,o,p] * x[n,c,p+k]``."""
    x2 = _as_2d(x, spec)
    e2 = _as_2d(err, spec)
    n, c = x2.shape[:2]
    o, ho, wo = e2.shape[1:]
    kh, kw = x2.shape[2] - ho + 1, x2.shape[3] - wo + 1
    win = sliding_window_view(x2, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    e_flat = e2.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    g = (e_flat.T @ cols).reshape(o, c, kh, kw)
    return g[:, :, 0, :] if spec.kind == "conv1d" else g


def conv_input_grad(err: np.ndarray, w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Gradient of the currents w.r.t. the input map (full correlation with flipped kernel)."""
    e2 = _as_2d(err, spec)
    w2 = w[:, :, None, :] if spec.kind == "conv1d" else w
    _, _, kh, kw = w2.shape
    padded = np.pad(e2, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = w2[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [C, O, kh, kw]
    n, o = padded.shape[:2]
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    hi, wi = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hi * wi, o * kh * kw)
    out = cols @ flipped.reshape(flipped.shape[0], -1).T.astype(cols.dtype, copy=False)
    out = out.reshape(n, hi, wi, -1).transpose(0, 3, 1, 2)
    if spec.kind == "conv1d":
        out = out[:, :, 0, :]
    return np.ascontiguousarray(out)


def or_pool(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """OR over non-overlapping k-windows. ``x`` is ``[N, *in_shape]``."""
    k = spec.stride
    if spec.kind != "pool":
        raise ContractError("or_pool needs a pool spec")
    spatial = x.shape[2:]
    if any(s < k for s in spatial):
        raise ContractError(f"pool window {k} exceeds input {spatial}")
    trimmed = tuple(slice(0, (s // k) * k) for s in spatial)
    x = x[(slice(None), slice(None)) + trimmed]
    if len(spatial) == 2:
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))
    n, c, length = x.shape
    return x.reshape(n, c, length // k, k).max(axis=3)


def pool_input_grad(grad_out: np.ndarray, x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Route each window's gradient equally to its spiking inputs (all inputs if none fired)."""
    k = spec.stride
    spatial = x.shape[2:]
    out = np.zeros_like(x, dtype=grad_out.dtype)
    if len(spatial) == 2:
        n, c, h, w = x.shape
        hh, ww = h // k, w // k
        xw = x[:, :, : hh * k, : ww * k].reshape(n, c, hh, k, ww, k)
        active = xw > 0
        none = ~active.any(axis=(3, 5), keepdims=True)
        mask = (active | none).astype(grad_out.dtype)
        share = grad_out[:, :, :, None, :, None] / mask.sum(axis=(3, 5), keepdims=True)
        out[:, :, : hh * k, : ww * k] = (mask * share).reshape(n, c, hh * k, ww * k)
    else:
        n, c, length = x.shape
        ll = length // k
        xw = x[:, :, : ll * k].reshape(n, c, ll, k)
        active = xw > 0
        none = ~active.any(axis=3, keepdims=True)
        mask = (active | none).astype(grad_out.dtype)
        share = grad_out[..., None] / mask.sum(axis=3, keepdims=True)
        out[:, :, : ll * k] = (mask * share).reshape(n, c, ll * k)
    return out


def layer_currents(x: np.ndarray, w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Input currents of a neuron layer for a stack of inputs ``[N, *in_shape]``."""
    if spec.kind == "fc":
        return x.reshape(x.shape[0], -1) @ w.T.astype(x.dtype, copy=False)
    return conv_currents(x, w, spec)


# -- network -----------------------------------------------------------------


@dataclass
class Network:
    specs: list[LayerSpec]
    weights: list  # ndarray per neuron layer, None for pool layers
    lif: LifParams = field(default_factory=LifParams)
    topology: str = ""

    @classmethod
    def build(cls, topology: str, input_shape, lif: LifParams | None = None,
              seed: int = 0, init_scale: float = 1.0, conv_init_scale: float | None = None,
              dtype=np.float32) -> Network:
        """Weights start Uniform(-s/sqrt(fan_in), s/sqrt(fan_in)).

        ``s`` is ``init_scale`` for fc layers and ``conv_init_scale`` (defaulting
        to ``init_scale``) for conv layers.
        """
        specs = build_specs(topology, input_shape)
        conv_s = init_scale if conv_init_scale is None else conv_init_scale
        rng = np.random.default_rng(seed)
        weights = []
        for spec in specs:
            if not spec.has_neurons:
                weights.append(None)
                continue
            fan_in = int(np.prod(spec.weight_shape[1:]))
            scale = conv_s if spec.kind.startswith("conv") else init_scale
            bound = scale / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype))
        return cls(specs, weights, lif or LifParams(), topology)

    @property
    def learnable(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.has_neurons]

    @property
    def num_classes(self) -> int:
        return self.specs[-1].out_shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.specs[0].in_shape


@dataclass
class LayerTrace:
    pre: np.ndarray       # input spikes [T, B, *in_shape]
    spikes: np.ndarray    # output spikes [T, B, *out_shape]
    membrane: np.ndarray | None  # pre-reset potentials; None for pool layers


@dataclass
class Trace:
    layers: list[LayerTrace]

    def spike_totals(self, index: int) -> np.ndarray:
        """Per-sample, per-neuron spike counts over the window: ``[B, *out_shape]``."""
        return self.layers[index].spikes.sum(axis=0)


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    if x.ndim == len(net.input_shape) + 1:
        x = x[:, None]
    if tuple(x.shape[2:]) != tuple(net.input_shape):
        raise ContractError(f"input features {x.shape[2:]} do not match network input {net.input_shape}")
    return x


def network_forward(net: Network, inputs, capture: bool = False, ops=None, dtype=np.float32):
    """Propagate a spike train through every layer on one shared clock.

    Each layer's dynamics only depend on the spikes it receives, so the
    window is processed one layer at a time, which gives the same result as
    interleaving layers step by step (see :func:`network_forward_stepwise`).
    ``inputs`` is ``[T, B, *in_shape]`` (or unbatched ``[T, *in_shape]``).
    """
    x = inputs.data if isinstance(inputs, SpikeTrain) else np.asarray(inputs)
    unbatched = x.ndim == len(net.input_shape) + 1
    x = _check_input(net, x).astype(dtype, copy=False)
    T, B = x.shape[:2]
    layers = []
    for idx, (spec, w) in enumerate(zip(net.specs, net.weights)):
        flat = x.reshape((T * B,) + spec.in_shape)
        if spec.kind == "pool":
            out = or_pool(flat, spec).reshape((T, B) + spec.out_shape)
            mem = None
        else:
            cur = layer_currents(flat, w, spec).reshape((T, B) + spec.out_shape)
            out, mem = lif_run(cur, net.lif)
            if ops is not None:
                ops.add_forward(idx, T * B * spec.macs_per_step)
        if capture:
            layers.append(LayerTrace(x, out, mem))
        x = out
    out = x[:, 0] if unbatched else x
    return SpikeTrain(out), (Trace(layers) if capture else None)


# -- single-step API ----------------------------------------------------------


def _batched(x: np.ndarray, spec: LayerSpec):
    x = np.asarray(x)
    if x.ndim == len(spec.in_shape):
        return x[None], True
    return x, False


def _neuron_step(w, spec: LayerSpec, lif: LifParams, state: LifState, in_spikes_t, step: int):
    if spec.kind != "fc" and tuple(np.shape(in_spikes_t)[-len(spec.in_shape):]) != spec.in_shape:
        raise ContractError(f"input shape {np.shape(in_spikes_t)} != {spec.in_shape}")
    x, single = _batched(in_spikes_t, spec)
    if spec.kind == "fc" and x.shape[1:] != spec.in_shape:
        raise ContractError(f"input shape {np.shape(in_spikes_t)} != {spec.in_shape}")
    cur = layer_currents(x.astype(np.float64), np.asarray(w, dtype=np.float64), spec)
    if single:
        cur = cur[0]
    return lif_step(state, cur, lif, step)


def conv2d_step(w, spec: LayerSpec, state: LifState, in_spikes_t, lif: LifParams | None = None, step: int = 1):
    if spec.kind != "conv2d":
        raise ContractError("conv2d_step needs a conv2d spec")
    return _neuron_step(w, spec, lif or LifParams(), state, in_spikes_t, step)


def conv1d_step(w, spec: LayerSpec, state: LifState, in_spikes_t, lif: LifParams | None = None, step: int = 1):
    if spec.kind != "conv1d":
        raise ContractError("conv1d_step needs a conv1d spec")
    return _neuron_step(w, spec, lif or LifParams(), state, in_spikes_t, step)


def fc_step(w, spec: LayerSpec, state: LifState, in_spikes_t, lif: LifParams | None = None, step: int = 1):
    if spec.kind != "fc":
        raise ContractError("fc_step needs an fc spec")
    return _neuron_step(w, spec, lif or LifParams(), state, in_spikes_t, step)


def pool_step(spec: LayerSpec, in_spikes_t):
    x, single = _batched(in_spikes_t, spec)
    if x.shape[1:] != spec.in_shape:
        raise ContractError(f"input shape {x.shape[1:]} != {spec.in_shape}")
    out = or_pool(x, spec)
    return out[0] if single else out


def network_forward_stepwise(net: Network, inputs):
    """Reference path: advance all layers together, one step at a time (float64)."""
    x = inputs.data if isinstance(inputs, SpikeTrain) else np.asarray(inputs)
    unbatched = x.ndim == len(net.input_shape) + 1
    x = _check_input(net, x)
    T, B = x.shape[:2]
    states = [reset_state((B,) + s.out_shape, net.lif) if s.has_neurons else None for s in net.specs]
    outs = []
    for t in range(T):
        s = x[t]
        for i, spec in enumerate(net.specs):
            if spec.kind == "pool":
                s = pool_step(spec, s)
            else:
                step_fn = {"fc": fc_step, "conv2d": conv2d_step, "conv1d": conv1d_step}[spec.kind]
                states[i], s, _ = step_fn(net.weights[i], spec, states[i], s, net.lif, t + 1)
        outs.append(s)
    out = np.stack(outs)
    return SpikeTrain(out[:, 0] if unbatched else out)
