"""Discrete-time leaky integrate-and-fire dynamics.

One step is one millisecond and capacitance is folded into the weights, so
the membrane update reduces to

    v' = v_rest + g * (v - v_rest) + I      (outside the refractory window)
    v' = v + I                              (inside it: decay suppressed)

and a neuron fires (then resets) once v' reaches v_th.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEVER = -(10**9)  # last_spike sentinel for neurons that have not fired


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


@dataclass(frozen=True)
class LifParams:
    g: float = 0.2
    v_th: float = 0.5
    v_reset: float = 0.0
    v_rest: float = 0.0
    tau_ref: int = 1
    surrogate_width: float = 0.5
    # fixed by the model units; kept so configs can document them
    dt: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.g < 1.0:
            raise ContractError(f"decay g must lie in (0, 1), got {self.g}")
        if self.v_reset > self.v_th:
            raise ContractError("v_reset must not exceed v_th")
        if self.tau_ref < 0:
            raise ContractError("tau_ref must be >= 0")
        if self.surrogate_width <= 0:
            raise ContractError("surrogate_width must be > 0")


@dataclass
class LifState:
    v: np.ndarray
    last_spike: np.ndarray

    def in_refractory(self, step: int, params: LifParams) -> np.ndarray:
        return (step - self.last_spike) < params.tau_ref

    def copy(self) -> LifState:
        return LifState(self.v.copy(), self.last_spike.copy())


def reset_state(n, params: LifParams | None = None, dtype=np.float64) -> LifState:
    """Fresh state at rest; `n` may be an int or a shape tuple."""
    params = params or LifParams()
    shape = (n,) if np.isscalar(n) else tuple(n)
    if int(np.prod(shape)) < 1:
        raise ContractError("neuron count must be >= 1")
    return LifState(
        v=np.full(shape, params.v_rest, dtype=dtype),
        last_spike=np.full(shape, NEVER, dtype=np.int64),
    )


def lif_step(state: LifState, input_current, params: LifParams, step: int):
    """Advance every neuron by one step.

    Returns ``(new_state, spikes, membrane)`` where ``membrane`` is the
    potential before any reset at this step. The input state is not mutated.
    """
    current = np.asarray(input_current)
    if current.shape != state.v.shape:
        raise ContractError(
            f"input shape {current.shape} does not match state shape {state.v.shape}"
        )
    if step < 1:
        raise ContractError("step index starts at 1")
    if not np.all(np.isfinite(current)):
        raise FloatingPointError("non-finite input current")

    refractory = state.in_refractory(step, params)
    leaked = params.v_rest + params.g * (state.v - params.v_rest)
    v = np.where(refractory, state.v, leaked) + current
    spikes = v >= params.v_th
    membrane = v.astype(state.v.dtype, copy=True)
    v = np.where(spikes, params.v_reset, v).astype(state.v.dtype)
    last = np.where(spikes, step, state.last_spike)
    return LifState(v, last), spikes.astype(np.uint8), membrane


def lif_run(currents: np.ndarray, params: LifParams):
    """Run a population over a full window of precomputed input currents.

    ``currents`` has time on axis 0. Returns ``(spikes, membranes)`` with the
    same shape; membranes are pre-reset values. Equivalent to calling
    :func:`lif_step` for steps 1..T from a rest state.
    """
    T = currents.shape[0]
    dtype = currents.dtype
    g, rest = dtype.type(params.g), dtype.type(params.v_rest)
    th, reset = dtype.type(params.v_th), dtype.type(params.v_reset)
    v = np.full(currents.shape[1:], rest, dtype=dtype)
    # with tau_ref <= 1 the refractory test (step - last < tau_ref) never holds
    last = np.full(v.shape, NEVER, dtype=np.int64) if params.tau_ref > 1 else None
    fired = np.empty(v.shape, dtype=bool)
    spikes = np.empty(currents.shape, dtype=dtype)
    membranes = np.empty_like(currents)
    for t in range(T):
        step = t + 1
        if last is not None:
            leaked = rest + g * (v - rest)
            v = np.where((step - last) < params.tau_ref, v, leaked)
        elif rest == 0:
            v *= g
        else:
            v -= rest
            v *= g
            v += rest
        v += currents[t]
        membranes[t] = v
        np.greater_equal(v, th, out=fired)
        spikes[t] = fired
        np.copyto(v, reset, where=fired)
        if last is not None:
            last[fired] = step
    return spikes, membranes


def surrogate_grad(v, params: LifParams):
    """Rectangular pseudo-derivative of the spike function (1 near threshold)."""
    v = np.asarray(v)
    out = (np.abs(v - params.v_th) <= params.surrogate_width).astype(
        v.dtype if v.dtype.kind == "f" else np.float64
    )
    return out if out.ndim else float(out)
