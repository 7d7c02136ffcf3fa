"""Clock-driven simulation of converted spiking networks.

Integrate-and-fire with reset by subtraction: each step a layer adds its
input current to the membrane potential, fires wherever the potential
reaches the layer threshold, and subtracts the threshold from firing
neurons. Layer n consumes layer n-1's spikes of the same timestep (zero
axonal delay), and the final layer integrates without firing so its
accumulated potential serves as the classification readout.

Per-neuron bookkeeping maintains the conservation identity

    cumulative_input(t) == spike_count(t) * V_thr + potential(t)

exactly in fixed-point mode and to float64 rounding in float mode; all
rate and residual diagnostics derive from it.

State is float64 throughout. Fixed-point models hold integer-valued
weights, thresholds and biases, which float64 carries exactly below
2**53; a bound check at setup rejects models that could leave that
range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .convert import SnnLayer, SnnModel
from .errors import DataError, InvariantError
from .tensors import im2col

F64 = np.float64


def encode_input(x: np.ndarray, kappa0: float, timesteps: int) -> np.ndarray:
    """Encode an image in [0, 1] as a deterministic constant-current spike train.

    Every pixel drives an integrate-and-fire unit with constant current
    kappa0 * x / max(x) against threshold kappa0 (soft reset), so the
    maximum pixel fires at every step and pixel i emits close to
    floor(T * x_i / max(x)) spikes. An all-zero image encodes to the
    all-zero train. Returns a (T, *x.shape) uint8 array.
    """
    if timesteps < 1:
        raise DataError(f"timesteps must be >= 1, got {timesteps}")
    x = np.asarray(x, dtype=F64)
    train = np.zeros((timesteps,) + x.shape, dtype=np.uint8)
    peak = x.max() if x.size else 0.0
    if peak < 0 or (x.size and x.min() < 0) or peak > 1:
        raise DataError("encode_input: values must lie in [0, 1]")
    if peak == 0:
        return train
    z = kappa0 * (x / peak)  # ratio first: the max pixel's current is exactly kappa0
    v = np.zeros_like(x)
    for t in range(timesteps):
        v += z
        spk = v >= kappa0
        v -= spk * kappa0
        train[t] = spk
    return train


@dataclass
class NeuronLayerState:
    """Mutable per-layer simulation state (batched arrays allowed)."""

    threshold: float
    potential: np.ndarray
    spike_count: np.ndarray
    cumulative_input: np.ndarray
    spiking: bool = True

    @classmethod
    def zeros(cls, shape: tuple, threshold: float, spiking: bool = True) -> "NeuronLayerState":
        return cls(threshold=float(threshold),
                   potential=np.zeros(shape, dtype=F64),
                   spike_count=np.zeros(shape, dtype=np.int64),
                   cumulative_input=np.zeros(shape, dtype=F64),
                   spiking=spiking)


def step_layer(state: NeuronLayerState, incoming: np.ndarray) -> np.ndarray:
    """Advance one timestep: integrate, fire at threshold, subtract, count.

    Emission is binary (at most one spike per neuron per step); potentials
    may go negative, a deficit later current must repay. Non-spiking
    states only integrate. Returns the spike array as uint8.
    """
    if incoming.shape != state.potential.shape:
        raise DataError(
            f"step_layer: current shape {incoming.shape} != state shape {state.potential.shape}"
        )
    state.potential += incoming
    state.cumulative_input += incoming
    if not state.spiking:
        return np.zeros(state.potential.shape, dtype=np.uint8)
    spikes = state.potential >= state.threshold
    state.potential -= spikes * state.threshold
    state.spike_count += spikes
    return spikes.astype(np.uint8)


@dataclass(frozen=True)
class LayerTrace:
    """Final per-neuron counters for one layer of one simulated sample."""

    name: str
    kind: str
    threshold: float
    is_output: bool
    spike_count: np.ndarray
    potential: np.ndarray
    cumulative_input: np.ndarray
    raster: np.ndarray | None = None
    input_history: np.ndarray | None = None


@dataclass(frozen=True)
class RecordFlags:
    """What to retain beyond final counters (memory scales with T)."""

    rasters: bool = False
    input_history: bool = False


@dataclass(frozen=True)
class SimTrace:
    """Everything one simulation leaves behind.

    ``layer(0)`` is the input encoder; ``layer(n)`` for n >= 1 are the
    network layers, the last of which is the non-spiking readout.
    """

    timesteps: int
    tre_eta: float
    numeric_mode: str
    encoder: LayerTrace
    layers: tuple
    output_potential_per_step: np.ndarray

    def layer(self, n: int) -> LayerTrace:
        if n == 0:
            return self.encoder
        if 1 <= n <= len(self.layers):
            return self.layers[n - 1]
        raise DataError(f"trace has layers 0..{len(self.layers)}, got {n}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)


class _Runtime:
    """Prepared arrays and current functions for one model."""

    def __init__(self, snn: SnnModel):
        self.snn = snn
        self.fixed = snn.numeric_mode == "fixed_point"
        self.prepared = []
        for layer in snn.layers:
            w = None if layer.weights is None else np.ascontiguousarray(layer.weights, dtype=F64)
            b = None if layer.bias_current is None else np.asarray(layer.bias_current, dtype=F64)
            if self.fixed:
                for nm, a in (("weights", w), ("bias", b)):
                    if a is not None and np.any(a != np.round(a)):
                        raise DataError(f"layer '{layer.name}': fixed-point {nm} not integral")
                if layer.threshold != round(layer.threshold):
                    raise DataError(f"layer '{layer.name}': fixed-point threshold not integral")
            kernel_hw = None
            if layer.kind == L.CONV2D and w is not None:
                kernel_hw = w.shape[2], w.shape[3]
                w = w.reshape(w.shape[0], -1)  # (O, C*Kh*Kw) for the im2col product
            self.prepared.append((layer, w, b, kernel_hw))

    def check_magnitude(self, timesteps: int) -> None:
        """Reject fixed-point runs whose integer values could leave float64's
        exact range (2**53)."""
        if not self.fixed:
            return
        bound = 0.0
        for layer, w, b, _ in self.prepared:
            if layer.kind == L.AVGPOOL:
                per_step = abs(layer.pool_scale) * layer.geometry["window"] ** 2
            else:
                axis = 1 if w.ndim == 2 else None
                per_step = float(np.max(np.sum(np.abs(w), axis=axis)))
            if b is not None:
                per_step += float(np.max(np.abs(b)))
            bound = max(bound, per_step * timesteps)
        if bound >= 2 ** 53:
            raise InvariantError(
                f"fixed-point magnitudes up to {bound:.3g} exceed the exact float64 range"
            )

    def layer_current(self, index: int, spikes: np.ndarray) -> np.ndarray:
        """Input current of layer ``index`` given same-step upstream spikes."""
        layer, w, b, kernel_hw = self.prepared[index]
        x = spikes.astype(F64)
        if layer.flatten_before:
            x = x.reshape(x.shape[0], -1)
        if layer.kind == L.CONV2D:
            o = layer.out_shape[0]
            kh, kw = kernel_hw
            cols = im2col(x, kh, kw, layer.geometry["stride"], layer.geometry["padding"])
            z = (cols @ w.T).transpose(0, 3, 1, 2)
            return z + b.reshape(1, o, 1, 1)
        if layer.kind == L.DENSE:
            z = x @ w.T
            return z + b if b is not None else z
        # avgpool: uniform synapse weight pool_scale over each window
        window, stride = layer.geometry["window"], layer.geometry["stride"]
        bsz, c, h, wd = x.shape
        if stride == window and h % window == 0 and wd % window == 0:
            summed = x.reshape(bsz, c, h // window, window, wd // window, window).sum(axis=(3, 5))
        else:
            win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
            summed = win[:, :, ::stride, ::stride].sum(axis=(4, 5))
        z = layer.pool_scale * summed
        if b is not None:
            z = z + b.reshape(1, c, 1, 1)
        return z


def _encode_batch(X: np.ndarray, kappa0: float, timesteps: int) -> np.ndarray:
    """Vectorised encoder over a batch: (B, ...) -> (T, B, ...) uint8."""
    X = np.asarray(X, dtype=F64)
    flat = X.reshape(X.shape[0], -1)
    if flat.size and (flat.min() < 0 or flat.max() > 1):
        raise DataError("inputs must lie in [0, 1]")
    peak = flat.max(axis=1)
    z = np.zeros_like(flat)
    alive = peak > 0
    z[alive] = kappa0 * (flat[alive] / peak[alive, None])
    train = np.zeros((timesteps,) + flat.shape, dtype=np.uint8)
    v = np.zeros_like(flat)
    cum = np.zeros_like(flat)
    for t in range(timesteps):
        v += z
        cum += z
        spk = v >= kappa0
        v -= spk * kappa0
        train[t] = spk
    return train.reshape((timesteps,) + X.shape), v.reshape(X.shape), cum.reshape(X.shape)


def simulate_batch(snn: SnnModel, X: np.ndarray, timesteps: int | None = None,
                   record: RecordFlags = RecordFlags()) -> "BatchTrace":
    """Simulate a batch of inputs; returns batched traces (bit-deterministic)."""
    T = snn.timesteps if timesteps is None else int(timesteps)
    if T < 1:
        raise DataError(f"timesteps must be >= 1, got {T}")
    X = np.asarray(X)
    if tuple(X.shape[1:]) != snn.input_shape:
        raise DataError(f"input shape {X.shape[1:]} != model input {snn.input_shape}")
    rt = _Runtime(snn)
    rt.check_magnitude(T)
    bsz = X.shape[0]
    train, enc_v, enc_cum = _encode_batch(X, snn.kappa0, T)

    states = []
    for i, layer in enumerate(snn.layers):
        spiking = i < len(snn.layers) - 1
        states.append(NeuronLayerState.zeros((bsz,) + layer.out_shape, layer.threshold, spiking))
    rasters = [np.zeros((T, bsz) + l.out_shape, dtype=np.uint8) for l in snn.layers] \
        if record.rasters else None
    history = [np.zeros((T, bsz) + l.out_shape, dtype=F64) for l in snn.layers] \
        if record.input_history else None
    out_potential = np.zeros((T, bsz) + snn.layers[-1].out_shape, dtype=F64)

    for t in range(T):
        spikes = train[t]
        for i, state in enumerate(states):
            z = rt.layer_current(i, spikes)
            if history is not None:
                history[i][t] = z
            spikes = step_layer(state, z)
            if rasters is not None:
                rasters[i][t] = spikes
        out_potential[t] = states[-1].potential

    enc = LayerTrace(
        name="encoder", kind=L.INPUT, threshold=float(snn.kappa0), is_output=False,
        spike_count=train.sum(axis=0, dtype=np.int64), potential=enc_v,
        cumulative_input=enc_cum,
        raster=train if record.rasters else None)
    traces = []
    for i, (layer, state) in enumerate(zip(snn.layers, states)):
        traces.append(LayerTrace(
            name=layer.name, kind=layer.kind, threshold=layer.threshold,
            is_output=(i == len(snn.layers) - 1),
            spike_count=state.spike_count, potential=state.potential,
            cumulative_input=state.cumulative_input,
            raster=rasters[i] if rasters else None,
            input_history=history[i] if history else None))
    return BatchTrace(timesteps=T, tre_eta=snn.tre_eta, numeric_mode=snn.numeric_mode,
                      encoder=enc, layers=tuple(traces),
                      output_potential_per_step=out_potential)


@dataclass(frozen=True)
class BatchTrace(SimTrace):
    """SimTrace whose arrays carry a leading batch dimension (time-major for
    per-step records)."""

    def sample(self, i: int) -> SimTrace:
        """A single-sample view (no copies)."""
        def cut(lt: LayerTrace) -> LayerTrace:
            return LayerTrace(
                name=lt.name, kind=lt.kind, threshold=lt.threshold, is_output=lt.is_output,
                spike_count=lt.spike_count[i], potential=lt.potential[i],
                cumulative_input=lt.cumulative_input[i],
                raster=None if lt.raster is None else lt.raster[:, i],
                input_history=None if lt.input_history is None else lt.input_history[:, i])
        return SimTrace(timesteps=self.timesteps, tre_eta=self.tre_eta,
                        numeric_mode=self.numeric_mode, encoder=cut(self.encoder),
                        layers=tuple(cut(lt) for lt in self.layers),
                        output_potential_per_step=self.output_potential_per_step[:, i])

    @property
    def batch_size(self) -> int:
        return int(self.layers[-1].potential.shape[0])


def simulate(snn: SnnModel, x: np.ndarray, timesteps: int | None = None,
             record: RecordFlags = RecordFlags()) -> SimTrace:
    """Simulate a single input image through the network."""
    return simulate_batch(snn, np.asarray(x)[None], timesteps, record).sample(0)


def classify(trace: SimTrace) -> int:
    """Readout label: argmax of the output layer's accumulated potential at T
    (ties resolve to the lowest index)."""
    out = trace.layers[-1]
    if not out.is_output:
        raise DataError("trace carries no output layer")
    return int(np.argmax(out.potential.reshape(-1)))


def classify_batch(trace: BatchTrace) -> np.ndarray:
    out = trace.layers[-1]
    return np.argmax(out.potential.reshape(out.potential.shape[0], -1), axis=1)


def _counters_at(trace: SimTrace, n: int, t: int):
    lt = trace.layer(n)
    if t < 1 or t > trace.timesteps:
        raise DataError(f"t must be in [1, {trace.timesteps}], got {t}")
    if t == trace.timesteps:
        return lt.spike_count, lt.potential, lt.cumulative_input
    if lt.raster is None:
        raise DataError("intermediate-time queries need rasters recorded")
    count = lt.raster[:t].sum(axis=0, dtype=np.int64)
    if lt.input_history is not None:
        cum = lt.input_history[:t].sum(axis=0)
    elif n == 0:
        cum = lt.cumulative_input / trace.timesteps * t  # constant encoder current
    else:
        raise DataError("intermediate-time potentials need input_history recorded")
    # Conservation identity inverted: V(t) = cum_in(t) - N(t) * V_thr.
    pot = cum - count * lt.threshold
    return count, pot, cum


def spiking_rate(trace: SimTrace, n: int, i: int, t: int | None = None) -> float:
    """r_i(t) = spikes emitted / elapsed timesteps."""
    t = trace.timesteps if t is None else t
    count, _, _ = _counters_at(trace, n, t)
    return float(count.reshape(-1)[i]) / t


def residual_delta(trace: SimTrace, n: int, i: int, t: int | None = None) -> float:
    """Residual spiking rate V_i(t) / (t * V_thr), the per-neuron error term."""
    t = trace.timesteps if t is None else t
    lt = trace.layer(n)
    _, pot, _ = _counters_at(trace, n, t)
    return float(pot.reshape(-1)[i]) / (t * lt.threshold)
