"""Energy and accuracy accounting.

CNN cost is multiply-accumulate count, fixed by geometry:
sum over conv/dense layers of (2 * f_in + 1) * M. SNN cost is synaptic
operations: every spike costs one operation per outgoing synapse it
traverses. Fan-outs are counted by exact synapse enumeration per neuron
(border positions of a convolution feed fewer windows), so the spike-wise
brute-force total and the vectorised total agree exactly.

Layer indexing in all reports matches the calibration lambdas: 0 is the
input encoder, 1..L are the spiking stages, L being the readout.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .convert import CalibrationStats, SnnModel
from .engine import BatchTrace, RecordFlags, SimTrace, classify_batch, simulate_batch
from .errors import DataError
from .models import CnnModel, DatasetBundle, forward_batch, iter_stages

CHUNK = 64  # samples per simulation chunk; fixed so results never depend on job count

SWEEP_COLUMNS = ("T", "cnn_acc", "snn_acc", "loss_pp", "synops", "macs")


@dataclass(frozen=True)
class GeomLayer:
    """Geometry of one stage, enough for all operation counting."""

    name: str
    kind: str  # input | conv2d | dense | avgpool
    in_shape: tuple
    out_shape: tuple
    kernel: tuple = ()      # (kh, kw) for conv
    stride: int = 1
    padding: int = 0
    window: int = 0

    @property
    def neurons(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def fan_in(self) -> int:
        if self.kind == L.CONV2D:
            return self.in_shape[0] * self.kernel[0] * self.kernel[1]
        if self.kind == L.DENSE:
            return int(np.prod(self.in_shape))
        if self.kind == L.AVGPOOL:
            return self.window * self.window
        return 0


def geometry_chain(model) -> list[GeomLayer]:
    """Stage geometry for a BN-folded CnnModel or a converted SnnModel,
    with the input encoder as stage 0."""
    chain = [GeomLayer(name="input", kind=L.INPUT, in_shape=(), out_shape=tuple(model.input_shape))]
    if isinstance(model, SnnModel):
        for layer in model.layers:
            in_shape = chain[-1].out_shape
            if layer.kind == L.CONV2D:
                chain.append(GeomLayer(layer.name, L.CONV2D, in_shape, layer.out_shape,
                                       kernel=tuple(layer.weights.shape[2:]),
                                       stride=layer.geometry["stride"],
                                       padding=layer.geometry["padding"]))
            elif layer.kind == L.DENSE:
                chain.append(GeomLayer(layer.name, L.DENSE, in_shape, layer.out_shape))
            else:
                chain.append(GeomLayer(layer.name, L.AVGPOOL, in_shape, layer.out_shape,
                                       window=layer.geometry["window"],
                                       stride=layer.geometry["stride"]))
        return chain
    if model.has_batchnorm():
        raise DataError("operation counts expect a BN-folded model")
    for stage in iter_stages(model):
        in_shape = chain[-1].out_shape
        layer = model.layers[stage.layer_index]
        if stage.kind == L.CONV2D:
            w = np.asarray(model.params[layer.ref("weights")])
            chain.append(GeomLayer(stage.name, L.CONV2D, in_shape, stage.out_shape,
                                   kernel=tuple(w.shape[2:]),
                                   stride=int(layer.geom("stride")),
                                   padding=int(layer.geom("padding"))))
        elif stage.kind == L.DENSE:
            chain.append(GeomLayer(stage.name, L.DENSE, in_shape, stage.out_shape))
        else:
            chain.append(GeomLayer(stage.name, L.AVGPOOL, in_shape, stage.out_shape,
                                   window=int(layer.geom("window")),
                                   stride=int(layer.geom("stride"))))
    return chain


def mac_ops(model) -> int:
    """Multiply-accumulate count of the CNN: (2 f_in + 1) M over conv and
    dense stages (pooling performs no multiplies)."""
    total = 0
    for g in geometry_chain(model):
        if g.kind in (L.CONV2D, L.DENSE):
            total += (2 * g.fan_in + 1) * g.neurons
    return int(total)


@dataclass(frozen=True)
class FanCounts:
    """Per-stage connection counts; ``fan_out`` arrays are per neuron."""

    names: tuple
    neuron_counts: tuple
    fan_in: tuple
    fan_out: tuple          # per-stage flat int64 arrays (exact, per neuron)
    fan_out_mean: tuple

    @property
    def num_layers(self) -> int:
        return len(self.names)


def _coverage(in_len: int, k: int, stride: int, padding: int, out_len: int) -> np.ndarray:
    """How many sliding windows cover each input position along one axis."""
    cover = np.zeros(in_len, dtype=np.int64)
    for o in range(out_len):
        lo = o * stride - padding
        cover[max(lo, 0):min(lo + k, in_len)] += 1
    return cover


def fan_counts(model) -> FanCounts:
    """Exact per-neuron output-connection counts for every spike source.

    Stage n's fan-out counts the next stage's weights applied to each of
    its neurons; the final readout stage has fan-out zero. Pure geometry:
    independent of weights and inputs.
    """
    chain = geometry_chain(model)
    names, neurons, f_in, f_out = [], [], [], []
    for i, g in enumerate(chain):
        names.append(g.name)
        neurons.append(g.neurons)
        f_in.append(g.fan_in)
        if i + 1 >= len(chain):
            f_out.append(np.zeros(g.neurons, dtype=np.int64))
            continue
        nxt = chain[i + 1]
        src_shape = g.out_shape
        if nxt.kind == L.DENSE:
            f_out.append(np.full(g.neurons, nxt.neurons, dtype=np.int64))
        elif nxt.kind == L.CONV2D:
            c, h, w = src_shape
            covh = _coverage(h, nxt.kernel[0], nxt.stride, nxt.padding, nxt.out_shape[1])
            covw = _coverage(w, nxt.kernel[1], nxt.stride, nxt.padding, nxt.out_shape[2])
            per_pos = np.outer(covh, covw) * nxt.out_shape[0]
            f_out.append(np.broadcast_to(per_pos, (c, h, w)).reshape(-1).astype(np.int64))
        else:  # avgpool: channel-preserving, one synapse per covering window
            c, h, w = src_shape
            covh = _coverage(h, nxt.window, nxt.stride, 0, nxt.out_shape[1])
            covw = _coverage(w, nxt.window, nxt.stride, 0, nxt.out_shape[2])
            per_pos = np.outer(covh, covw)
            f_out.append(np.broadcast_to(per_pos, (c, h, w)).reshape(-1).astype(np.int64))
    means = tuple(float(a.mean()) for a in f_out)
    return FanCounts(names=tuple(names), neuron_counts=tuple(neurons),
                     fan_in=tuple(f_in), fan_out=tuple(f_out), fan_out_mean=means)


def _stage_spike_counts(trace: SimTrace) -> list[np.ndarray]:
    """Flat spike counts per stage 0..L, batch-summed when batched."""
    counts = []
    for n in range(0, trace.num_layers + 1):
        lt = trace.layer(n)
        arr = lt.spike_count
        if isinstance(trace, BatchTrace):
            arr = arr.sum(axis=0)
        counts.append(arr.reshape(-1).astype(np.int64))
    return counts


def synaptic_ops(trace: SimTrace, fans: FanCounts) -> int:
    """Total synaptic operations: every spike times its neuron's exact fan-out."""
    counts = _stage_spike_counts(trace)
    if len(counts) != fans.num_layers:
        raise DataError(f"trace has {len(counts)} stages, fans describe {fans.num_layers}")
    total = 0
    for cnt, fo in zip(counts, fans.fan_out):
        if cnt.shape != fo.shape:
            raise DataError("fan counts do not match trace layer sizes")
        total += int(cnt @ fo)
    return total


def synaptic_ops_per_step(trace: SimTrace, fans: FanCounts) -> np.ndarray:
    """Per-timestep synaptic operations; needs rasters recorded."""
    series = np.zeros(trace.timesteps, dtype=np.int64)
    for n in range(0, trace.num_layers + 1):
        lt = trace.layer(n)
        if lt.is_output:
            continue
        if lt.raster is None:
            raise DataError("per-step synaptic ops need rasters recorded")
        r = lt.raster.reshape(trace.timesteps, -1, fans.fan_out[n].size).sum(axis=1) \
            if lt.raster.ndim > 2 else lt.raster.reshape(trace.timesteps, -1)
        series += r.astype(np.int64) @ fans.fan_out[n]
    return series


def _trapped_residual(lt, timesteps: int, tre_eta: float):
    """Flush-adjusted residual rate of charge-holding neurons.

    Only neurons ending with non-negative potential hold trapped charge;
    inhibited units (net-negative input keeps V below zero) are correctly
    silent rather than lossy and are excluded. The flush charge
    eta * V_thr that the residual-elimination bias deliberately injects is
    subtracted, so with eta = 0 this is exactly V(T) / (T * V_thr).
    """
    mask = lt.potential >= 0
    adj = (lt.potential - tre_eta * lt.threshold) / (timesteps * lt.threshold)
    return np.abs(adj[mask])


def residual_stats(trace: SimTrace) -> list[dict]:
    """Mean and max absolute trapped-residual rate per hidden stage at T."""
    rows = []
    for n in range(1, trace.num_layers + 1):
        lt = trace.layer(n)
        if lt.is_output:
            continue
        delta = _trapped_residual(lt, trace.timesteps, trace.tre_eta)
        rows.append({"layer": n, "name": lt.name,
                     "mean_abs_delta": float(delta.mean()) if delta.size else 0.0,
                     "max_abs_delta": float(delta.max()) if delta.size else 0.0})
    return rows


def expected_spike_counts(model: CnnModel, stats: CalibrationStats, x: np.ndarray,
                          timesteps: int) -> list[np.ndarray]:
    """Rate-ideal spike counts floor(T * a / lambda), clipped to T, for each
    hidden stage (the readout integrates and never spikes)."""
    _, acts = forward_batch(model, np.asarray(x)[None])
    out = []
    for k, a in enumerate(acts[:-1], start=1):
        ideal = np.floor(timesteps * a[0] / stats.lambdas[k])
        out.append(np.clip(ideal, 0, timesteps).astype(np.int64))
    return out


# ------------------------------------------------------------- evaluation

def _eval_chunk(args):
    snn, X, T = args
    trace = simulate_batch(snn, X, T)
    preds = classify_batch(trace)
    counts = _stage_spike_counts(trace)
    residuals = []
    for n in range(1, trace.num_layers + 1):
        lt = trace.layer(n)
        if lt.is_output:
            continue
        delta = _trapped_residual(lt, T, trace.tre_eta)
        residuals.append((n, lt.name, float(delta.sum()), int(delta.size),
                          float(delta.max()) if delta.size else 0.0))
    return preds, counts, residuals


def evaluate(snn: SnnModel, bundle: DatasetBundle, timesteps: int | None = None,
             jobs: int = 1) -> dict:
    """Classify a bundle; returns predictions, accuracy and spike totals.

    Work is split into fixed-size chunks merged in order, so results are
    bit-identical for any job count.
    """
    T = snn.timesteps if timesteps is None else int(timesteps)
    X = bundle.inputs
    tasks = [(snn, X[lo:lo + CHUNK], T) for lo in range(0, len(bundle), CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_chunk, tasks))
    else:
        results = [_eval_chunk(t) for t in tasks]
    preds = np.concatenate([r[0] for r in results])
    counts = [np.zeros_like(c) for c in results[0][1]]
    for _, cs, _ in results:
        for acc, c in zip(counts, cs):
            acc += c
    res_agg = {}
    for _, _, rows in results:
        for layer, name, s, k, mx in rows:
            cur = res_agg.setdefault(layer, [name, 0.0, 0, 0.0])
            cur[1] += s
            cur[2] += k
            cur[3] = max(cur[3], mx)
    residuals = [{"layer": layer, "name": v[0],
                  "mean_abs_delta": (v[1] / v[2]) if v[2] else 0.0,
                  "max_abs_delta": v[3]} for layer, v in sorted(res_agg.items())]
    accuracy = float(np.mean(preds == bundle.labels.astype(np.int64)))
    return {"predictions": preds, "accuracy": accuracy, "stage_spike_counts": counts,
            "residuals": residuals, "timesteps": T, "samples": len(bundle)}


@dataclass(frozen=True)
class EnergyReport:
    """Operation-count energy proxies, with per-layer breakdown."""

    cnn_macs: int
    snn_synops: int
    timesteps: int
    samples: int
    per_layer: tuple  # dicts: layer, name, neurons, fan_in, fan_out_mean,
    #                          total_spikes, avg_spikes_per_neuron, synops

    def totals_consistent(self) -> bool:
        return self.snn_synops == sum(r["synops"] for r in self.per_layer)


def energy_report(geom_model, evaluation: dict, fans: FanCounts | None = None) -> EnergyReport:
    """Build the report from an ``evaluate`` result.

    Average spikes per neuron is reported per image (total spikes divided
    by neurons and by the number of images), then implicitly aggregated
    over the set by that mean.
    """
    fans = fan_counts(geom_model) if fans is None else fans
    counts = evaluation["stage_spike_counts"]
    samples = evaluation["samples"]
    rows = []
    for n, (cnt, fo) in enumerate(zip(counts, fans.fan_out)):
        rows.append({
            "layer": n, "name": fans.names[n], "neurons": fans.neuron_counts[n],
            "fan_in": fans.fan_in[n], "fan_out_mean": fans.fan_out_mean[n],
            "total_spikes": int(cnt.sum()),
            "avg_spikes_per_neuron": float(cnt.sum() / (fans.neuron_counts[n] * samples)),
            "synops": int(cnt @ fo),
        })
    return EnergyReport(cnn_macs=mac_ops(geom_model),
                        snn_synops=sum(r["synops"] for r in rows),
                        timesteps=evaluation["timesteps"], samples=samples,
                        per_layer=tuple(rows))


def per_step_synops(snn: SnnModel, bundle: DatasetBundle, timesteps: int | None = None,
                    fans: FanCounts | None = None) -> np.ndarray:
    """Per-timestep synaptic-operation series over a dataset.

    Rasters are recorded one fixed-size chunk at a time and discarded, so
    memory stays bounded; the series sums to the evaluate() total.
    """
    T = snn.timesteps if timesteps is None else int(timesteps)
    fans = fan_counts(snn) if fans is None else fans
    series = np.zeros(T, dtype=np.int64)
    for lo in range(0, len(bundle), CHUNK):
        trace = simulate_batch(snn, bundle.inputs[lo:lo + CHUNK], T,
                               record=RecordFlags(rasters=True))
        series += synaptic_ops_per_step(trace, fans)
    return series


def cnn_accuracy(model: CnnModel, bundle: DatasetBundle, batch_size: int = 256) -> float:
    preds = []
    for lo in range(0, len(bundle), batch_size):
        logits, _ = forward_batch(model, bundle.inputs[lo:lo + batch_size])
        preds.append(np.argmax(logits.reshape(logits.shape[0], -1), axis=1))
    return float(np.mean(np.concatenate(preds) == bundle.labels.astype(np.int64)))


def accuracy_sweep(model: CnnModel, snn_source, bundle: DatasetBundle,
                   t_list: list[int], jobs: int = 1) -> list[dict]:
    """Accuracy and energy versus spike-train length.

    ``snn_source`` is either a fixed SnnModel or a callable T -> SnnModel;
    the callable form re-derives per-timestep biases that depend on T
    (the residual-flush increment scales as 1/T).
    """
    if not t_list:
        raise DataError("accuracy_sweep: empty timestep list")
    folded = model
    cnn_acc = cnn_accuracy(folded, bundle)
    macs = mac_ops(folded)
    rows = []
    fans = None
    for T in t_list:
        snn = snn_source(T) if callable(snn_source) else snn_source
        if fans is None:
            fans = fan_counts(snn)
        ev = evaluate(snn, bundle, T, jobs=jobs)
        synops = sum(int(c @ fo) for c, fo in zip(ev["stage_spike_counts"], fans.fan_out))
        rows.append({"T": int(T), "cnn_acc": cnn_acc, "snn_acc": ev["accuracy"],
                     "loss_pp": (cnn_acc - ev["accuracy"]) * 100.0,
                     "synops": int(synops), "macs": int(macs)})
    return rows


# ------------------------------------------------------------------ reports

def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_COLUMNS})


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_layer_csv(report: EnergyReport, path) -> None:
    cols = ("layer", "name", "neurons", "fan_in", "fan_out_mean",
            "total_spikes", "avg_spikes_per_neuron", "synops")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in report.per_layer:
            writer.writerow({k: row[k] for k in cols})
