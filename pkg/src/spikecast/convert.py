"""CNN-to-SNN conversion.

Pipeline: fold batchnorm into the preceding layer's weights and bias,
measure per-layer activation maxima on calibration data, rewrite weights
and thresholds so the peak per-step current exactly saturates each
layer's threshold, optionally add the residual-flush bias, optionally
quantize to fixed point.

Conversion modes:
  ecc  weights scaled by kappa_n * lam[n-1]/lam[n], per-step bias current
       kappa_n * b / lam[n], threshold kappa_n
  wn   the same rewrite with kappa_n == 1 (threshold 1 everywhere)
  tb   weights untouched, threshold lam[n]/lam[n-1], per-step bias
       current b / lam[n-1]

All three put the layer-n spiking rate at activation/lam[n]; they differ
only by a per-layer positive rescaling of currents and thresholds, so
readout argmax agrees in exact arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import DataError
from .models import CnnModel, DatasetBundle, Stage, forward_batch, iter_stages

MODES = ("ecc", "wn", "tb")


@dataclass(frozen=True)
class CalibrationStats:
    """Per-layer activation maxima; index 0 is the input layer (always 1)."""

    lambdas: tuple
    sample_count: int
    histograms: tuple | None = None  # optional (edges, counts) per layer

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not self.lambdas or self.lambdas[0] != 1.0:
            raise DataError("calibration stats: lambda_0 must be 1")
        for i, lam in enumerate(self.lambdas[1:], start=1):
            if not lam > 0:
                raise DataError(f"calibration stats: lambda_{i} = {lam} is not positive")


@dataclass(frozen=True)
class ConversionConfig:
    """Knobs of the conversion.

    kappa may be a scalar applied to every layer or a per-layer sequence.
    eta is the residual-flush strength, used only in ecc mode. epsilon
    overrides the batchnorm stability constant stored in the model when
    set; None keeps each layer's own value. quant_bits enables fixed
    point after conversion.
    """

    mode: str = "ecc"
    kappa: float | tuple = 100.0
    kappa0: float = 100.0
    eta: float = 0.5
    epsilon: float | None = None
    timesteps: int = 256
    quant_bits: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"conversion mode must be one of {MODES}, got '{self.mode}'")
        if not 0 <= self.eta < 1:
            raise DataError(f"eta must be in [0, 1), got {self.eta}")
        if self.timesteps < 1:
            raise DataError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.kappa0 < 1:
            raise DataError(f"kappa0 must be >= 1, got {self.kappa0}")
        kappas = [self.kappa] if np.isscalar(self.kappa) else list(self.kappa)
        for k in kappas:
            if k < 1:
                raise DataError(f"kappa values must be >= 1, got {k}")
        if self.quant_bits is not None and self.quant_bits < 2:
            raise DataError(f"quant_bits must be >= 2, got {self.quant_bits}")

    def kappa_list(self, n_layers: int) -> list[float]:
        if np.isscalar(self.kappa):
            return [float(self.kappa)] * n_layers
        ks = [float(k) for k in self.kappa]
        if len(ks) < n_layers:
            raise DataError(f"kappa vector has {len(ks)} entries for {n_layers} layers")
        return ks[:n_layers]

    def to_dict(self) -> dict:
        kappa = self.kappa if np.isscalar(self.kappa) else list(self.kappa)
        return {"mode": self.mode, "kappa": kappa, "kappa0": self.kappa0, "eta": self.eta,
                "epsilon": self.epsilon, "timesteps": self.timesteps,
                "quant_bits": self.quant_bits}


@dataclass(frozen=True)
class SnnLayer:
    """One spiking layer: synapse weights, per-timestep bias current, threshold.

    Pool layers carry a single shared synapse weight in ``pool_scale``
    instead of a weight tensor. ``bias_current`` is injected into every
    neuron at every timestep (broadcast per channel for conv layers).
    """

    name: str
    kind: str  # conv2d | dense | avgpool
    threshold: float
    weights: np.ndarray | None = None
    bias_current: np.ndarray | None = None
    pool_scale: float | None = None
    geometry: dict = field(default_factory=dict)
    out_shape: tuple = ()
    flatten_before: bool = False

    def __post_init__(self):
        object.__setattr__(self, "out_shape", tuple(int(d) for d in self.out_shape))
        if not self.threshold > 0:
            raise DataError(f"snn layer '{self.name}': threshold must be positive")

    @property
    def neuron_count(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass(frozen=True)
class SnnModel:
    """A converted spiking network plus the provenance of its conversion."""

    name: str
    input_shape: tuple
    layers: tuple
    kappa0: float
    timesteps: int
    tre_eta: float = 0.0
    numeric_mode: str = "float"
    quant_bits: int | None = None
    provenance: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DataError("snn model has no layers")
        if self.numeric_mode not in ("float", "fixed_point"):
            raise DataError(f"unknown numeric_mode '{self.numeric_mode}'")

    @property
    def hidden_layers(self) -> tuple:
        """Spiking layers; the final layer integrates without firing."""
        return self.layers[:-1]

    @property
    def output_layer(self) -> SnnLayer:
        return self.layers[-1]


def fold_batchnorm(model: CnnModel, epsilon: float | None = None) -> CnnModel:
    """Fold every batchnorm into the preceding conv/dense layer.

    scale = gamma / sqrt(variance + epsilon); weights become scale * W,
    bias becomes scale * (b - mean) + beta. The stored per-layer epsilon
    is used unless an override is given (the override exists so the cost
    of ignoring the training framework's constant can be measured).
    """
    stages = iter_stages(model)  # validates bn placement
    new_layers = []
    new_params = dict(model.params)
    bn_indices = {s.bn_index for s in stages if s.bn_index is not None}
    for idx, layer in enumerate(model.layers):
        if idx in bn_indices:
            continue
        stage = next((s for s in stages if s.layer_index == idx and s.bn_index is not None), None)
        if stage is None:
            new_layers.append(layer)
            continue
        bn = model.layers[stage.bn_index]
        eps = float(bn.geom("epsilon")) if epsilon is None else float(epsilon)
        g, b_, m, v = (np.asarray(model.params[bn.ref(s)], dtype=np.float64)
                       for s in ("gamma", "beta", "mean", "variance"))
        if np.any(v < 0):
            raise DataError(f"layer '{bn.name}': negative variance")
        scale = g / np.sqrt(v + eps)
        w = np.asarray(model.params[layer.ref("weights")], dtype=np.float64)
        b = np.asarray(model.params[layer.ref("bias")], dtype=np.float64)
        wshape = (-1,) + (1,) * (w.ndim - 1)
        new_params[layer.ref("weights")] = (w * scale.reshape(wshape)).astype(np.float32)
        new_params[layer.ref("bias")] = (scale * (b - m) + b_).astype(np.float32)
        for slot in ("gamma", "beta", "mean", "variance"):
            new_params.pop(bn.ref(slot), None)
        new_layers.append(layer)
    return CnnModel(model.name, model.input_shape, tuple(new_layers), new_params,
                    dict(model.metadata))


def calibrate(model: CnnModel, calib: DatasetBundle, histogram_bins: int | None = None,
              batch_size: int = 64) -> CalibrationStats:
    """Measure lambda_n, the maximum stage activation over the calibration set.

    Stage outputs are post-ReLU maps, pooled maps, or raw logits for the
    final stage. A stage that never activates cannot be normalised and is
    reported as degenerate.
    """
    if model.has_batchnorm():
        raise DataError("calibrate: fold batchnorm first")
    if len(calib) == 0:
        raise DataError("calibrate: empty calibration set")
    stages = iter_stages(model)
    maxima = np.full(len(stages), -np.inf)
    hists = [np.zeros(histogram_bins, dtype=np.int64) for _ in stages] if histogram_bins else None
    edges = None
    X = calib.inputs
    for lo in range(0, len(calib), batch_size):
        _, acts = forward_batch(model, X[lo:lo + batch_size])
        for i, a in enumerate(acts):
            maxima[i] = max(maxima[i], float(a.max()))
    if histogram_bins:
        edges = [np.linspace(0.0, max(m, 1e-12), histogram_bins + 1) for m in maxima]
        for lo in range(0, len(calib), batch_size):
            _, acts = forward_batch(model, X[lo:lo + batch_size])
            for i, a in enumerate(acts):
                hists[i] += np.histogram(a, bins=edges[i])[0]
    for i, m in enumerate(maxima):
        if not m > 0:
            raise DataError(
                f"calibrate: stage {i + 1} '{stages[i].name}' has max activation {m}; "
                "degenerate layer cannot be normalised"
            )
    lambdas = (1.0,) + tuple(float(m) for m in maxima)
    histograms = tuple(zip([e.tolist() for e in edges], [h.tolist() for h in hists])) if hists else None
    return CalibrationStats(lambdas=lambdas, sample_count=len(calib), histograms=histograms)


def convert(model: CnnModel, stats: CalibrationStats, cfg: ConversionConfig) -> SnnModel:
    """Rewrite a BN-free CNN into a spiking network under ``cfg.mode``.

    Average pools become fixed-weight synapse layers (uniform weight
    1/window^2 before rescaling) with their own threshold, treated like
    any other layer in the rate framework.
    """
    if model.has_batchnorm():
        raise DataError("convert: fold batchnorm first")
    stages = iter_stages(model)
    lam = stats.lambdas
    if len(lam) != len(stages) + 1:
        raise DataError(
            f"convert: stats carry {len(lam)} lambdas but model has {len(stages)} stages"
        )
    kappas = cfg.kappa_list(len(stages))
    out_layers = []
    for k, stage in enumerate(stages, start=1):
        ratio_prev = lam[k - 1] / lam[k]
        layer = model.layers[stage.layer_index]
        if cfg.mode == "ecc":
            wscale, bscale, thr = kappas[k - 1] * ratio_prev, kappas[k - 1] / lam[k], kappas[k - 1]
        elif cfg.mode == "wn":
            wscale, bscale, thr = ratio_prev, 1.0 / lam[k], 1.0
        else:  # tb
            wscale, bscale, thr = 1.0, 1.0 / lam[k - 1], lam[k] / lam[k - 1]
        if stage.kind == L.AVGPOOL:
            window = int(layer.geom("window"))
            out_layers.append(SnnLayer(
                name=stage.name, kind=L.AVGPOOL, threshold=thr,
                pool_scale=wscale / float(window * window),
                geometry={"window": window, "stride": int(layer.geom("stride"))},
                out_shape=stage.out_shape, flatten_before=stage.flatten_before))
            continue
        w = np.asarray(model.params[layer.ref("weights")], dtype=np.float64)
        b = np.asarray(model.params[layer.ref("bias")], dtype=np.float64)
        geometry = {}
        if stage.kind == L.CONV2D:
            geometry = {"stride": int(layer.geom("stride")), "padding": int(layer.geom("padding"))}
        out_layers.append(SnnLayer(
            name=stage.name, kind=stage.kind, threshold=thr,
            weights=w * wscale, bias_current=b * bscale,
            geometry=geometry, out_shape=stage.out_shape, flatten_before=stage.flatten_before))
    provenance = {"conversion": cfg.to_dict(),
                  "calibration": {"lambdas": list(lam), "sample_count": stats.sample_count},
                  "source_model": model.name}
    return SnnModel(name=model.name, input_shape=model.input_shape, layers=tuple(out_layers),
                    kappa0=float(cfg.kappa0), timesteps=int(cfg.timesteps),
                    provenance=provenance, metadata=dict(model.metadata))


def apply_tre(snn: SnnModel, eta: float, timesteps: int) -> SnnModel:
    """Add the residual-flush current eta * V_thr / T to every neuron's bias.

    Over T steps the extra charge totals eta * V_thr, which converts a
    trapped end-of-train residual above (1 - eta) * V_thr into one final
    spike and tightens the residual error range.
    """
    if not 0 <= eta < 1:
        raise DataError(f"eta must be in [0, 1), got {eta}")
    if snn.numeric_mode != "float":
        raise DataError("apply_tre: requires a float-mode model (quantize afterwards)")
    if eta == 0:
        return snn
    if snn.tre_eta != 0:
        raise DataError("apply_tre: residual-flush bias already applied")
    if timesteps < 1:
        raise DataError(f"timesteps must be >= 1, got {timesteps}")
    new_layers = []
    for layer in snn.layers:
        boost = eta * layer.threshold / timesteps
        if layer.kind == L.AVGPOOL:
            c = layer.out_shape[0]
            new_layers.append(replace(layer, bias_current=np.full(c, boost, dtype=np.float64)))
        else:
            new_layers.append(replace(layer, bias_current=layer.bias_current + boost))
    return replace(snn, layers=tuple(new_layers), tre_eta=float(eta), timesteps=int(timesteps))


def quantize(snn: SnnModel, bits: int) -> SnnModel:
    """Convert weights, thresholds and bias currents to b-bit fixed point.

    Per layer: weights are normalised into [-1, 1] by their absolute
    maximum, the threshold and bias current are scaled by the same
    factor, and everything is multiplied by 2^b and rounded to the
    nearest integer (ties to even). Values land in [-2^b, 2^b].
    """
    if snn.numeric_mode != "float":
        raise DataError("quantize: model is already fixed point")
    if bits < 2:
        raise DataError(f"quantize: bits must be >= 2, got {bits}")
    scale_up = float(2 ** bits)
    lo, hi = -(2 ** bits), 2 ** bits
    new_layers = []
    for layer in snn.layers:
        if layer.kind == L.AVGPOOL:
            s = abs(layer.pool_scale)
            if s == 0:
                raise DataError(f"quantize: layer '{layer.name}' has all-zero weights")
            qpool = float(np.clip(np.round(layer.pool_scale / s * scale_up), lo, hi))
            qbias = np.clip(np.round(layer.bias_current / s * scale_up), lo, hi) \
                if layer.bias_current is not None else None
            qthr = float(np.round(layer.threshold / s * scale_up))
            new_layers.append(replace(layer, pool_scale=qpool, bias_current=qbias,
                                      threshold=max(qthr, 1.0)))
            continue
        s = float(np.max(np.abs(layer.weights)))
        if s == 0:
            raise DataError(f"quantize: layer '{layer.name}' has all-zero weights")
        qw = np.clip(np.round(layer.weights / s * scale_up), lo, hi)
        qb = np.clip(np.round(layer.bias_current / s * scale_up), -(2 ** 62), 2 ** 62)
        qthr = float(np.round(layer.threshold / s * scale_up))
        new_layers.append(replace(layer, weights=qw, bias_current=qb,
                                  threshold=max(qthr, 1.0)))
    return replace(snn, layers=tuple(new_layers), numeric_mode="fixed_point",
                   quant_bits=int(bits))


def convert_pipeline(model: CnnModel, calib: DatasetBundle, cfg: ConversionConfig,
                     stats: CalibrationStats | None = None) -> SnnModel:
    """Fold, calibrate (unless given), convert, flush-bias, quantize."""
    folded = fold_batchnorm(model, cfg.epsilon) if model.has_batchnorm() else model
    if stats is None:
        stats = calibrate(folded, calib)
    snn = convert(folded, stats, cfg)
    if cfg.mode == "ecc" and cfg.eta > 0:
        snn = apply_tre(snn, cfg.eta, cfg.timesteps)
    if cfg.quant_bits is not None:
        snn = quantize(snn, cfg.quant_bits)
    return snn
