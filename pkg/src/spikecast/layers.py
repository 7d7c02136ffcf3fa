"""Layer descriptions and pure shape arithmetic.

All tensors are channels-first row-major. Shapes exclude the batch
dimension: images are (C, H, W), flat vectors are (M,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError, ShapeChainError

INPUT = "input"
CONV2D = "conv2d"
DENSE = "dense"
AVGPOOL = "avgpool"
BATCHNORM = "batchnorm"
RELU = "relu"
FLATTEN = "flatten"

LAYER_KINDS = (INPUT, CONV2D, DENSE, AVGPOOL, BATCHNORM, RELU, FLATTEN)

# Layer kinds that own parameter tensors.
PARAMETRIC = (CONV2D, DENSE, BATCHNORM)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a CNN: a kind, its geometry, and parameter tensor names.

    ``geometry`` keys by kind:
      conv2d:    stride, padding
      avgpool:   window, stride
      batchnorm: epsilon (the numerical-stability constant baked in at training)
      others:    empty
    ``param_refs`` maps slot name (weights, bias, gamma, beta, mean, variance)
    to a tensor name in the model's parameter table.
    """

    name: str
    kind: str
    geometry: dict = field(default_factory=dict)
    param_refs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DataError(f"layer '{self.name}': unsupported kind '{self.kind}'")

    def geom(self, key: str) -> int | float:
        try:
            return self.geometry[key]
        except KeyError:
            raise DataError(f"layer '{self.name}': missing geometry field '{key}'") from None

    def ref(self, slot: str) -> str:
        try:
            return self.param_refs[slot]
        except KeyError:
            raise DataError(f"layer '{self.name}': missing param_ref '{slot}'") from None


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    """Spatial size of a zero-padded cross-correlation output."""
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def pool_output_hw(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    """Spatial size of an unpadded pooling output; windows must tile exactly."""
    if window > h or window > w:
        raise ShapeChainError(f"pool window {window} exceeds input {h}x{w}")
    if (h - window) % stride or (w - window) % stride:
        raise ShapeChainError(
            f"pool window {window} stride {stride} does not divide {h}x{w} evenly"
        )
    return (h - window) // stride + 1, (w - window) // stride + 1


def infer_output_shape(layer: LayerSpec, in_shape: tuple, param_shapes: dict) -> tuple:
    """Output shape of ``layer`` on ``in_shape``, or raise ShapeChainError.

    ``param_shapes`` maps tensor name to its shape tuple, used to read kernel
    geometry and to cross-check channel counts.
    """
    kind = layer.kind
    if kind == INPUT:
        return in_shape
    if kind == CONV2D:
        if len(in_shape) != 3:
            raise ShapeChainError(f"layer '{layer.name}': conv2d needs a CxHxW input, got {in_shape}")
        c, h, w = in_shape
        wshape = param_shapes[layer.ref("weights")]
        if len(wshape) != 4:
            raise ShapeChainError(f"layer '{layer.name}': conv weights must be OxCxKhxKw, got {wshape}")
        o, wc, kh, kw = wshape
        if wc != c:
            raise ShapeChainError(
                f"layer '{layer.name}': weight input channels {wc} != incoming channels {c}"
            )
        stride, padding = int(layer.geom("stride")), int(layer.geom("padding"))
        if stride < 1 or padding < 0:
            raise ShapeChainError(f"layer '{layer.name}': bad stride/padding {stride}/{padding}")
        oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
        if oh < 1 or ow < 1:
            raise ShapeChainError(f"layer '{layer.name}': kernel {kh}x{kw} too large for {h}x{w}")
        bshape = param_shapes[layer.ref("bias")]
        if bshape != (o,):
            raise ShapeChainError(f"layer '{layer.name}': bias shape {bshape} != ({o},)")
        return (o, oh, ow)
    if kind == DENSE:
        if len(in_shape) != 1:
            raise ShapeChainError(
                f"layer '{layer.name}': dense needs a flat input (flatten first), got {in_shape}"
            )
        wshape = param_shapes[layer.ref("weights")]
        if len(wshape) != 2 or wshape[1] != in_shape[0]:
            raise ShapeChainError(
                f"layer '{layer.name}': weights {wshape} incompatible with input ({in_shape[0]},)"
            )
        n = wshape[0]
        bshape = param_shapes[layer.ref("bias")]
        if bshape != (n,):
            raise ShapeChainError(f"layer '{layer.name}': bias shape {bshape} != ({n},)")
        return (n,)
    if kind == AVGPOOL:
        if len(in_shape) != 3:
            raise ShapeChainError(f"layer '{layer.name}': avgpool needs a CxHxW input, got {in_shape}")
        c, h, w = in_shape
        window, stride = int(layer.geom("window")), int(layer.geom("stride"))
        if window < 1 or stride < 1:
            raise ShapeChainError(f"layer '{layer.name}': bad window/stride {window}/{stride}")
        try:
            oh, ow = pool_output_hw(h, w, window, stride)
        except ShapeChainError as exc:
            raise ShapeChainError(f"layer '{layer.name}': {exc}") from None
        return (c, oh, ow)
    if kind == BATCHNORM:
        channels = in_shape[0]
        for slot in ("gamma", "beta", "mean", "variance"):
            pshape = param_shapes[layer.ref(slot)]
            if pshape != (channels,):
                raise ShapeChainError(
                    f"layer '{layer.name}': {slot} shape {pshape} != ({channels},)"
                )
        return in_shape
    if kind == RELU:
        return in_shape
    if kind == FLATTEN:
        n = 1
        for d in in_shape:
            n *= d
        return (n,)
    raise DataError(f"layer '{layer.name}': unsupported kind '{kind}'")
