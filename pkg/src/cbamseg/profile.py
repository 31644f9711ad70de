"""Static layer/parameter/FLOP profiler for layer-graph descriptions.

Conventions: a multiply-accumulate is 2 FLOPs; convolution costs
``2*k*k*C_in*C_out*H_out*W_out`` plus one add per output when biased; a dense
layer costs ``2*in*out``; pooling and activations cost one op per element.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .cbam import hidden_width

CONVENTION = ("MAC=2 FLOPs; conv 2*k^2*Cin*Cout*Hout*Wout (+Cout*Hout*Wout bias); "
              "dense 2*in*out (+out bias); pool/activation 1 op per element; "
              "CBAM = MLP + pooling + spatial conv")
KINDS = ("conv", "dense", "pool", "activation", "attention-cbam", "head")


class ProfileError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"layer {index}: {message}")
        self.index = index


@dataclass
class LayerSpec:
    kind: str
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    bias: bool = True
    reduction: int = 16
    pool: int = 2  # pooling window/stride for kind == "pool"
    source: int | None = None  # take input from this earlier layer's output (-1 = graph input)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()}


def _conv_cost(i, spec, shape, kernel, bias):
    c, h, w = shape
    if spec.c_in != c:
        raise ProfileError(i, f"expects {spec.c_in} input channels, got {c}")
    if spec.c_out < 1 or kernel < 1 or spec.stride < 1 or spec.pad < 0:
        raise ProfileError(i, "nonpositive conv shape parameter")
    if kernel > h + 2 * spec.pad or kernel > w + 2 * spec.pad:
        raise ProfileError(i, f"kernel {kernel} exceeds padded input {h}x{w}")
    ho = (h + 2 * spec.pad - kernel) // spec.stride + 1
    wo = (w + 2 * spec.pad - kernel) // spec.stride + 1
    params = spec.c_out * spec.c_in * kernel * kernel + (spec.c_out if bias else 0)
    flops = 2 * kernel * kernel * spec.c_in * spec.c_out * ho * wo + (spec.c_out * ho * wo if bias else 0)
    return (spec.c_out, ho, wo), params, flops


def layer_cost(i: int, spec: LayerSpec, shape: tuple) -> tuple[tuple, int, int]:
    """(output shape, parameter count, FLOPs) for one layer."""
    if spec.kind not in KINDS:
        raise ProfileError(i, f"unknown layer kind {spec.kind!r}")
    if spec.kind == "conv":
        return _conv_cost(i, spec, shape, spec.kernel, spec.bias)
    if spec.kind == "head":
        if spec.kernel != 1 or spec.stride != 1 or spec.pad != 0:
            raise ProfileError(i, "head layers are 1x1 projections")
        return _conv_cost(i, spec, shape, 1, spec.bias)
    if spec.kind == "dense":
        n_in = 1
        for v in shape:
            n_in *= v
        if spec.c_in != n_in or spec.c_out < 1:
            raise ProfileError(i, f"dense expects {spec.c_in} inputs, got {n_in}")
        params = spec.c_in * spec.c_out + (spec.c_out if spec.bias else 0)
        return (spec.c_out,), params, 2 * spec.c_in * spec.c_out
    if spec.kind == "activation":
        n = 1
        for v in shape:
            n *= v
        return shape, 0, n
    if len(shape) != 3:
        raise ProfileError(i, f"{spec.kind} needs a [C,H,W] input, got {shape}")
    c, h, w = shape
    if spec.kind == "pool":
        k = spec.pool
        if k < 1 or k > h or k > w:
            raise ProfileError(i, f"pool window {k} does not fit {h}x{w}")
        return (c, h // k, w // k), 0, c * h * w
    # attention-cbam
    if spec.c_in != c:
        raise ProfileError(i, f"CBAM built for {spec.c_in} channels, got {c}")
    if spec.kernel < 1 or spec.kernel % 2 == 0:
        raise ProfileError(i, f"CBAM spatial kernel must be odd, got {spec.kernel}")
    try:
        hid = hidden_width(c, spec.reduction)
    except ValueError as exc:
        raise ProfileError(i, str(exc)) from None
    k = spec.kernel
    params = 2 * c * hid + 2 * k * k + 1
    mlp = 2 * (2 * c * hid + 2 * hid * c)  # shared MLP on both pooled vectors
    pooling = 2 * c * h * w + 2 * c * h * w  # global avg+max, channel avg+max
    conv = 2 * k * k * 2 * h * w + h * w
    return shape, params, mlp + pooling + conv


def profile(graph, input_shape: tuple, count_activations: bool = True) -> dict:
    """Walk the layer graph; returns layers, params, flops, gflops and the convention.

    With ``count_activations=False`` activation layers cost nothing.
    """
    outputs: list[tuple] = []
    shape = tuple(input_shape)
    total_params = 0
    total_flops = 0
    conv_layers = 0
    for i, spec in enumerate(graph):
        if spec.source is not None:
            if spec.source == -1:
                shape = tuple(input_shape)
            elif 0 <= spec.source < i:
                shape = outputs[spec.source]
            else:
                raise ProfileError(i, f"source {spec.source} is not an earlier layer")
        shape, params, flops = layer_cost(i, spec, shape)
        if spec.kind == "activation" and not count_activations:
            flops = 0
        outputs.append(shape)
        total_params += params
        total_flops += flops
        conv_layers += spec.kind in ("conv", "head")
    return {"layers": len(outputs), "conv_layers": conv_layers, "params": total_params,
            "flops": total_flops, "gflops": total_flops / 1e9, "convention": CONVENTION,
            "activations_counted": count_activations}


def graph_from_dicts(items) -> list[LayerSpec]:
    return [LayerSpec(**d) for d in items]
