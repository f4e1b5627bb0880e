"""W1A1 quantization: two-set elastic binarizers with straight-through gradients.

Weights map onto the signed set {-alpha, +alpha} after per-channel mean
centering; activations map onto either the signed set or the unsigned set
{0, alpha} via a learnable scale alpha and threshold beta. Gradients pass
straight through inside the active range and the scale receives the elastic
gradient q - u * 1[in range], where u is the pre-quantization multiple and
q the quantized one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor, apply_op, conv1d, matmul
from .errors import ConfigError, InvalidStateError
from .module import Module

SIGNED = "signed"
UNSIGNED = "unsigned"
PER_TENSOR = "per_tensor"
PER_OUTPUT_CHANNEL = "per_output_channel"

ALPHA_FLOOR = 1e-8

# Module classes a precision spec can quantize.
QUANTIZABLE_CLASSES = frozenset(
    {"linear", "conv", "attention_score", "attention_prob", "ffn_activation"})


@dataclass(frozen=True)
class PrecisionSpec:
    """Per-module-class weight/activation bit widths.

    ``quantized_classes`` names the encoder module classes running at the
    reduced widths; everything else stays at 32 bits.
    """

    weight_bits: int = 32
    activation_bits: int = 32
    quantized_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.weight_bits not in (1, 32) or self.activation_bits not in (1, 32):
            raise ConfigError(
                f"bit widths must be 1 or 32, got W{self.weight_bits}A{self.activation_bits}")
        unknown = set(self.quantized_classes) - QUANTIZABLE_CLASSES
        if unknown:
            raise ConfigError(f"unknown quantized module classes: {sorted(unknown)}")

    @classmethod
    def fp32(cls) -> "PrecisionSpec":
        return cls()

    @classmethod
    def w1a1(cls) -> "PrecisionSpec":
        return cls(weight_bits=1, activation_bits=1, quantized_classes=QUANTIZABLE_CLASSES)

    @classmethod
    def from_label(cls, label: str) -> "PrecisionSpec":
        if label == "FP32":
            return cls.fp32()
        if label == "FP32-W1A1":
            return cls.w1a1()
        raise ConfigError(f"unknown precision label {label!r} (expected 'FP32' or 'FP32-W1A1')")

    @property
    def label(self) -> str:
        return "FP32" if not self.quantized_classes else "FP32-W1A1"

    def quantizes(self, module_class: str) -> bool:
        if module_class not in QUANTIZABLE_CLASSES:
            raise ConfigError(f"unknown module class {module_class!r}")
        return module_class in self.quantized_classes

    def weight_bits_for(self, module_class: str) -> int:
        return self.weight_bits if self.quantizes(module_class) else 32

    def activation_bits_for(self, module_class: str) -> int:
        return self.activation_bits if self.quantizes(module_class) else 32


class BinarizerState(Module):
    """Learnable scale alpha (> 0) and threshold beta for one binarization site."""

    def __init__(self, alpha: np.ndarray, beta: np.ndarray, set_kind: str,
                 granularity: str = PER_TENSOR):
        super().__init__()
        if set_kind not in (SIGNED, UNSIGNED):
            raise ConfigError(f"set_kind must be signed or unsigned, got {set_kind!r}")
        if granularity not in (PER_TENSOR, PER_OUTPUT_CHANNEL):
            raise ConfigError(f"unknown granularity {granularity!r}")
        self.alpha = Tensor(alpha, requires_grad=True)
        self.beta = Tensor(beta, requires_grad=True)
        self.set_kind = set_kind
        self.granularity = granularity

    @classmethod
    def for_weights(cls, w: Tensor, granularity: str = PER_OUTPUT_CHANNEL) -> "BinarizerState":
        """Scale initialized to the mean absolute deviation of the weights."""
        if granularity == PER_TENSOR:
            centered = w.data - w.data.mean()
            alpha = np.asarray(np.abs(centered).mean())
        else:
            axes = _channel_reduce_axes(w)
            mu = w.data.mean(axis=axes, keepdims=True)
            alpha = np.abs(w.data - mu).mean(axis=axes, keepdims=True)
        alpha = np.maximum(alpha, ALPHA_FLOOR)
        return cls(alpha=alpha, beta=np.zeros_like(alpha), set_kind=SIGNED,
                   granularity=granularity)

    @classmethod
    def for_activations(cls, set_kind: str = SIGNED) -> "BinarizerState":
        return cls(alpha=np.asarray(1.0), beta=np.asarray(0.0), set_kind=set_kind,
                   granularity=PER_TENSOR)

    def check(self) -> None:
        if not np.all(self.alpha.data > 0.0):
            raise InvalidStateError("binarizer scale alpha must be positive everywhere")

    def _constrain(self) -> None:
        self.alpha.data = np.maximum(self.alpha.data, ALPHA_FLOOR)


def _channel_reduce_axes(w: Tensor) -> tuple[int, ...]:
    """Axes to reduce for per-output-channel statistics.

    Linear weights are (d_in, d_out): the output channel is the last axis.
    Conv weights are (c_out, c_in, k): the output channel is the first axis.
    """
    if w.ndim == 2:
        return (0,)
    if w.ndim == 3:
        return (1, 2)
    return tuple(range(w.ndim))


def _sign_pos(x: np.ndarray) -> np.ndarray:
    # sign(0) := +1 so the codomain stays two-valued everywhere
    return np.where(x >= 0.0, 1.0, -1.0)


def _reduce_like(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to the (possibly keepdims) shape of a state parameter."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def binarize_weights(w: Tensor, state: BinarizerState) -> Tensor:
    """Map weights to alpha * sign(w - mean(w)) with straight-through gradients.

    The mean is taken per output channel when the state says so. The weight
    gradient passes through where the centered, alpha-scaled value lies in
    [-1, 1]; alpha accumulates sum(g * sign).
    """
    if state.set_kind != SIGNED:
        raise ConfigError("weight binarization uses the signed set")
    state.check()
    axes = _channel_reduce_axes(w) if state.granularity == PER_OUTPUT_CHANNEL else None
    if axes is None:
        mu = w.data.mean()
    else:
        mu = w.data.mean(axis=axes, keepdims=True)
    centered = w.data - mu
    signs = _sign_pos(centered)
    alpha = state.alpha
    out = alpha.data * signs
    in_range = np.abs(centered / alpha.data) <= 1.0

    def backward(g):
        dw = g * in_range
        dalpha = _reduce_like(g * signs, alpha.shape)
        return dw, dalpha

    return apply_op("binarize_weights", (w, alpha), out, backward)


def binarize_activations(a: Tensor, state: BinarizerState) -> Tensor:
    """Elastic binarization of activations onto {0, alpha} or {-alpha, +alpha}.

    The unsigned set rounds (a - beta) / alpha into {0, 1}; the signed set
    takes its sign. Input gradients pass straight through inside the active
    range; alpha gets the elastic gradient q - u * 1[in range] and beta the
    negated input gradient.
    """
    state.check()
    alpha, beta = state.alpha, state.beta
    u = (a.data - beta.data) / alpha.data
    if state.set_kind == UNSIGNED:
        q = np.clip(np.rint(u), 0.0, 1.0)
        in_range = (u >= 0.0) & (u <= 1.0)
    else:
        q = _sign_pos(u)
        in_range = np.abs(u) <= 1.0
    out = alpha.data * q

    def backward(g):
        da = g * in_range
        dalpha = _reduce_like(g * (q - u * in_range), alpha.shape)
        dbeta = _reduce_like(-da, beta.shape)
        return da, dalpha, dbeta

    return apply_op("binarize_activations", (a, alpha, beta), out, backward)


def binarized_linear(x: Tensor, w: Tensor, b: Optional[Tensor], spec: PrecisionSpec,
                     w_state: Optional[BinarizerState] = None,
                     a_state: Optional[BinarizerState] = None,
                     weight_class: str = "linear",
                     act_class: str = "linear") -> Tensor:
    """Affine map whose operands are binarized as the precision spec demands.

    At 32/32 this is bit-for-bit a plain linear layer. The bias always stays
    full precision.
    """
    if spec.weight_bits_for(weight_class) == 1:
        if w_state is None:
            raise ConfigError("binarized_linear: quantized weights need a weight state")
        w = binarize_weights(w, w_state)
    if spec.activation_bits_for(act_class) == 1:
        if a_state is None:
            raise ConfigError("binarized_linear: quantized activations need an activation state")
        x = binarize_activations(x, a_state)
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def binarized_conv1d(x: Tensor, w: Tensor, spec: PrecisionSpec,
                     mode: str = "full", stride: int = 1,
                     bias: Optional[Tensor] = None,
                     w_state: Optional[BinarizerState] = None,
                     a_state: Optional[BinarizerState] = None,
                     weight_class: str = "conv",
                     act_class: str = "conv") -> Tensor:
    """conv1d with the same quantization contract as binarized_linear."""
    if spec.weight_bits_for(weight_class) == 1:
        if w_state is None:
            raise ConfigError("binarized_conv1d: quantized weights need a weight state")
        w = binarize_weights(w, w_state)
    if spec.activation_bits_for(act_class) == 1:
        if a_state is None:
            raise ConfigError("binarized_conv1d: quantized activations need an activation state")
        x = binarize_activations(x, a_state)
    out = conv1d(x, w, mode=mode, stride=stride)
    if bias is not None:
        out = out + bias
    return out


class BinarizedLinear(Module):
    """Linear layer that owns its binarizer states when the spec quantizes it.

    Under a 32/32 spec no states are created and the layer is an ordinary
    affine map.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 spec: PrecisionSpec, weight_class: str = "linear",
                 act_class: str = "linear", act_set: str = SIGNED, bias: bool = True):
        super().__init__()
        scale = 1.0 / np.sqrt(d_in)
        self.w = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.spec = spec
        self.weight_class = weight_class
        self.act_class = act_class
        self.w_state = (BinarizerState.for_weights(self.w)
                        if spec.weight_bits_for(weight_class) == 1 else None)
        self.a_state = (BinarizerState.for_activations(act_set)
                        if spec.activation_bits_for(act_class) == 1 else None)

    def forward(self, x: Tensor) -> Tensor:
        return binarized_linear(x, self.w, self.b, self.spec,
                                w_state=self.w_state, a_state=self.a_state,
                                weight_class=self.weight_class, act_class=self.act_class)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class BinarizedConv1d(Module):
    """Conv layer with optional W1A1 binarization of weights and input."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 spec: PrecisionSpec, mode: str = "full", stride: int = 1,
                 act_set: str = SIGNED, bias: bool = True):
        super().__init__()
        if mode == "depthwise":
            shape = (c_in, 1, k)
        else:
            shape = (c_out, c_in, k)
        fan_in = shape[1] * k
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)
        self.b = Tensor(np.zeros((c_out, 1)), requires_grad=True) if bias else None
        self.mode = mode
        self.stride = stride
        self.spec = spec
        self.w_state = (BinarizerState.for_weights(self.w)
                        if spec.weight_bits_for("conv") == 1 else None)
        self.a_state = (BinarizerState.for_activations(act_set)
                        if spec.activation_bits_for("conv") == 1 else None)

    def forward(self, x: Tensor) -> Tensor:
        return binarized_conv1d(x, self.w, self.spec, mode=self.mode, stride=self.stride,
                                bias=self.b, w_state=self.w_state, a_state=self.a_state)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)
