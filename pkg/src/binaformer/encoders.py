"""The four encoder families: vanilla, Conformer-style, Squeezeformer-style
and Sparseformer (vanilla blocks with fixed-pattern sparse attention).

All blocks operate on (time, dim) tensors. Sparse attention is computed as
genuine sub-computations: each query row gathers only its allowed keys, so
the dense score matrix is never formed. The dense path is taken whenever no
pattern is given or the pattern covers everything, and the full pattern is
therefore bit-identical to dense attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .binarize import (SIGNED, UNSIGNED, BinarizedConv1d, BinarizedLinear,
                       BinarizerState, PrecisionSpec, binarize_activations)
from .errors import ConfigError, DimensionError, EmptyInputError, SequenceTooShortError
from .module import Linear, Module

ENCODER_KINDS = ("vanilla", "conformer", "squeezeformer", "sparseformer")
PATTERN_KINDS = ("strided", "fixed")


@dataclass(frozen=True)
class SparsePattern:
    """Fixed attention pattern; ``mask(n)`` yields the allowed (query, key) pairs."""

    kind: str
    block_size: int

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ConfigError(f"unknown sparse pattern kind {self.kind!r}")
        if self.block_size < 1:
            raise ConfigError(f"pattern block size must be positive, got {self.block_size}")

    def mask(self, n: int) -> np.ndarray:
        return _pattern_mask(self.kind, self.block_size, n).copy()

    def nonzeros(self, n: int) -> int:
        return int(_pattern_mask(self.kind, self.block_size, n).sum())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "block": self.block_size}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsePattern":
        unknown = set(d) - {"kind", "block"}
        if unknown:
            raise ConfigError(f"unknown pattern field(s): {sorted(unknown)}")
        try:
            return cls(kind=d["kind"], block_size=int(d["block"]))
        except KeyError as exc:
            raise ConfigError(f"pattern is missing field {exc.args[0]!r}") from None


@lru_cache(maxsize=256)
def _pattern_mask(kind: str, l: int, n: int) -> np.ndarray:
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    summary = j % l == l - 1
    if kind == "strided":
        mask = (np.abs(i - j) < l) | summary
    else:
        mask = (i // l == j // l) | summary
    mask.setflags(write=False)
    return mask


@dataclass
class EncoderConfig:
    """Architecture hyperparameters shared by every encoder kind."""

    kind: str
    layers: int
    dim: int
    heads: int
    ffn_expansion: int = 4
    conv_kernel: int = 31
    sparse_pattern: Optional[SparsePattern] = None
    subsample_factor: int = 1
    positional: str = "absolute_sinusoidal"
    max_len: int = 4000

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 0:
            raise ConfigError(f"layers must be non-negative, got {self.layers}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be positive, got {self.ffn_expansion}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if (self.sparse_pattern is not None) != (self.kind == "sparseformer"):
            raise ConfigError("sparse_pattern is required for sparseformer and only for it")
        if self.subsample_factor not in (1, 2):
            raise ConfigError(f"subsample_factor must be 1 or 2, got {self.subsample_factor}")
        if self.subsample_factor == 2 and self.kind != "squeezeformer":
            raise ConfigError("subsample_factor 2 is a squeezeformer-only setting")
        if self.positional != "absolute_sinusoidal":
            raise ConfigError(f"unsupported positional encoding {self.positional!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "layers": self.layers, "dim": self.dim, "heads": self.heads,
             "ffn_expansion": self.ffn_expansion, "conv_kernel": self.conv_kernel,
             "subsample_factor": self.subsample_factor, "max_len": self.max_len}
        if self.sparse_pattern is not None:
            d["pattern"] = self.sparse_pattern.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {"kind", "layers", "dim", "heads", "ffn_expansion", "conv_kernel",
                 "pattern", "subsample_factor", "max_len"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config field(s): {sorted(unknown)}")
        for required in ("kind", "layers", "dim", "heads"):
            if required not in d:
                raise ConfigError(f"encoder config is missing field {required!r}")
        pattern = SparsePattern.from_dict(d["pattern"]) if "pattern" in d else None
        return cls(kind=d["kind"], layers=int(d["layers"]), dim=int(d["dim"]),
                   heads=int(d["heads"]),
                   ffn_expansion=int(d.get("ffn_expansion", 4)),
                   conv_kernel=int(d.get("conv_kernel", 31)),
                   sparse_pattern=pattern,
                   subsample_factor=int(d.get("subsample_factor", 1)),
                   max_len=int(d.get("max_len", 4000)))


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    """Absolute sinusoidal position table, (n, dim)."""
    pos = np.arange(n, dtype=float)[:, None]
    idx = np.arange(dim, dtype=float)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Two-layer position-wise FFN; the hidden activation is its own
    quantization class so its binarization can be toggled independently."""

    def __init__(self, dim: int, expansion: int, activation: str,
                 rng: np.random.Generator, spec: PrecisionSpec):
        super().__init__()
        self.lin1 = BinarizedLinear(dim, dim * expansion, rng, spec)
        self.lin2 = BinarizedLinear(dim * expansion, dim, rng, spec,
                                    act_class="ffn_activation")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = self.lin1(x)
        h = ag.gelu(h) if self.activation == "gelu" else ag.swish(h)
        return self.lin2(h)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with optional fixed sparse pattern.

    Under a W1A1 spec the four projections are binarized linears, the score
    operands (Q, K) and the value operand are signed-binarized, and the
    attention probabilities are unsigned-binarized.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 spec: PrecisionSpec, pattern: Optional[SparsePattern] = None):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.pattern = pattern
        self.wq = BinarizedLinear(dim, dim, rng, spec)
        self.wk = BinarizedLinear(dim, dim, rng, spec)
        self.wv = BinarizedLinear(dim, dim, rng, spec)
        self.wo = BinarizedLinear(dim, dim, rng, spec)
        score_q = spec.quantizes("attention_score")
        prob_q = spec.quantizes("attention_prob")
        self.q_state = BinarizerState.for_activations(SIGNED) if score_q else None
        self.k_state = BinarizerState.for_activations(SIGNED) if score_q else None
        self.v_state = BinarizerState.for_activations(SIGNED) if prob_q else None
        self.p_state = BinarizerState.for_activations(UNSIGNED) if prob_q else None

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if n == 0:
            raise EmptyInputError("attention: empty input sequence")
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        if self.q_state is not None:
            q = binarize_activations(q, self.q_state)
            k = binarize_activations(k, self.k_state)
        if self.v_state is not None:
            v = binarize_activations(v, self.v_state)
        mask = None
        if self.pattern is not None:
            mask = self.pattern.mask(n)
            np.fill_diagonal(mask, True)  # self-attention is always allowed
            if mask.all():
                mask = None
        if mask is None:
            ctx = self._dense(q, k, v, n)
        else:
            ctx = self._sparse(q, k, v, n, mask)
        return self.wo(ctx)

    def _dense(self, q: Tensor, k: Tensor, v: Tensor, n: int) -> Tensor:
        h, dh = self.heads, self.head_dim
        qh = ag.transpose(ag.reshape(q, (n, h, dh)), (1, 0, 2))
        kh = ag.transpose(ag.reshape(k, (n, h, dh)), (1, 0, 2))
        vh = ag.transpose(ag.reshape(v, (n, h, dh)), (1, 0, 2))
        scores = ag.matmul(qh, ag.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        probs = ag.softmax(scores, axis=-1)
        if self.p_state is not None:
            probs = binarize_activations(probs, self.p_state)
        ctx = ag.matmul(probs, vh)
        return ag.reshape(ag.transpose(ctx, (1, 0, 2)), (n, self.dim))

    def _sparse(self, q: Tensor, k: Tensor, v: Tensor, n: int, mask: np.ndarray) -> Tensor:
        # One sub-computation per (head, query): gather the allowed keys,
        # run a tiny attention over them. Never materializes n x n scores.
        h, dh = self.heads, self.head_dim
        scale = 1.0 / math.sqrt(dh)
        row_idx = [np.flatnonzero(mask[i]) for i in range(n)]
        head_out = []
        for head in range(h):
            qh = ag.narrow(q, 1, head * dh, dh)
            kh = ag.narrow(k, 1, head * dh, dh)
            vh = ag.narrow(v, 1, head * dh, dh)
            rows = []
            for i in range(n):
                idx = row_idx[i]
                qi = ag.narrow(qh, 0, i, 1)
                ks = ag.gather(kh, idx, axis=0)
                vs = ag.gather(vh, idx, axis=0)
                s = ag.matmul(qi, ag.transpose(ks)) * scale
                p = ag.softmax(s, axis=-1)
                if self.p_state is not None:
                    p = binarize_activations(p, self.p_state)
                rows.append(ag.matmul(p, vs))
            head_out.append(ag.concat(rows, axis=0))
        return ag.concat(head_out, axis=1)


class ConvModule(Module):
    """Pointwise expansion, gate, depthwise conv, norm, swish, pointwise.

    The gate is a GLU for conformer blocks and a swish for squeezeformer
    blocks (which use swish activations throughout). Batch norm always
    normalizes with running statistics; training steps update them with
    momentum 0.1 before use.
    """

    MOMENTUM = 0.1

    def __init__(self, dim: int, kernel: int, gate: str,
                 rng: np.random.Generator, spec: PrecisionSpec):
        super().__init__()
        if gate not in ("glu", "swish"):
            raise ConfigError(f"unknown conv gate {gate!r}")
        self.gate = gate
        expand = 2 * dim if gate == "glu" else dim
        self.pw1 = BinarizedConv1d(dim, expand, 1, rng, spec, mode="pointwise")
        self.dw = BinarizedConv1d(dim, dim, kernel, rng, spec, mode="depthwise")
        self.bn_gain = Tensor(np.ones(dim), requires_grad=True)
        self.bn_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.pw2 = BinarizedConv1d(dim, dim, 1, rng, spec, mode="pointwise")

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.transpose(x)  # (dim, n)
        h = self.pw1(h)
        h = ag.glu(h, axis=0) if self.gate == "glu" else ag.swish(h)
        h = self.dw(h)
        if self.training:
            m = self.MOMENTUM
            self.running_mean[...] = (1 - m) * self.running_mean + m * h.data.mean(axis=1)
            self.running_var[...] = (1 - m) * self.running_var + m * h.data.var(axis=1)
        h = ag.batch_norm_inference(h, self.bn_gain, self.bn_bias,
                                    self.running_mean, self.running_var)
        h = ag.swish(h)
        h = self.pw2(h)
        return ag.transpose(h)


class VanillaBlock(Module):
    """Pre-LN transformer block; a sparse pattern turns it into a sparseformer block."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, spec: PrecisionSpec,
                 pattern: Optional[SparsePattern] = None):
        super().__init__()
        self.ln_attn = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, spec, pattern=pattern)
        self.ln_ffn = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_expansion, "gelu", rng, spec)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln_attn(x))
        x = x + self.ffn(self.ln_ffn(x))
        return x


class ConformerBlock(Module):
    """Macaron block: half-FFN, attention, conv module, half-FFN, final norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, spec: PrecisionSpec):
        super().__init__()
        self.ln_ffn1 = LayerNorm(cfg.dim)
        self.ffn1 = FeedForward(cfg.dim, cfg.ffn_expansion, "swish", rng, spec)
        self.ln_attn = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, spec)
        self.ln_conv = LayerNorm(cfg.dim)
        self.conv = ConvModule(cfg.dim, cfg.conv_kernel, "glu", rng, spec)
        self.ln_ffn2 = LayerNorm(cfg.dim)
        self.ffn2 = FeedForward(cfg.dim, cfg.ffn_expansion, "swish", rng, spec)
        self.ln_final = LayerNorm(cfg.dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ffn1(self.ln_ffn1(x))
        x = x + self.attn(self.ln_attn(x))
        x = x + self.conv(self.ln_conv(x))
        x = x + 0.5 * self.ffn2(self.ln_ffn2(x))
        return self.ln_final(x)


class SqueezeformerBlock(Module):
    """Post-LN ordering MHSA / FFN / Conv / FFN with one norm per module and
    swish activations throughout."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, spec: PrecisionSpec):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, spec)
        self.ln_attn = LayerNorm(cfg.dim)
        self.ffn1 = FeedForward(cfg.dim, cfg.ffn_expansion, "swish", rng, spec)
        self.ln_ffn1 = LayerNorm(cfg.dim)
        self.conv = ConvModule(cfg.dim, cfg.conv_kernel, "swish", rng, spec)
        self.ln_conv = LayerNorm(cfg.dim)
        self.ffn2 = FeedForward(cfg.dim, cfg.ffn_expansion, "swish", rng, spec)
        self.ln_ffn2 = LayerNorm(cfg.dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.ln_attn(self.attn(x))
        x = x + self.ln_ffn1(self.ffn1(x))
        x = x + self.ln_conv(self.conv(x))
        x = x + self.ln_ffn2(self.ffn2(x))
        return x


def _make_block(cfg: EncoderConfig, rng: np.random.Generator, spec: PrecisionSpec) -> Module:
    if cfg.kind == "vanilla":
        return VanillaBlock(cfg, rng, spec)
    if cfg.kind == "sparseformer":
        return VanillaBlock(cfg, rng, spec, pattern=cfg.sparse_pattern)
    if cfg.kind == "conformer":
        return ConformerBlock(cfg, rng, spec)
    if cfg.kind == "squeezeformer":
        return SqueezeformerBlock(cfg, rng, spec)
    raise ConfigError(f"unknown encoder kind {cfg.kind!r}")


class Encoder(Module):
    """Input projection + sinusoidal positions + a stack of blocks.

    A squeezeformer stack with subsample factor 2 pools the time axis after
    the first half of the layers, runs the rest at the reduced rate, then
    upsamples and adds the pre-pool skip tensor.
    """

    def __init__(self, cfg: EncoderConfig, spec: PrecisionSpec, seed: int,
                 input_dim: Optional[int] = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.spec = spec
        self.input_dim = input_dim if input_dim is not None else cfg.dim
        self.input_proj = Linear(self.input_dim, cfg.dim, rng)
        self.blocks = [_make_block(cfg, rng, spec) for _ in range(cfg.layers)]

    def _embed(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise DimensionError(
                f"encoder expects (n, {self.input_dim}) features, got {features.shape}")
        # sqrt(D) embedding scale keeps content from drowning in the
        # unit-amplitude position table
        x = self.input_proj(features) * math.sqrt(self.cfg.dim)
        pe = sinusoidal_encoding(features.shape[0], self.cfg.dim)
        return x + Tensor(pe)

    def __call__(self, features: Tensor) -> Tensor:
        outputs = self.layer_outputs(features)
        return outputs[-1]

    def layer_outputs(self, features: Tensor) -> list[Tensor]:
        """Embedded input followed by every block's output (final entry is
        the encoder output, including the squeezeformer length recovery)."""
        x = self._embed(features)
        outputs = [x]
        factor = self.cfg.subsample_factor
        if self.cfg.kind == "squeezeformer" and factor > 1 and self.blocks:
            n = x.shape[0]
            if n < factor:
                raise SequenceTooShortError(
                    f"squeezeformer stack needs at least {factor} frames, got {n}")
            half = len(self.blocks) // 2
            for block in self.blocks[:half]:
                x = block(x)
                outputs.append(x)
            skip = x
            x = ag.avg_pool_time(x, factor)
            for block in self.blocks[half:]:
                x = block(x)
                outputs.append(x)
            x = ag.upsample_nearest_time(x, n, factor) + skip
            outputs[-1] = x
        else:
            for block in self.blocks:
                x = block(x)
                outputs.append(x)
        return outputs


def build_encoder(cfg: EncoderConfig, spec: PrecisionSpec, seed: int,
                  input_dim: Optional[int] = None) -> Encoder:
    return Encoder(cfg, spec, seed, input_dim=input_dim)


def encode(encoder: Encoder, features) -> Tensor:
    """Per-frame representations for an (n, input_dim) feature matrix."""
    return encoder(ag.as_tensor(features))
