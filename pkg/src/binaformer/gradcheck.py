"""Central finite-difference verification of every differentiable op and block.

The numeric side re-evaluates the forward pass with perturbed inputs
(h = 1e-5, 64-bit) and never consults the analytic backward, so it serves
as an independent oracle. Inputs are sampled away from kinks: relu and glu
gates keep a margin from zero pre-activations, and the binarizers are
checked outside their pass-through range, where the straight-through
gradient coincides with the true derivative.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .binarize import (BinarizerState, PrecisionSpec, binarize_activations,
                       binarize_weights)
from .encoders import (ConformerBlock, EncoderConfig, SparsePattern,
                       SqueezeformerBlock, VanillaBlock, build_encoder)
from .pretrain import FeatureExtractor

H_STEP = 1e-5
THRESHOLD = 1e-4
GRAD_SCALE_FLOOR = 1e-6

# builder(rng) -> (tensors to differentiate, forward closure)
Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


def max_relative_error(builder: Builder, seed: int, points: int = 10,
                       coord_budget: int = 12, h: float = H_STEP) -> float:
    """Worst relative disagreement between backward and finite differences.

    Per random point, gradients are compared on every checked tensor, over
    all coordinates when small and a random sample otherwise. Errors are
    normalized by the largest gradient magnitude seen at that point.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        tensors, forward = builder(rng)
        with Tape() as tape:
            loss = forward()
            tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                    for t in tensors]
        for t in tensors:
            t.zero_grad()
        scale = GRAD_SCALE_FLOOR
        errors = []
        for t, a_grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            size = flat.shape[0]
            if size <= coord_budget:
                coords: Iterable[int] = range(size)
            else:
                coords = rng.choice(size, size=coord_budget, replace=False)
            for c in coords:
                original = flat[c]
                flat[c] = original + h
                up = forward().item()
                flat[c] = original - h
                down = forward().item()
                flat[c] = original
                numeric = (up - down) / (2.0 * h)
                a_val = a_grad.reshape(-1)[c]
                scale = max(scale, abs(numeric), abs(a_val))
                errors.append(abs(a_val - numeric))
        worst = max(worst, max(errors) / scale if errors else 0.0)
    return worst


def _param(rng, *shape, scale=1.0, grad=True) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=grad)


def _away_from_zero(t: Tensor, margin: float = 5e-2) -> Tensor:
    small = np.abs(t.data) < margin
    t.data = t.data + small * margin * np.where(t.data >= 0, 1.0, -1.0)
    return t


def _scalarize(forward_raw: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Reduce a tensor-valued forward to a scalar via a fixed random projection."""
    coeff_seed = int(rng.integers(2 ** 31))
    holder: dict[str, Tensor] = {}

    def forward() -> Tensor:
        out = forward_raw()
        if "c" not in holder:
            holder["c"] = Tensor(np.random.default_rng(coeff_seed).normal(size=out.shape))
        return ag.mean(ag.mul(out, holder["c"]))

    return forward


# ---------------------------------------------------------------------------
# op builders
# ---------------------------------------------------------------------------

def _b_matmul(rng):
    a, b = _param(rng, 4, 5), _param(rng, 5, 3)
    return [a, b], _scalarize(lambda: ag.matmul(a, b), rng)


def _b_matmul_batched(rng):
    a, b = _param(rng, 3, 4, 5), _param(rng, 3, 5, 2)
    return [a, b], _scalarize(lambda: ag.matmul(a, b), rng)


def _b_add_bias(rng):
    x, b = _param(rng, 4, 6), _param(rng, 6)
    return [x, b], _scalarize(lambda: ag.add(x, b), rng)


def _b_sub(rng):
    x, y = _param(rng, 5, 3), _param(rng, 5, 3)
    return [x, y], _scalarize(lambda: ag.sub(x, y), rng)


def _b_mul(rng):
    x, y = _param(rng, 2, 7), _param(rng, 2, 7)
    return [x, y], _scalarize(lambda: ag.mul(x, y), rng)


def _b_mul_scalar(rng):
    x, s = _param(rng, 3, 4), _param(rng)
    return [x, s], _scalarize(lambda: ag.mul(x, s), rng)


def _b_conv_full(rng):
    x, w = _param(rng, 2, 8), _param(rng, 3, 2, 3)
    return [x, w], _scalarize(lambda: ag.conv1d(x, w, mode="full"), rng)


def _b_conv_pointwise(rng):
    x, w = _param(rng, 3, 6), _param(rng, 4, 3, 1)
    return [x, w], _scalarize(lambda: ag.conv1d(x, w, mode="pointwise"), rng)


def _b_conv_depthwise(rng):
    x, w = _param(rng, 3, 8), _param(rng, 3, 1, 3)
    return [x, w], _scalarize(lambda: ag.conv1d(x, w, mode="depthwise"), rng)


def _b_conv_stride2(rng):
    x, w = _param(rng, 2, 9), _param(rng, 2, 2, 5)
    return [x, w], _scalarize(lambda: ag.conv1d(x, w, mode="full", stride=2), rng)


def _b_softmax(rng):
    x = _param(rng, 6)
    return [x], _scalarize(lambda: ag.softmax(ag.reshape(x, (1, 6)), axis=-1), rng)


def _b_relu(rng):
    x = _away_from_zero(_param(rng, 4, 5))
    return [x], _scalarize(lambda: ag.relu(x), rng)


def _b_sigmoid(rng):
    x = _param(rng, 3, 3)
    return [x], _scalarize(lambda: ag.sigmoid(x), rng)


def _b_swish(rng):
    x = _param(rng, 3, 4)
    return [x], _scalarize(lambda: ag.swish(x), rng)


def _b_gelu(rng):
    x = _param(rng, 3, 4)
    return [x], _scalarize(lambda: ag.gelu(x), rng)


def _b_glu(rng):
    x = _away_from_zero(_param(rng, 3, 8))
    return [x], _scalarize(lambda: ag.glu(x, axis=-1), rng)


def _b_layer_norm(rng):
    x = _param(rng, 4, 6)
    gain = Tensor(rng.normal(1.0, 0.2, size=6), requires_grad=True)
    bias = _param(rng, 6, scale=0.3)
    return [x, gain, bias], _scalarize(lambda: ag.layer_norm(x, gain, bias), rng)


def _b_batch_norm(rng):
    x = _param(rng, 3, 7)
    gain = Tensor(rng.normal(1.0, 0.2, size=3), requires_grad=True)
    bias = _param(rng, 3, scale=0.3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    return [x, gain, bias], _scalarize(
        lambda: ag.batch_norm_inference(x, gain, bias, rm, rv), rng)


def _b_mask_fill(rng):
    x = _param(rng, 4, 4)
    keep = rng.random((4, 4)) > 0.4
    keep[0, 0] = True
    return [x], _scalarize(lambda: ag.mask_fill(x, keep, -25.0), rng)


def _b_transpose(rng):
    x = _param(rng, 2, 3, 4)
    return [x], _scalarize(lambda: ag.transpose(x, (2, 0, 1)), rng)


def _b_reshape(rng):
    x = _param(rng, 3, 4)
    return [x], _scalarize(lambda: ag.reshape(x, (2, 6)), rng)


def _b_narrow(rng):
    x = _param(rng, 6, 3)
    return [x], _scalarize(lambda: ag.narrow(x, 0, 2, 3), rng)


def _b_gather(rng):
    x = _param(rng, 5, 3)
    idx = np.array([0, 2, 2, 4, 1])
    return [x], _scalarize(lambda: ag.gather(x, idx, axis=0), rng)


def _b_concat(rng):
    a, b = _param(rng, 2, 3), _param(rng, 4, 3)
    return [a, b], _scalarize(lambda: ag.concat([a, b], axis=0), rng)


def _b_mean(rng):
    x = _param(rng, 4, 5)
    return [x], (lambda: ag.mean(x))


def _b_avg_pool(rng):
    x = _param(rng, 7, 3)
    return [x], _scalarize(lambda: ag.avg_pool_time(x, 2), rng)


def _b_upsample(rng):
    x = _param(rng, 4, 3)
    return [x], _scalarize(lambda: ag.upsample_nearest_time(x, 7, 2), rng)


def _b_cross_entropy(rng):
    logits = _param(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    mask = np.array([True, False, True, True, False, True])
    return [logits], (lambda: ag.cross_entropy(logits, labels, mask=mask))


def _b_binarize_weights(rng):
    # outside the pass-through range the elastic gradients equal the true ones
    w = Tensor(rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(2.0, 3.0, size=(4, 3)),
               requires_grad=True)
    state = BinarizerState.for_weights(w, granularity="per_tensor")
    state.alpha.data = np.asarray(0.5)
    return [w, state.alpha], _scalarize(lambda: binarize_weights(w, state), rng)


def _b_binarize_signed(rng):
    a = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(2.0, 3.0, size=(3, 4)),
               requires_grad=True)
    state = BinarizerState.for_activations("signed")
    state.alpha.data = np.asarray(0.5)
    return [a, state.alpha, state.beta], _scalarize(
        lambda: binarize_activations(a, state), rng)


def _b_binarize_unsigned(rng):
    a = Tensor(rng.uniform(2.0, 3.0, size=(3, 4)), requires_grad=True)
    state = BinarizerState.for_activations("unsigned")
    state.alpha.data = np.asarray(0.5)
    return [a, state.alpha, state.beta], _scalarize(
        lambda: binarize_activations(a, state), rng)


# ---------------------------------------------------------------------------
# block builders
# ---------------------------------------------------------------------------

_FP32 = PrecisionSpec.fp32()


def _block_cfg(kind: str, pattern: Optional[SparsePattern] = None) -> EncoderConfig:
    return EncoderConfig(kind=kind, layers=2, dim=8, heads=2, ffn_expansion=2,
                         conv_kernel=3, sparse_pattern=pattern,
                         subsample_factor=2 if kind == "squeezeformer" else 1)


def _block_tensors(block, x: Tensor) -> list[Tensor]:
    return [x] + block.parameters()


def _b_vanilla_block(rng):
    block = VanillaBlock(_block_cfg("vanilla"), rng, _FP32)
    x = _param(rng, 5, 8)
    return _block_tensors(block, x), _scalarize(lambda: block(x), rng)


def _b_conformer_block(rng):
    block = ConformerBlock(_block_cfg("conformer"), rng, _FP32)
    x = _param(rng, 5, 8)
    return _block_tensors(block, x), _scalarize(lambda: block(x), rng)


def _b_squeezeformer_block(rng):
    block = SqueezeformerBlock(_block_cfg("squeezeformer"), rng, _FP32)
    x = _param(rng, 5, 8)
    return _block_tensors(block, x), _scalarize(lambda: block(x), rng)


def _b_squeezeformer_stack(rng):
    cfg = _block_cfg("squeezeformer")
    enc = build_encoder(cfg, _FP32, seed=int(rng.integers(2 ** 31)), input_dim=6)
    x = _param(rng, 6, 6)
    return _block_tensors(enc, x), _scalarize(lambda: enc(x), rng)


def _b_sparseformer_block(rng):
    pattern = SparsePattern(kind="strided", block_size=2)
    block = VanillaBlock(_block_cfg("sparseformer", pattern), rng, _FP32,
                         pattern=pattern)
    x = _param(rng, 6, 8)
    return _block_tensors(block, x), _scalarize(lambda: block(x), rng)


def _b_feature_extractor(rng):
    fx = FeatureExtractor(channels=4, out_dim=4, rng=rng)
    x = _param(rng, 64)
    return _block_tensors(fx, x), _scalarize(lambda: fx(x), rng)


OP_CHECKS: dict[str, Builder] = {
    "matmul": _b_matmul,
    "matmul_batched": _b_matmul_batched,
    "add_bias": _b_add_bias,
    "sub": _b_sub,
    "mul": _b_mul,
    "mul_scalar": _b_mul_scalar,
    "conv1d_full": _b_conv_full,
    "conv1d_pointwise": _b_conv_pointwise,
    "conv1d_depthwise": _b_conv_depthwise,
    "conv1d_stride2": _b_conv_stride2,
    "softmax": _b_softmax,
    "relu": _b_relu,
    "sigmoid": _b_sigmoid,
    "swish": _b_swish,
    "gelu": _b_gelu,
    "glu": _b_glu,
    "layer_norm": _b_layer_norm,
    "batch_norm_inference": _b_batch_norm,
    "mask_fill": _b_mask_fill,
    "transpose": _b_transpose,
    "reshape": _b_reshape,
    "narrow": _b_narrow,
    "gather": _b_gather,
    "concat": _b_concat,
    "mean": _b_mean,
    "avg_pool_time": _b_avg_pool,
    "upsample_nearest_time": _b_upsample,
    "cross_entropy": _b_cross_entropy,
    "binarize_weights": _b_binarize_weights,
    "binarize_activations_signed": _b_binarize_signed,
    "binarize_activations_unsigned": _b_binarize_unsigned,
}

BLOCK_CHECKS: dict[str, Builder] = {
    "vanilla": _b_vanilla_block,
    "conformer": _b_conformer_block,
    "squeezeformer": _b_squeezeformer_block,
    "squeezeformer_stack": _b_squeezeformer_stack,
    "sparseformer": _b_sparseformer_block,
    "feature_extractor": _b_feature_extractor,
}

ALL_CHECKS: dict[str, Builder] = {**OP_CHECKS, **BLOCK_CHECKS}


def run_suite(names: Optional[Iterable[str]] = None, seed: int = 7,
              points: int = 10) -> list[tuple[str, float]]:
    """Run (a subset of) the suite; returns (name, max relative error) pairs."""
    if names is None:
        names = list(ALL_CHECKS)
    results = []
    for name in names:
        builder = ALL_CHECKS[name]
        results.append((name, max_relative_error(builder, seed=seed, points=points)))
    return results
