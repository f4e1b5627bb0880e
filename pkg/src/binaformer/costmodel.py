"""Static storage / FLOP / BOP profiler.

Costs are derived analytically from an EncoderConfig and a PrecisionSpec,
never by running a model. Conventions (also emitted as per-report
assumptions):

* MAC rules: linear n*d_in*d_out; attention pairs*(D/H)*H for each of the
  QK^T and PV products, where pairs is n^2 dense or the pattern's nonzero
  count; conv n*k*c_in*c_out (depthwise n*k*c); norms and pointwise
  activations n * width each. Residual adds are not counted.
* FLOP = 2 * MAC, summed only over layers running at 32/32 bits.
* BOP = MAC * weight_bits * activation_bits. BOP_NonQ uses 32x32
  everywhere; BOP_BQ uses the spec's bits per layer class.
* Storage = sum of params * param_bits / 8; the positional table counts as
  max_len * D fp32 parameters; biases, norms and binarizer scales stay fp32.
* est_time = BOP at the active precision / device peak.

The absolute reference values attached by compare mode come from the
published table this profiler mirrors; they are display-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .binarize import QUANTIZABLE_CLASSES, PrecisionSpec
from .encoders import EncoderConfig
from .errors import ConfigError, ProfilingError
from .pretrain import FRAME_STRIDE, FeatureExtractor

# Fitted so the reference vanilla row's BOP_NonQ of 1228.64 G reproduces its
# estimated 38.46e-4 s on the same device catalog.
DEFAULT_DEVICE_PEAK = 1228.64e9 / 38.46e-4

DEFAULT_INPUT_DIM = 32
DEFAULT_FRAMES = 1000

# Classes that never quantize, on top of the spec-controlled ones.
FIXED_FP32_CLASSES = frozenset(
    {"frontend", "projection", "positional", "norm", "activation", "bias", "quant"})


@dataclass(frozen=True)
class LayerCost:
    """Cost of one inventory entry at a fixed sequence length."""

    name: str
    params: int
    param_bits: int
    macs: int
    weight_bits: int
    act_bits: int

    def __post_init__(self):
        if self.macs < 0 or self.params < 0:
            raise ProfilingError(f"layer {self.name}: negative cost")
        for bits in (self.param_bits, self.weight_bits, self.act_bits):
            if bits not in (1, 32):
                raise ProfilingError(f"layer {self.name}: bits must be 1 or 32, got {bits}")

    @property
    def storage_bytes(self) -> float:
        return self.params * self.param_bits / 8.0

    @property
    def bop(self) -> int:
        return self.macs * self.weight_bits * self.act_bits

    @property
    def is_fp32(self) -> bool:
        return self.weight_bits == 32 and self.act_bits == 32


@dataclass
class CostReport:
    storage_mb: float
    flop_g: float
    bop_nonq_g: float
    bop_bq_g: float
    est_time_s: float
    per_layer: list[LayerCost]
    assumptions: list[str] = field(default_factory=list)


def resolve_bits(spec: PrecisionSpec, module_class: str, layer_name: str) -> tuple[int, int]:
    """Weight/activation bits for a layer of the given class under ``spec``."""
    if module_class in QUANTIZABLE_CLASSES:
        return (spec.weight_bits_for(module_class),
                spec.activation_bits_for(module_class))
    if module_class in FIXED_FP32_CLASSES:
        return 32, 32
    raise ProfilingError(f"layer {layer_name!r}: unknown layer class {module_class!r}")


class _Inventory:
    def __init__(self, spec: PrecisionSpec):
        self.spec = spec
        self.layers: list[LayerCost] = []

    def fixed(self, name: str, cls: str, params: int, macs: int) -> None:
        bits = resolve_bits(self.spec, cls, name)
        self.layers.append(LayerCost(name, params, 32, macs, *bits))

    def linear(self, name: str, d_in: int, d_out: int, n_pos: int,
               w_cls: str = "linear", a_cls: str = "linear") -> None:
        w_bits, _ = resolve_bits(self.spec, w_cls, name)
        _, a_bits = resolve_bits(self.spec, a_cls, name)
        self.layers.append(LayerCost(f"{name}.w", d_in * d_out, w_bits,
                                     n_pos * d_in * d_out, w_bits, a_bits))
        self.layers.append(LayerCost(f"{name}.b", d_out, 32, 0, 32, 32))
        self._quant(name, d_out, w_bits, a_bits)

    def conv(self, name: str, c_in: int, c_out: int, k: int, n_pos: int,
             depthwise: bool = False) -> None:
        w_bits, a_bits = resolve_bits(self.spec, "conv", name)
        if depthwise:
            params, macs = c_in * k, n_pos * k * c_in
        else:
            params, macs = c_out * c_in * k, n_pos * k * c_in * c_out
        self.layers.append(LayerCost(f"{name}.w", params, w_bits, macs, w_bits, a_bits))
        self.layers.append(LayerCost(f"{name}.b", c_out, 32, 0, 32, 32))
        self._quant(name, c_out, w_bits, a_bits)

    def _quant(self, name: str, d_out: int, w_bits: int, a_bits: int) -> None:
        # fp32 binarizer state: per-channel weight alpha, scalar act alpha/beta
        scale_params = (d_out if w_bits == 1 else 0) + (2 if a_bits == 1 else 0)
        if scale_params:
            self.layers.append(LayerCost(f"{name}.quant", scale_params, 32, 0, 32, 32))

    def norm(self, name: str, dim: int, n_pos: int, stats: bool = False) -> None:
        self.fixed(name, "norm", 2 * dim, n_pos * dim)
        if stats:
            self.fixed(f"{name}.stats", "norm", 2 * dim, 0)

    def act(self, name: str, width: int, n_pos: int) -> None:
        self.fixed(name, "activation", 0, n_pos * width)

    def attention(self, name: str, dim: int, heads: int, n_pos: int,
                  pairs: Optional[int] = None) -> None:
        for proj in ("wq", "wk", "wv", "wo"):
            self.linear(f"{name}.{proj}", dim, dim, n_pos)
        if pairs is None:
            pairs = n_pos * n_pos
        dh = dim // heads
        sc_bits = resolve_bits(self.spec, "attention_score", name)[1]
        pr_bits = resolve_bits(self.spec, "attention_prob", name)[1]
        self.layers.append(LayerCost(f"{name}.scores", 0, 32, pairs * dh * heads,
                                     sc_bits, sc_bits))
        if sc_bits == 1:
            self.layers.append(LayerCost(f"{name}.score_quant", 4, 32, 0, 32, 32))
        self.act(f"{name}.softmax", dim, n_pos)
        self.layers.append(LayerCost(f"{name}.context", 0, 32, pairs * dh * heads,
                                     pr_bits, pr_bits))
        if pr_bits == 1:
            self.layers.append(LayerCost(f"{name}.ctx_quant", 4, 32, 0, 32, 32))

    def ffn(self, name: str, dim: int, expansion: int, n_pos: int) -> None:
        hidden = dim * expansion
        self.linear(f"{name}.lin1", dim, hidden, n_pos)
        self.act(f"{name}.act", hidden, n_pos)
        self.linear(f"{name}.lin2", hidden, dim, n_pos, a_cls="ffn_activation")


def _vanilla_block(inv: _Inventory, name: str, cfg: EncoderConfig, n_pos: int,
                   pairs: Optional[int]) -> None:
    inv.norm(f"{name}.ln_attn", cfg.dim, n_pos)
    inv.attention(f"{name}.attn", cfg.dim, cfg.heads, n_pos, pairs)
    inv.norm(f"{name}.ln_ffn", cfg.dim, n_pos)
    inv.ffn(f"{name}.ffn", cfg.dim, cfg.ffn_expansion, n_pos)


def _conv_module(inv: _Inventory, name: str, cfg: EncoderConfig, n_pos: int,
                 gate: str) -> None:
    d, k = cfg.dim, cfg.conv_kernel
    expand = 2 * d if gate == "glu" else d
    inv.conv(f"{name}.pw1", d, expand, 1, n_pos)
    inv.act(f"{name}.gate", expand, n_pos)
    inv.conv(f"{name}.dw", d, d, k, n_pos, depthwise=True)
    inv.norm(f"{name}.bn", d, n_pos, stats=True)
    inv.act(f"{name}.swish", d, n_pos)
    inv.conv(f"{name}.pw2", d, d, 1, n_pos)


def _conformer_block(inv: _Inventory, name: str, cfg: EncoderConfig, n_pos: int) -> None:
    inv.norm(f"{name}.ln_ffn1", cfg.dim, n_pos)
    inv.ffn(f"{name}.ffn1", cfg.dim, cfg.ffn_expansion, n_pos)
    inv.norm(f"{name}.ln_attn", cfg.dim, n_pos)
    inv.attention(f"{name}.attn", cfg.dim, cfg.heads, n_pos)
    inv.norm(f"{name}.ln_conv", cfg.dim, n_pos)
    _conv_module(inv, f"{name}.conv", cfg, n_pos, gate="glu")
    inv.norm(f"{name}.ln_ffn2", cfg.dim, n_pos)
    inv.ffn(f"{name}.ffn2", cfg.dim, cfg.ffn_expansion, n_pos)
    inv.norm(f"{name}.ln_final", cfg.dim, n_pos)


def _squeezeformer_block(inv: _Inventory, name: str, cfg: EncoderConfig, n_pos: int) -> None:
    inv.attention(f"{name}.attn", cfg.dim, cfg.heads, n_pos)
    inv.norm(f"{name}.ln_attn", cfg.dim, n_pos)
    inv.ffn(f"{name}.ffn1", cfg.dim, cfg.ffn_expansion, n_pos)
    inv.norm(f"{name}.ln_ffn1", cfg.dim, n_pos)
    _conv_module(inv, f"{name}.conv", cfg, n_pos, gate="swish")
    inv.norm(f"{name}.ln_conv", cfg.dim, n_pos)
    inv.ffn(f"{name}.ffn2", cfg.dim, cfg.ffn_expansion, n_pos)
    inv.norm(f"{name}.ln_ffn2", cfg.dim, n_pos)


def layer_inventory(cfg: EncoderConfig, spec: PrecisionSpec, n: int,
                    input_dim: int = DEFAULT_INPUT_DIM,
                    include_frontend: bool = True) -> tuple[list[LayerCost], list[str]]:
    """Per-layer cost entries plus the assumption strings describing them."""
    if n < 1:
        raise ConfigError(f"profiling needs at least one frame, got n={n}")
    inv = _Inventory(spec)
    assumptions = [
        "FLOP = 2 x MAC over layers running at 32/32 bits only",
        "BOP = MAC x weight_bits x activation_bits",
        "norms and activations count n x width MACs; residual adds not counted",
        f"positional table stored as max_len x D = {cfg.max_len} x {cfg.dim} fp32 params",
        "frontend, input projection, norms, biases and binarizer scales stay fp32",
    ]
    if include_frontend:
        ch = FeatureExtractor
        dims = [1, input_dim, input_dim, input_dim]
        length = n * FRAME_STRIDE
        for i in range(ch.N_LAYERS):
            length = -(-length // ch.STRIDE)
            inv.fixed(f"frontend.conv{i}", "frontend",
                      dims[i + 1] * dims[i] * ch.KERNEL + dims[i + 1],
                      length * ch.KERNEL * dims[i] * dims[i + 1])
            if i < ch.N_LAYERS - 1:
                inv.act(f"frontend.gelu{i}", dims[i + 1], length)
        assumptions.append(
            f"frontend: {ch.N_LAYERS} stride-{ch.STRIDE} convs (k={ch.KERNEL}) over "
            f"{n * FRAME_STRIDE} samples")
    inv.fixed("input_proj", "projection", input_dim * cfg.dim + cfg.dim,
              n * input_dim * cfg.dim)
    inv.fixed("positional", "positional", cfg.max_len * cfg.dim, n * cfg.dim)

    pairs = None
    if cfg.kind == "sparseformer":
        pairs = cfg.sparse_pattern.nonzeros(n)
        assumptions.append(
            f"attention pairs use the {cfg.sparse_pattern.kind} pattern: "
            f"nnz({n}) = {pairs} vs dense {n * n}")

    half = cfg.layers // 2
    n_sub = -(-n // cfg.subsample_factor)
    for i in range(cfg.layers):
        n_pos = n
        if cfg.kind == "squeezeformer" and cfg.subsample_factor > 1 and i >= half:
            n_pos = n_sub
        name = f"block{i}"
        if cfg.kind in ("vanilla", "sparseformer"):
            block_pairs = pairs
            if pairs is not None and n_pos != n:
                block_pairs = cfg.sparse_pattern.nonzeros(n_pos)
            _vanilla_block(inv, name, cfg, n_pos, block_pairs)
        elif cfg.kind == "conformer":
            _conformer_block(inv, name, cfg, n_pos)
        else:
            _squeezeformer_block(inv, name, cfg, n_pos)
    if cfg.kind == "squeezeformer" and cfg.subsample_factor > 1 and cfg.layers > 0:
        inv.act("pool", cfg.dim, n)
        inv.act("upsample", cfg.dim, n)
        assumptions.append(
            f"squeezeformer subsample factor {cfg.subsample_factor}: layers "
            f"{half}..{cfg.layers - 1} run at {n_sub} frames")
    return inv.layers, assumptions


def report_from_layers(layers: list[LayerCost], device_peak: float,
                       assumptions: Optional[list[str]] = None) -> CostReport:
    if device_peak <= 0:
        raise ConfigError(f"device_peak must be positive, got {device_peak}")
    storage = sum(l.storage_bytes for l in layers) / 1e6
    flop = 2.0 * sum(l.macs for l in layers if l.is_fp32) / 1e9
    bop_nonq = sum(l.macs for l in layers) * 32 * 32 / 1e9
    bop_bq = sum(l.bop for l in layers) / 1e9
    est_time = bop_bq * 1e9 / device_peak
    assumptions = list(assumptions or [])
    assumptions.append(f"est_time = active-precision BOP / device_peak "
                       f"({device_peak:.6g} ops/s)")
    return CostReport(storage_mb=storage, flop_g=flop, bop_nonq_g=bop_nonq,
                      bop_bq_g=bop_bq, est_time_s=est_time, per_layer=layers,
                      assumptions=assumptions)


def profile(cfg: EncoderConfig, spec: PrecisionSpec, n: int = DEFAULT_FRAMES,
            device_peak: float = DEFAULT_DEVICE_PEAK,
            input_dim: int = DEFAULT_INPUT_DIM,
            include_frontend: bool = True) -> CostReport:
    """Table-style cost columns for one encoder at sequence length ``n``."""
    layers, assumptions = layer_inventory(cfg, spec, n, input_dim=input_dim,
                                          include_frontend=include_frontend)
    return report_from_layers(layers, device_peak, assumptions)


def reduction_report(baseline: CostReport, candidate: CostReport) -> dict[str, float]:
    """Percentage reduction per cost column: 100 * (1 - candidate / baseline)."""
    out = {}
    for column in ("storage_mb", "flop_g", "bop_nonq_g", "bop_bq_g", "est_time_s"):
        base = getattr(baseline, column)
        if base == 0:
            raise ZeroDivisionError(f"reduction_report: zero baseline for {column}")
        out[column] = 100.0 * (1.0 - getattr(candidate, column) / base)
    return out


# ---------------------------------------------------------------------------
# reference values (published profiling table) for side-by-side display
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceRow:
    storage_mb: float
    flop_g: float
    bop_nonq_g: float
    bop_bq_g: Optional[float]
    est_time_e4: float


PAPER_TABLE: dict[tuple[str, str], ReferenceRow] = {
    ("vanilla", "FP32"): ReferenceRow(184.42, 110.54, 1228.64, None, 38.46),
    ("conformer_s", "FP32"): ReferenceRow(131.87, 22.10, 329.39, None, 10.31),
    ("squeeze_xs", "FP32"): ReferenceRow(132.04, 18.31, 272.88, None, 8.54),
    ("sparse_dn_s", "FP32"): ReferenceRow(60.81, 26.05, 388.18, None, 12.15),
    ("sparse_sw_s", "FP32"): ReferenceRow(117.18, 40.09, 597.43, None, 18.70),
    ("vanilla", "FP32-W1A1"): ReferenceRow(25.23, 11.82, 172.83, 63.62, 5.53),
    ("conformer_s", "FP32-W1A1"): ReferenceRow(12.88, 7.23, 103.44, 15.94, 3.27),
    ("squeeze_xs", "FP32-W1A1"): ReferenceRow(13.05, 7.20, 104.05, 11.86, 3.28),
    ("sparse_dn_s", "FP32-W1A1"): ReferenceRow(12.10, 7.35, 107.91, 10.70, 3.40),
    ("sparse_sw_s", "FP32-W1A1"): ReferenceRow(19.71, 8.85, 130.38, 19.49, 4.12),
}

_COLUMNS = ["Name", "L/D/H", "Prec", "Storage(MB)", "FLOP(G)", "BOP_NonQ(G)",
            "BOP_BQ(G)", "EstTime(e-4s)"]
_REF_COLUMNS = ["ref_Storage", "ref_FLOP", "ref_BOP_NonQ", "ref_BOP_BQ", "ref_EstTime"]


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.2f}"


def profile_table(entries: list[tuple[str, EncoderConfig, PrecisionSpec]],
                  n: int = DEFAULT_FRAMES, device_peak: float = DEFAULT_DEVICE_PEAK,
                  input_dim: int = DEFAULT_INPUT_DIM, compare_paper: bool = False,
                  fmt: str = "table") -> str:
    """One formatted row per (name, config, precision), deterministic order."""
    if fmt not in ("table", "tsv"):
        raise ConfigError(f"unknown table format {fmt!r}")
    header = list(_COLUMNS) + (_REF_COLUMNS if compare_paper else [])
    rows: list[list[str]] = []
    notes: list[str] = []
    for name, cfg, spec in entries:
        report = profile(cfg, spec, n=n, device_peak=device_peak, input_dim=input_dim)
        bq = report.bop_bq_g if spec.quantized_classes else None
        row = [name, f"{cfg.layers}/{cfg.dim}/{cfg.heads}", spec.label,
               _fmt(report.storage_mb), _fmt(report.flop_g), _fmt(report.bop_nonq_g),
               _fmt(bq), _fmt(report.est_time_s * 1e4)]
        if compare_paper:
            ref = PAPER_TABLE.get((name, spec.label))
            if ref is None:
                row += ["-"] * 5
            else:
                row += [_fmt(ref.storage_mb), _fmt(ref.flop_g), _fmt(ref.bop_nonq_g),
                        _fmt(ref.bop_bq_g), _fmt(ref.est_time_e4)]
        rows.append(row)
        notes.append(f"# {name} [{spec.label}]: " + "; ".join(report.assumptions))
    if fmt == "tsv":
        lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    else:
        widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
                  for i in range(len(header))]
        def line(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        lines = [line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]
    return "\n".join(lines + notes)
