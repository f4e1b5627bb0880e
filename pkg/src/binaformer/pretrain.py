"""Desk-scale masked pseudo-label pretraining.

The pipeline mirrors the usual self-supervised recipe: a strided conv
feature extractor over raw waveforms, k-means acoustic unit discovery on
DFT log-magnitude features, span masking with a learned mask embedding,
cross-entropy on the masked frames only, and a second phase that re-labels
from intermediate encoder states. Audio is synthetic: piecewise-constant
"phoneme" segments, each a mixture of 2-4 sinusoids, plus Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .binarize import PrecisionSpec
from .encoders import Encoder, EncoderConfig, build_encoder
from .errors import ConfigError, NumericError, SequenceTooShortError
from .kmeans import KMeansModel, kmeans_assign, kmeans_fit
from .module import Adam, Linear, Module, SGD, warmup_lr

FRAME_STRIDE = 8          # extractor downsampling: three stride-2 convs
DFT_WINDOW = 16           # samples per labeling window, aligned to frames
MIN_WAVE_LEN = 64
LOG_FLOOR = 1e-10

# Tone alphabet: each "phoneme" class is a fixed set of 2-4 DFT bins.
PHONEME_BINS: tuple[tuple[int, ...], ...] = (
    (1, 5), (2, 6), (3, 7), (1, 4, 6), (2, 5, 7), (1, 3, 5, 7), (2, 4, 6), (3, 4),
)


@dataclass
class WaveBatch:
    """A list of raw synthetic waveforms (sample-rate-free at this scale)."""

    waveforms: list[np.ndarray]
    lengths: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.waveforms = [np.asarray(w, dtype=float) for w in self.waveforms]
        self.lengths = [len(w) for w in self.waveforms]
        for w in self.waveforms:
            if not np.all(np.isfinite(w)):
                raise NumericError("waveform contains non-finite samples")
            if len(w) < MIN_WAVE_LEN:
                raise SequenceTooShortError(
                    f"waveform of length {len(w)} is shorter than the extractor "
                    f"receptive field ({MIN_WAVE_LEN} samples)")


@dataclass
class MaskSpec:
    """Span masking: each frame starts a span of ``span_length`` frames with
    probability ``mask_prob``; spans may overlap."""

    span_length: int = 4
    mask_prob: float = 0.08

    def __post_init__(self):
        if self.span_length < 1:
            raise ConfigError(f"span_length must be positive, got {self.span_length}")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")


@dataclass
class SynthConfig:
    """Synthetic corpus knobs."""

    n_clips: int = 24
    clip_len: int = 1024          # samples; a multiple of FRAME_STRIDE
    n_classes: int = 8
    noise_sigma: float = 0.05
    min_segment_frames: int = 8
    max_segment_frames: int = 24
    dominant_frac: float = 0.0    # >0 gives each clip a dominant class (seq labels)

    def __post_init__(self):
        if self.clip_len % FRAME_STRIDE != 0 or self.clip_len < MIN_WAVE_LEN:
            raise ConfigError(f"clip_len must be a multiple of {FRAME_STRIDE} and "
                              f">= {MIN_WAVE_LEN}, got {self.clip_len}")
        if not 1 <= self.n_classes <= len(PHONEME_BINS):
            raise ConfigError(f"n_classes must be in [1, {len(PHONEME_BINS)}]")


@dataclass
class SynthCorpus:
    batch: WaveBatch
    frame_labels: list[np.ndarray]   # true phoneme class per frame
    clip_labels: np.ndarray          # dominant class per clip


def _tone_segment(bins: Sequence[int], t0: int, length: int,
                  phases: np.ndarray) -> np.ndarray:
    t = np.arange(t0, t0 + length, dtype=float)
    wave = np.zeros(length)
    for b, ph in zip(bins, phases):
        wave += np.sin(2.0 * math.pi * b * t / DFT_WINDOW + ph)
    return wave / len(bins)


def synth_corpus(cfg: SynthConfig, seed: int) -> SynthCorpus:
    """Generate clips of piecewise-constant tone segments with known labels."""
    rng = np.random.default_rng(seed)
    waves, frame_labels, clip_labels = [], [], []
    n_frames = cfg.clip_len // FRAME_STRIDE
    for _ in range(cfg.n_clips):
        dominant = int(rng.integers(cfg.n_classes))
        labels = np.empty(n_frames, dtype=np.intp)
        wave = np.empty(cfg.clip_len)
        t = 0
        while t < n_frames:
            seg = int(rng.integers(cfg.min_segment_frames, cfg.max_segment_frames + 1))
            seg = min(seg, n_frames - t)
            if cfg.dominant_frac > 0.0 and rng.random() < cfg.dominant_frac:
                cls = dominant
            else:
                cls = int(rng.integers(cfg.n_classes))
            labels[t:t + seg] = cls
            lo, hi = t * FRAME_STRIDE, (t + seg) * FRAME_STRIDE
            phases = rng.uniform(0.0, 2.0 * math.pi, size=len(PHONEME_BINS[cls]))
            wave[lo:hi] = _tone_segment(PHONEME_BINS[cls], lo, hi - lo, phases)
            t += seg
        wave = wave + rng.normal(0.0, cfg.noise_sigma, size=cfg.clip_len)
        waves.append(wave)
        frame_labels.append(labels)
        clip_labels.append(dominant)
    return SynthCorpus(batch=WaveBatch(waves), frame_labels=frame_labels,
                       clip_labels=np.asarray(clip_labels, dtype=np.intp))


class FeatureExtractor(Module):
    """Three stride-2 convolutions with gelu between: waveform -> (n/8, dim)."""

    KERNEL = 5
    STRIDE = 2
    N_LAYERS = 3

    def __init__(self, channels: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        dims = [1, channels, channels, out_dim]
        self.convs = []
        for i in range(self.N_LAYERS):
            fan_in = dims[i] * self.KERNEL
            w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                                  size=(dims[i + 1], dims[i], self.KERNEL)),
                       requires_grad=True)
            b = Tensor(np.zeros((dims[i + 1], 1)), requires_grad=True)
            self.convs.append(_ConvLayer(w, b))
        self.out_dim = out_dim

    def __call__(self, wave: Union[Tensor, np.ndarray]) -> Tensor:
        wave = ag.as_tensor(wave)
        if wave.ndim != 1:
            raise ConfigError(f"extractor takes a 1-d waveform, got shape {wave.shape}")
        if wave.shape[0] < MIN_WAVE_LEN:
            raise SequenceTooShortError(
                f"waveform of length {wave.shape[0]} is shorter than {MIN_WAVE_LEN} samples")
        x = ag.reshape(wave, (1, wave.shape[0]))
        for i, layer in enumerate(self.convs):
            x = ag.conv1d(x, layer.w, mode="full", stride=self.STRIDE) + layer.b
            if i < self.N_LAYERS - 1:
                x = ag.gelu(x)
        return ag.transpose(x)


class _ConvLayer(Module):
    def __init__(self, w: Tensor, b: Tensor):
        super().__init__()
        self.w = w
        self.b = b


def n_frames_for(wave_len: int) -> int:
    return -(-wave_len // FRAME_STRIDE)


def mfcc_like(wave: np.ndarray) -> np.ndarray:
    """Per-frame log-magnitude of a 16-point DFT; labeling features only.

    Window t covers samples [8t, 8t + 16), zero-padded past the end, so the
    rows align one-to-one with extractor frames.
    """
    wave = np.asarray(wave, dtype=float)
    n = len(wave)
    frames = n_frames_for(n)
    feats = np.empty((frames, DFT_WINDOW))
    for t in range(frames):
        window = wave[t * FRAME_STRIDE:t * FRAME_STRIDE + DFT_WINDOW]
        if len(window) < DFT_WINDOW:
            window = np.pad(window, (0, DFT_WINDOW - len(window)))
        feats[t] = np.log(np.abs(np.fft.fft(window)) + LOG_FLOOR)
    return feats


def apply_mask(features: Tensor, mask_embedding: Tensor, spec: MaskSpec,
               rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Replace sampled spans of frames with the learned mask embedding.

    Returns the masked features and the boolean frame mask. The replacement
    keeps gradients flowing into the embedding (and into the surviving
    frames) but not into the frames it covers.
    """
    n, d = features.shape
    starts = np.flatnonzero(rng.random(n) < spec.mask_prob)
    mask = np.zeros(n, dtype=bool)
    for s in starts:
        mask[s:s + spec.span_length] = True
    if not mask.any():
        return features, mask
    keep_col = Tensor((~mask).astype(float)[:, None])
    mask_col = Tensor(mask.astype(float)[:, None])
    emb_row = ag.reshape(mask_embedding, (1, d))
    masked = ag.mul(features, keep_col) + ag.matmul(mask_col, emb_row)
    return masked, mask


@dataclass
class Labeler:
    """Pseudo-label source: k-means over mfcc features (first phase) or over
    the hidden states of a given encoder layer (second phase)."""

    kmeans: KMeansModel
    source: Union[str, int] = "mfcc"   # "mfcc" or a layer index


class PretrainModel(Module):
    """Extractor + encoder + masked-frame prediction head."""

    def __init__(self, enc_cfg: EncoderConfig, spec: PrecisionSpec, seed: int,
                 input_dim: int = 32, extractor_channels: int = 32,
                 n_clusters: int = 16):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(extractor_channels, input_dim, rng)
        self.mask_embedding = Tensor(rng.normal(0.0, 0.1, size=input_dim),
                                     requires_grad=True)
        self.encoder = build_encoder(enc_cfg, spec, seed=int(rng.integers(2 ** 31)),
                                     input_dim=input_dim)
        # small head init keeps the initial loss at the uniform baseline ln(k)
        self.head = Linear(enc_cfg.dim, n_clusters, rng, init_scale=0.01)
        self.n_clusters = n_clusters

    def hidden_states(self, wave: np.ndarray) -> list[np.ndarray]:
        """Per-layer encoder outputs for an unmasked waveform, no gradients."""
        feats = self.extractor(wave)
        return [t.data for t in self.encoder.layer_outputs(feats)]

    def representations(self, wave: np.ndarray) -> np.ndarray:
        feats = self.extractor(wave)
        return self.encoder(feats).data

    def probe_features(self, wave: np.ndarray) -> np.ndarray:
        """Extractor output and every encoder layer, concatenated per frame.

        Downstream probes conventionally learn a combination over all hidden
        layers; concatenation gives a linear probe the same access.
        """
        feats = self.extractor(wave)
        layers = [feats.data] + [t.data for t in self.encoder.layer_outputs(feats)]
        return np.concatenate(layers, axis=1)


def frame_pseudo_labels(model: PretrainModel, wave: np.ndarray,
                        labeler: Labeler) -> np.ndarray:
    if labeler.source == "mfcc":
        return kmeans_assign(labeler.kmeans, mfcc_like(wave))
    return kmeans_assign(labeler.kmeans, model.hidden_states(wave)[labeler.source])


@dataclass
class StepResult:
    loss: float
    skipped: bool = False


def hubert_step(model: PretrainModel, batch: WaveBatch, labeler: Labeler,
                mask_spec: MaskSpec, opt, rng: np.random.Generator,
                prev_loss: float = float("nan")) -> StepResult:
    """One masked-prediction step: forward, cross-entropy on masked frames,
    one optimizer step. A batch with no masked frames is skipped."""
    targets = [frame_pseudo_labels(model, w, labeler) for w in batch.waveforms]
    model.train(True)
    with Tape() as tape:
        logit_parts, mask_parts = [], []
        for wave in batch.waveforms:
            feats = model.extractor(wave)
            masked, mask = apply_mask(feats, model.mask_embedding, mask_spec, rng)
            mask_parts.append(mask)
            reps = model.encoder(masked)
            logit_parts.append(model.head(reps))
        mask_all = np.concatenate(mask_parts)
        if not mask_all.any():
            model.train(False)
            return StepResult(loss=prev_loss, skipped=True)
        logits = ag.concat(logit_parts, axis=0)
        labels = np.concatenate(targets)
        loss = ag.cross_entropy(logits, labels, mask=mask_all)
        tape.backward(loss)
    opt.step()
    model.apply_constraints()
    opt.zero_grad()
    model.train(False)
    return StepResult(loss=loss.item())


@dataclass
class TrainSettings:
    steps: int = 200
    lr: float = 5e-4
    optimizer: str = "adam"
    warmup_frac: float = 0.1
    frame_budget: int = 512
    mask: MaskSpec = field(default_factory=MaskSpec)


def make_batches(corpus: WaveBatch, frame_budget: int) -> list[list[int]]:
    """Greedy clip grouping under a frames-per-step budget, in corpus order."""
    batches, current, frames = [], [], 0
    for i, length in enumerate(corpus.lengths):
        clip_frames = n_frames_for(length)
        if current and frames + clip_frames > frame_budget:
            batches.append(current)
            current, frames = [], 0
        current.append(i)
        frames += clip_frames
    if current:
        batches.append(current)
    return batches


def train(model: PretrainModel, corpus: WaveBatch, labeler: Labeler,
          settings: TrainSettings, seed: int) -> list[float]:
    """Run the masked-prediction loop; returns the per-step loss curve."""
    rng = np.random.default_rng(seed)
    if settings.optimizer == "adam":
        opt = Adam(model.parameters(), lr=settings.lr)
    elif settings.optimizer == "sgd":
        opt = SGD(model.parameters(), lr=settings.lr)
    else:
        raise ConfigError(f"unknown optimizer {settings.optimizer!r}")
    batches = make_batches(corpus, settings.frame_budget)
    losses: list[float] = []
    prev = float("nan")
    for step in range(settings.steps):
        opt.lr = warmup_lr(settings.lr, step, settings.steps, settings.warmup_frac)
        clip_ids = batches[step % len(batches)]
        batch = WaveBatch([corpus.waveforms[i] for i in clip_ids])
        result = hubert_step(model, batch, labeler, settings.mask, opt, rng,
                             prev_loss=prev)
        prev = result.loss
        losses.append(result.loss)
    return losses


def fit_mfcc_labeler(corpus: WaveBatch, k: int, seed: int) -> Labeler:
    points = np.concatenate([mfcc_like(w) for w in corpus.waveforms])
    return Labeler(kmeans=kmeans_fit(points, k, seed=seed), source="mfcc")


def second_phase_relabel(model: PretrainModel, corpus: WaveBatch,
                         layer_index: int, k: int, seed: int = 0) -> Labeler:
    """Refit the acoustic units on hidden states of one encoder layer."""
    n_layers = len(model.encoder.blocks)
    if not 0 <= layer_index <= n_layers:
        raise ConfigError(
            f"layer_index {layer_index} out of range [0, {n_layers}]")
    points = np.concatenate(
        [model.hidden_states(w)[layer_index] for w in corpus.waveforms])
    return Labeler(kmeans=kmeans_fit(points, k, seed=seed), source=layer_index)


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------

def linear_probe_accuracy(x_train: np.ndarray, y_train: np.ndarray,
                          x_eval: np.ndarray, y_eval: np.ndarray,
                          n_classes: int, seed: int,
                          steps: int = 300, lr: float = 5e-2) -> float:
    """Train a softmax probe on frozen, standardized features; report
    held-out accuracy."""
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    x_train = (x_train - mu) / sd
    x_eval = (x_eval - mu) / sd
    rng = np.random.default_rng(seed)
    probe = Linear(x_train.shape[1], n_classes, rng, init_scale=0.01)
    opt = Adam(probe.parameters(), lr=lr)
    xt = Tensor(x_train)
    for _ in range(steps):
        with Tape() as tape:
            loss = ag.cross_entropy(probe(xt), y_train)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    logits = probe(Tensor(x_eval)).data
    return float((logits.argmax(axis=1) == y_eval).mean())


def probe_eval(model: PretrainModel, task: str, seed: int,
               n_classes: int = 8, train_clips: int = 20, eval_clips: int = 10,
               noise_sigma: float = 0.15, shuffle_labels: bool = False,
               probe_steps: int = 300) -> float:
    """Freeze the model, train a linear probe on synthetic labeled audio.

    ``frame_cls`` predicts the per-frame tone class from the concatenated
    hidden states; ``seq_cls`` predicts a clip-dominant class from their
    mean over time.
    """
    if task not in ("frame_cls", "seq_cls"):
        raise ConfigError(f"unknown probe task {task!r}")
    dominant = 0.7 if task == "seq_cls" else 0.0
    cfg = SynthConfig(n_clips=train_clips + eval_clips, n_classes=n_classes,
                      noise_sigma=noise_sigma, dominant_frac=dominant)
    corpus = synth_corpus(cfg, seed=seed)
    reps = [model.probe_features(w) for w in corpus.batch.waveforms]
    if task == "frame_cls":
        x_train = np.concatenate(reps[:train_clips])
        y_train = np.concatenate(corpus.frame_labels[:train_clips])
        x_eval = np.concatenate(reps[train_clips:])
        y_eval = np.concatenate(corpus.frame_labels[train_clips:])
    else:
        pooled = np.stack([r.mean(axis=0) for r in reps])
        x_train, y_train = pooled[:train_clips], corpus.clip_labels[:train_clips]
        x_eval, y_eval = pooled[train_clips:], corpus.clip_labels[train_clips:]
    if shuffle_labels:
        rng = np.random.default_rng(seed + 1)
        y_train = rng.permutation(y_train)
        y_eval = rng.permutation(y_eval)
    return linear_probe_accuracy(x_train, y_train, x_eval, y_eval,
                                 n_classes=n_classes, seed=seed, steps=probe_steps)
