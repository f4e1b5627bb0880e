"""Binarized speech-transformer encoders, a toy masked-prediction pretraining
loop, and a static storage/FLOP/BOP cost profiler."""

from .autograd import Tape, Tensor
from .binarize import (BinarizerState, PrecisionSpec, binarize_activations,
                       binarize_weights, binarized_conv1d, binarized_linear)
from .costmodel import CostReport, LayerCost, profile, profile_table, reduction_report
from .encoders import EncoderConfig, SparsePattern, build_encoder, encode
from .kmeans import KMeansModel, kmeans_assign, kmeans_fit
from .pretrain import (MaskSpec, PretrainModel, WaveBatch, apply_mask, hubert_step,
                       mfcc_like, probe_eval, second_phase_relabel, synth_corpus)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor",
    "BinarizerState", "PrecisionSpec", "binarize_activations", "binarize_weights",
    "binarized_conv1d", "binarized_linear",
    "CostReport", "LayerCost", "profile", "profile_table", "reduction_report",
    "EncoderConfig", "SparsePattern", "build_encoder", "encode",
    "KMeansModel", "kmeans_assign", "kmeans_fit",
    "MaskSpec", "PretrainModel", "WaveBatch", "apply_mask", "hubert_step",
    "mfcc_like", "probe_eval", "second_phase_relabel", "synth_corpus",
    "__version__",
]
