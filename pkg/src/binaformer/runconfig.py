"""Config file parsing and the bundled reference configurations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .binarize import PrecisionSpec
from .encoders import EncoderConfig
from .errors import ConfigError
from .pretrain import MaskSpec, TrainSettings

PAPER_SUITE = ("vanilla", "conformer_s", "squeeze_xs", "sparse_dn_s", "sparse_sw_s")

_ENCODER_KEYS = {"kind", "layers", "dim", "heads", "ffn_expansion", "conv_kernel",
                 "pattern", "subsample_factor", "max_len"}
_TOP_KEYS = _ENCODER_KEYS | {"prec", "frames", "device_peak", "train"}
_TRAIN_KEYS = {"steps", "lr", "optimizer", "warmup_frac", "frame_budget",
               "mask_span", "mask_prob", "clusters", "input_dim",
               "extractor_channels", "corpus_clips", "clip_len",
               "corpus_classes", "noise_sigma"}


@dataclass
class RunSpec:
    """Everything a CLI command needs from one JSON config file."""

    encoder: EncoderConfig
    prec: PrecisionSpec
    frames: Optional[int] = None
    device_peak: Optional[float] = None
    train: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return int(self.train.get("clusters", 16))

    @property
    def input_dim(self) -> int:
        return int(self.train.get("input_dim", 32))

    @property
    def extractor_channels(self) -> int:
        return int(self.train.get("extractor_channels", 32))

    def train_settings(self, steps: Optional[int] = None) -> TrainSettings:
        t = self.train
        mask = MaskSpec(span_length=int(t.get("mask_span", 4)),
                        mask_prob=float(t.get("mask_prob", 0.08)))
        return TrainSettings(
            steps=steps if steps is not None else int(t.get("steps", 200)),
            lr=float(t.get("lr", 5e-4)),
            optimizer=str(t.get("optimizer", "adam")),
            warmup_frac=float(t.get("warmup_frac", 0.1)),
            frame_budget=int(t.get("frame_budget", 512)),
            mask=mask)

    def corpus_config(self) -> dict:
        t = self.train
        return {"n_clips": int(t.get("corpus_clips", 24)),
                "clip_len": int(t.get("clip_len", 1024)),
                "n_classes": int(t.get("corpus_classes", 8)),
                "noise_sigma": float(t.get("noise_sigma", 0.05))}


def parse_run_config(data: dict) -> RunSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(data).__name__}")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    train = data.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("config field 'train' must be an object")
    unknown_train = set(train) - _TRAIN_KEYS
    if unknown_train:
        raise ConfigError(f"unknown train field(s): {sorted(unknown_train)}")
    encoder = EncoderConfig.from_dict({k: v for k, v in data.items() if k in _ENCODER_KEYS})
    prec = PrecisionSpec.from_label(data.get("prec", "FP32"))
    frames = int(data["frames"]) if "frames" in data else None
    peak = float(data["device_peak"]) if "device_peak" in data else None
    return RunSpec(encoder=encoder, prec=prec, frames=frames, device_peak=peak,
                   train=dict(train))


def load_run_config(path: Union[str, Path]) -> RunSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    try:
        return parse_run_config(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def run_spec_to_dict(spec: RunSpec) -> dict:
    d = spec.encoder.to_dict()
    d["prec"] = spec.prec.label
    if spec.train:
        d["train"] = dict(spec.train)
    return d


def load_bundled_config(name: str) -> RunSpec:
    if name not in PAPER_SUITE:
        raise ConfigError(f"unknown bundled config {name!r}; choose from {PAPER_SUITE}")
    text = resources.files("binaformer").joinpath(f"configs/{name}.json").read_text()
    return parse_run_config(json.loads(text))


def paper_suite() -> list[tuple[str, EncoderConfig]]:
    """The five reference configurations, in table order."""
    return [(name, load_bundled_config(name).encoder) for name in PAPER_SUITE]
