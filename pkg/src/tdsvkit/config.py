"""Run configuration: one nested dataclass tree, JSON round-trippable.

CLI flags override file values; every command output embeds the resolved
snapshot so runs are reproducible from (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import MfccConfig
from .metrics import DcfConfig
from .pooling import SwaspConfig
from .speakernet import AamConfig, SpeakerEncoderConfig
from .textnet import TextExtractorConfig


@dataclass
class CorpusConfig:
    n_speakers: int = 20
    utts_per_label: int = 10
    augment: bool = False


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 0.001
    lr_decay: float = 0.97
    clip_norm: float = 5.0
    dtype: str = "float32"
    n_workers: int = 0  # 0 = one per core (capped by batch size); math is worker-count invariant


@dataclass
class TrialConfig:
    n_per_family: int = 100
    ratio: float = 0.8


@dataclass
class RunConfig:
    seed: int = 42
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    text: TextExtractorConfig = field(default_factory=TextExtractorConfig)
    speaker_encoder: SpeakerEncoderConfig = field(default_factory=SpeakerEncoderConfig)
    # desk-scale default: per-segment projection matches the MFA width
    swasp: SwaspConfig = field(default_factory=lambda: SwaspConfig(segment_proj_dim=256))
    pooling_mode: str = "A+S"
    crop_frames: int = 0  # 0 = use full utterances
    aam: AamConfig = field(default_factory=AamConfig)
    dcf: DcfConfig = field(default_factory=DcfConfig)
    train_text: TrainConfig = field(default_factory=TrainConfig)
    train_speaker: TrainConfig = field(default_factory=TrainConfig)
    train_fusion: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, batch_size=32))
    trials: TrialConfig = field(default_factory=TrialConfig)

    def apply_paper_shapes(self):
        """Mirror the published tensor sizes: 1536-wide MFA frames cropped to
        200, 1536-wide per-segment vectors, 192-wide embeddings."""
        self.speaker_encoder.mfa_channels = 1536
        self.swasp.segment_proj_dim = 1536
        self.swasp.window_len = 50
        self.swasp.stride = 25
        self.swasp.out_dim = 192
        self.crop_frames = 200
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(dc_type, payload):
            kwargs = {}
            for f in dataclasses.fields(dc_type):
                if f.name not in payload:
                    continue
                val = payload[f.name]
                if dataclasses.is_dataclass(f.type if isinstance(f.type, type) else None) and isinstance(val, dict):
                    kwargs[f.name] = build(f.type, val)
                else:
                    kwargs[f.name] = tuple(val) if isinstance(val, list) and f.name in (
                        "channels", "dilations") else val
            return dc_type(**kwargs)

        top = {}
        nested = {
            "corpus": CorpusConfig, "mfcc": MfccConfig, "text": TextExtractorConfig,
            "speaker_encoder": SpeakerEncoderConfig, "swasp": SwaspConfig,
            "aam": AamConfig, "dcf": DcfConfig, "train_text": TrainConfig,
            "train_speaker": TrainConfig, "train_fusion": TrainConfig, "trials": TrialConfig,
        }
        for key, val in data.items():
            if key in nested and isinstance(val, dict):
                top[key] = build(nested[key], val)
            else:
                top[key] = val
        return cls(**top)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
