"""Run configuration: one JSON file shared by prepare-data, train, synth and eval."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .acoustic import ModelConfig
from .dsp import StftConfig
from .errors import ConfigError
from .score import QuantizerSpec
from .semantic import SemanticEncoderConfig


@dataclass
class OptimizerSchedule:
    beta1: float = 0.8
    beta2: float = 0.99
    epsilon: float = 1e-9
    lr0: float = 1e-4
    decay_per_epoch: float = 0.999875
    decay_unit: str = "epoch"  # or "step"

    def __post_init__(self):
        if not 0 < self.decay_per_epoch <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.decay_unit not in ("epoch", "step"):
            raise ValueError("decay_unit must be 'epoch' or 'step'")

    def lr_at(self, epoch):
        return self.lr0 * self.decay_per_epoch**epoch


@dataclass
class LossWeights:
    mel: float = 45.0
    kl: float = 1.0
    duration: float = 1.0
    pitch: float = 1.0
    energy: float = 1.0
    fm: float = 2.0
    adv: float = 1.0


@dataclass
class TrainConfig:
    steps: int = 200000
    batch_size: int = 4
    segment_frames: int = 32
    teacher_forcing_steps: int = 10000
    seed: int = 1234
    checkpoint_interval: int = 1000
    n_train: Optional[int] = None  # defaults to all but the held-out fraction
    eval_fraction: float = 206 / 3756
    grad_clip: Optional[float] = None


@dataclass
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 80
    f0_min: float = 65.0
    f0_max: float = 1000.0
    provider: str = "stub"
    model: ModelConfig = field(default_factory=ModelConfig)
    semantic: SemanticEncoderConfig = field(default_factory=SemanticEncoderConfig)
    optimizer: OptimizerSchedule = field(default_factory=OptimizerSchedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    pitch_quantizer: Optional[QuantizerSpec] = None
    energy_quantizer: Optional[QuantizerSpec] = None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            kw = {
                "stft": StftConfig(**d.pop("stft", {})),
                "model": ModelConfig(**d.pop("model", {})),
                "semantic": SemanticEncoderConfig(**d.pop("semantic", {})),
                "optimizer": OptimizerSchedule(**d.pop("optimizer", {})),
                "loss_weights": LossWeights(**d.pop("loss_weights", {})),
                "train": TrainConfig(**d.pop("train", {})),
            }
            for q in ("pitch_quantizer", "energy_quantizer"):
                value = d.pop(q, None)
                kw[q] = QuantizerSpec(**value) if value else None
            return cls(**kw, **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid run config: {e}") from e

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def model_hash(self):
        """Hash over everything that changes model inputs or parameter shapes."""
        relevant = {
            "stft": dataclasses.asdict(self.stft),
            "n_mels": self.n_mels,
            "f0": [self.f0_min, self.f0_max],
            "provider": self.provider,
            "model": dataclasses.asdict(self.model),
            "semantic": dataclasses.asdict(self.semantic),
            "pitch_quantizer": self.pitch_quantizer.to_dict() if self.pitch_quantizer else None,
            "energy_quantizer": self.energy_quantizer.to_dict() if self.energy_quantizer else None,
        }
        blob = json.dumps(relevant, sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def feature_hash(self):
        relevant = {"stft": dataclasses.asdict(self.stft), "n_mels": self.n_mels, "f0": [self.f0_min, self.f0_max], "provider": self.provider}
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode("utf-8")).hexdigest()[:12]


VARIANTS = {
    "proposed": {"use_energy_predictor": True, "sem": "standard"},
    "no-energy": {"use_energy_predictor": False, "sem": "standard"},
    "no-sem": {"use_energy_predictor": True, "sem": "off"},
    "reversed-sem": {"use_energy_predictor": True, "sem": "reversed"},
}


def apply_variant(cfg, name):
    """Copy of ``cfg`` configured for one of the ablation systems."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[name]
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, use_energy_predictor=v["use_energy_predictor"]),
        semantic=dataclasses.replace(cfg.semantic, variant=v["sem"]),
    )


def desk_config(**train_overrides):
    """CPU-sized configuration: full-size prior path, narrow
    posterior/flow/decoder, short schedule at twice the base learning rate."""
    cfg = RunConfig()
    cfg.model = dataclasses.replace(cfg.model, posterior_channels=96, posterior_layers=4, flow_channels=64, decoder_channels=64)
    cfg.optimizer = dataclasses.replace(cfg.optimizer, lr0=2e-4)
    cfg.train = dataclasses.replace(cfg.train, **{"steps": 2000, "checkpoint_interval": 500, **train_overrides})
    return cfg
