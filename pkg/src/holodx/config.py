"""Model, training and loss configuration with the two named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    kl_layers: int = 2
    mem_layers: int = 2
    volume_side: int = 32
    patch_side: int = 8
    vocab_size: int = 512
    max_text_len: int = 128
    num_classes: int = 2
    knowledge_len: int = 16  # tokens kept per factor's knowledge text
    contrastive_dim: int = 32
    memory_window: int = 100  # T, batches kept in each memory bank
    prototypes: int = 16  # m
    topk: int = 8  # k for value prototypes
    pmm_normalize: bool = False
    gate_bias_init: float = 2.0
    momentum: float = 0.995
    dtype: str = "float32"

    def validate(self):
        if self.volume_side % self.patch_side:
            raise ConfigError(f"volume_side {self.volume_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must leave room beyond the reserved ids")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum coefficient must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        return self

    @property
    def num_patches(self):
        return (self.volume_side // self.patch_side) ** 3

    @property
    def head_dim(self):
        return self.embed_dim // self.heads


@dataclass
class LossWeights:
    align: float = 1.0
    restore: float = 1.0
    cls: float = 1.0
    temperature: float = 0.07

    def validate(self):
        if min(self.align, self.restore, self.cls) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        return self


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global L2 norm cap; 0 disables
    queue_size: int = 1024
    seed: int = 0
    use_kag: bool = True
    use_memory: bool = True
    use_knowledge: bool = True
    use_kdc: bool = True
    itc_queue: bool = True
    loss_mask: tuple = ()  # names from {"itc", "kdc", "res_i", "res_t", "cls"}
    max_steps: int = 0  # 0 = no cap
    log_every: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    preset: str = "toy"
    version: int = CONFIG_VERSION

    def validate(self):
        self.model.validate()
        self.loss.validate()
        bad = set(self.train.loss_mask) - {"itc", "kdc", "res_i", "res_t", "cls"}
        if bad:
            raise ConfigError(f"unknown loss terms in loss_mask: {sorted(bad)}")
        if self.train.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        d["train"]["loss_mask"] = list(self.train.loss_mask)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
        preset = d.pop("preset", "toy")
        base = preset_config(preset)
        try:
            model = dataclasses.replace(base.model, **d.pop("model", {}))
            tr = dict(d.pop("train", {}))
            if "betas" in tr:
                tr["betas"] = tuple(tr["betas"])
            if "loss_mask" in tr:
                tr["loss_mask"] = tuple(tr["loss_mask"])
            train = dataclasses.replace(base.train, **tr)
            loss = dataclasses.replace(base.loss, **d.pop("loss", {}))
        except TypeError as e:
            raise ConfigError(str(e)) from None
        if d:
            raise ConfigError(f"unknown config sections: {sorted(d)}")
        return cls(model=model, train=train, loss=loss, preset=preset).validate()


def preset_config(name="toy"):
    if name == "toy":
        return RunConfig()
    if name == "paper-scale":
        model = ModelConfig(embed_dim=768, heads=12, encoder_layers=12, decoder_layers=6,
                            kl_layers=6, mem_layers=6, volume_side=128, patch_side=16,
                            max_text_len=512, knowledge_len=64)
        train = TrainConfig(batch_size=12, lr=2e-5)
        return RunConfig(model=model, train=train, preset="paper-scale")
    raise ConfigError(f"unknown preset {name!r}")


def load_config(path, preset=None):
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    if preset is not None:
        raw.setdefault("preset", preset)
    return RunConfig.from_dict(raw)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
