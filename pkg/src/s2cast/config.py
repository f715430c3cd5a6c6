"""Run configuration shared by the model, the trainer and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

ABLATIONS = ("no_metis", "no_sh", "no_intra", "no_inter", "no_sa")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # architecture; desk-scale defaults (published scale: d_model=768, p0=64)
    d_model: int = 32
    levels: int = 2
    p0: int = 32
    l_max: int = 3
    t_in: int = 48
    f_out: int = 24
    heads: int = 1
    d_max: int = 8
    ffn_mult: int = 2
    ablations: list[str] = field(default_factory=list)
    # graph
    epsilon_km: float | None = None
    epsilon_knn: list[float] | None = None  # [k, quantile] helper, used only when epsilon_km is unset
    imbalance: float = 0.03
    # optimisation (none of these are given by the method; field defaults)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 30
    patience: int = 5
    steps_per_epoch: int | None = None
    eval_batch: int = 64
    seed: int = 0
    # data
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    stride: int = 1

    def validate(self) -> "TrainConfig":
        positive = ("d_model", "levels", "p0", "t_in", "f_out", "heads", "ffn_mult",
                    "batch_size", "epochs", "patience", "eval_batch", "stride")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.l_max < 0 or self.d_max < 1:
            raise ConfigError("l_max must be >= 0 and d_max >= 1")
        if self.p0 % (2 ** (self.levels - 1)):
            raise ConfigError(f"p0={self.p0} must be divisible by 2^(levels-1)")
        if self.d_model <= (self.l_max + 1) ** 2:
            raise ConfigError("d_model must exceed the number of harmonic features (l_max+1)^2")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablations {sorted(unknown)}; choose from {ABLATIONS}")
        if self.epsilon_km is None and self.epsilon_knn is None:
            raise ConfigError("epsilon_km is required (or epsilon_knn = [k, quantile])")
        if self.epsilon_km is not None and self.epsilon_km < 0:
            raise ConfigError("epsilon_km must be non-negative")
        if self.epsilon_knn is not None and len(self.epsilon_knn) != 2:
            raise ConfigError("epsilon_knn must be [k, quantile]")
        if self.imbalance < 0:
            raise ConfigError("imbalance must be non-negative")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split must be three positive fractions summing to 1")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "TrainConfig":
        data = self.to_dict()
        data.update({k: v for k, v in kw.items() if v is not None})
        return TrainConfig.from_dict(data)
