"""Run configuration: line-oriented ``key = value`` text with typed defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .models.fusion import FusionConfig
from .models.seg import SegConfig

SEG_INPUTS = ("fused", "m1", "m2")
ABLATION_FLAGS = ("no_decoder", "no_adv_pretrain", "no_adv_coop", "no_cross_attention", "freeze_fusion")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 80
    epochs_fusion: int = 140
    lr_fusion: float = 1e-4
    lr_every: int = 20
    lr_factor: float = 0.5
    batch: int = 16
    patch: int = 224
    lr_seg: float = 0.01
    momentum_seg: float = 0.9
    weight_decay_seg: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seed":
                continue
            if f.name in ("weight_decay_seg", "momentum_seg"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be non-negative")
            elif f.name.startswith("epochs"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be non-negative")
            elif v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.patch % 8:
            raise ConfigError(f"patch must be a multiple of 8, got {self.patch}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    patch: int = 224
    batch: int = 16
    epochs_pretrain: int = 80
    epochs_fusion: int = 140
    lr_fusion: float = 1e-4
    lr_seg: float = 0.01
    lambda_adv: float = 0.1
    sigma: float = 0.5
    lambda_fuse: float = 0.5
    alpha_ce: float = 0.5
    beta_dice: float = 0.5
    channels_low: int = 16
    channels_high: int = 16
    no_decoder: bool = False
    no_adv_pretrain: bool = False
    no_adv_coop: bool = False
    no_cross_attention: bool = False
    freeze_fusion: bool = False
    seg_input: str = "fused"

    def __post_init__(self):
        if self.seg_input not in SEG_INPUTS:
            raise ConfigError(f"seg_input must be one of {SEG_INPUTS}, got {self.seg_input!r}")
        if self.channels_high % 2:
            raise ConfigError("channels_high must be even (coupling blocks split channels in half)")
        if self.channels_low < 1:
            raise ConfigError("channels_low must be positive")
        self.train()
        try:
            self.weights()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train(self) -> TrainConfig:
        return TrainConfig(epochs_pretrain=self.epochs_pretrain, epochs_fusion=self.epochs_fusion,
                           lr_fusion=self.lr_fusion, batch=self.batch, patch=self.patch,
                           lr_seg=self.lr_seg, seed=self.seed)

    def weights(self, stage: str = "coop") -> LossWeights:
        off = self.no_adv_pretrain if stage == "pretrain" else self.no_adv_coop
        return LossWeights(lambda_adv=0.0 if off else self.lambda_adv, sigma=self.sigma,
                           lambda_fuse=self.lambda_fuse, alpha=self.alpha_ce, beta=self.beta_dice)

    def fusion(self) -> FusionConfig:
        return FusionConfig(c_low=self.channels_low, c_high=self.channels_high,
                            cross_attention=not self.no_cross_attention, decoder=not self.no_decoder)

    def seg(self) -> SegConfig:
        return SegConfig()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """``key=value`` strings from the command line, same rules as the file format."""
    return parse_config("\n".join(pairs), base=cfg) if pairs else cfg
