"""Configuration dataclasses and the flat ``section.key = value`` text format."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .objective import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModulesConfig:
    adaptive_sampling: bool = True
    sve: bool = True
    bix: bool = True
    ego_only: bool = False
    # fusion used when bix is off
    bix_off_mode: str = "concat_channel"


@dataclass
class SamplerConfig:
    k_ratio: float = 0.5
    alpha: float = 0.5
    gumbel_temp: float = 1.0
    lambda_sel: float = 0.02
    lambda_vic: float = 0.02
    gamma_var: float = 1.0


@dataclass
class SVEConfig:
    M: int = 16
    tau: float = 1.0
    lambda_ent: float = 0.02
    lambda_div: float = 0.02
    multi_level: bool = True
    fixed_tokens: bool = False


@dataclass
class FusionConfig:
    mode: str = "bix"
    gate_granularity: str = "position"


@dataclass
class DetConfig:
    d_model: int = 64
    heads: int = 4
    hidden: int = 64
    levels: int = 3
    enc_layers: int = 2
    dec_layers: int = 2
    n_queries: int = 10


@dataclass
class LossWeights:
    alpha_giou: float = 2.0
    alpha_cls: float = 1.0
    beta_giou: float = 2.0
    beta_cls: float = 1.0
    beta_ec: float = 0.5
    beta_cap: float = 0.0
    lambda_imit: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class SyntheticConfig:
    d: int = 64
    exo_len_min: int = 48
    exo_len_max: int = 64
    ego_len_min: int = 40
    ego_len_max: int = 64
    steps: int = 6
    min_step_len: int = 2
    error_rate: float = 0.3
    redundancy: float = 0.5
    view_offset: float = 1.0
    warp_min: float = 0.7
    warp_max: float = 1.4
    noise: float = 0.1
    corruption_angle: float = 90.0
    vocab: int = 16  # shared step vocabulary size; 0 draws fresh prototypes per pair
    scale: float = 0.0  # feature norm; 0 means sqrt(d)
    seed: int = 0


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    n_train: int = 40
    n_eval: int = 20
    seed: int = 0
    log_every: int = 50


@dataclass
class EvalConfig:
    tiou_side: str = "gt"


@dataclass
class Config:
    modules: ModulesConfig = field(default_factory=ModulesConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sve: SVEConfig = field(default_factory=SVEConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    det: DetConfig = field(default_factory=DetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            **dataclasses.asdict(self.loss),
            lambda_sel=self.sampler.lambda_sel if self.modules.adaptive_sampling else 0.0,
            lambda_vic=self.sampler.lambda_vic if self.modules.adaptive_sampling else 0.0,
            lambda_ent=self.sve.lambda_ent if self.sve_dictionary_active() else 0.0,
            lambda_div=self.sve.lambda_div if self.sve_dictionary_active() else 0.0,
        )

    def sve_dictionary_active(self) -> bool:
        return self.modules.sve and not self.sve.fixed_tokens

    def fusion_mode(self) -> str:
        return self.fusion.mode if self.modules.bix else self.modules.bix_off_mode

    def copy(self) -> "Config":
        return copy.deepcopy(self)

    def validate(self) -> "Config":
        if self.det.d_model != self.data.d:
            raise ConfigError(f"det.d_model ({self.det.d_model}) must equal data.d ({self.data.d})")
        if self.det.d_model % self.det.heads:
            raise ConfigError("det.d_model must be divisible by det.heads")
        if not 0.0 < self.sampler.k_ratio <= 1.0:
            raise ConfigError("sampler.k_ratio must lie in (0, 1]")
        if not 0.0 < self.sampler.alpha <= 1.0:
            raise ConfigError("sampler.alpha must lie in (0, 1]")
        if self.sve.M < 2 or self.sve.tau <= 0:
            raise ConfigError("sve.M must be >= 2 and sve.tau > 0")
        if self.det.n_queries < self.data.steps:
            raise ConfigError("det.n_queries must be at least data.steps")
        if not 0.0 <= self.data.error_rate <= 1.0:
            raise ConfigError("data.error_rate must lie in [0, 1]")
        if self.data.vocab and self.data.vocab <= self.data.steps:
            raise ConfigError("data.vocab must exceed data.steps so a wrong step can be substituted (or be 0)")
        if self.eval.tiou_side not in ("gt", "pred"):
            raise ConfigError("eval.tiou_side must be 'gt' or 'pred'")
        return self


SECTIONS = [f.name for f in fields(Config)]
# sections that determine parameter shapes and forward behaviour
MODEL_SECTIONS = ("modules", "sampler", "sve", "fusion", "det")


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def set_key(cfg: Config, key: str, value: str) -> None:
    if "." not in key:
        raise ConfigError(f"config key must be section.key, got {key!r}")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(cfg, section)
    types = {f.name: f.type for f in fields(obj)}
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(obj, name, _parse_value(value, types[name]))
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from err


def parse_config(text: str, cfg: Config | None = None) -> Config:
    cfg = Config() if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = parse_config(Path(path).read_text(encoding="utf-8"), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v)
    return cfg.validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: Config, sections=SECTIONS) -> str:
    lines = []
    for section in sections:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(dump_config(cfg, MODEL_SECTIONS).encode("utf-8")).hexdigest()
