"""INI run configuration: one section per component, unknown keys rejected."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .compat import CompatConfig
from .gan import GanConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    shifts: tuple = (1, 2)
    per_class: int = 200
    image_size: int = 16
    ratios: tuple = (0.6, 0.2, 0.2)
    pairs_per_item: int = 1
    positive_ratio: float = 0.5
    idx_images: str = ""
    idx_labels: str = ""


@dataclass
class ModelConfig:
    K: int = 2
    N: int = 20
    trunk: tuple = (128, 64)
    lambda_m: float = 0.0
    mode: str = "pcd"
    c_init: float = 1.0
    head_init: float = 0.1

    def compat(self, input_dim):
        return CompatConfig(K=self.K, N=self.N, trunk=self.trunk, lambda_m=self.lambda_m,
                            mode=self.mode, input_dim=input_dim, c_init=self.c_init,
                            head_init=self.head_init)


@dataclass
class GanSection:
    Z: int = 20
    hidden: tuple = (256, 256)
    lambda_gp: float = 0.5
    lambda_dra: float = 0.5
    m_enc: float = 0.0  # 0 means 0.2 * m_prj
    m_prj: float = 0.0  # 0 means 1.2 x mean positive-pair distance
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    nonsaturating: bool = False
    steps: int = 2000
    sample_every: int = 500
    log_every: int = 50

    def gan(self, K, N, sample_dim, m_enc, m_prj):
        return GanConfig(Z=self.Z, K=K, N=N, sample_dim=sample_dim, hidden=self.hidden,
                         output="sigmoid", lambda_gp=self.lambda_gp, lambda_dra=self.lambda_dra,
                         m_enc=m_enc, m_prj=m_prj, learning_rate=self.learning_rate,
                         beta1=self.beta1, beta2=self.beta2, batch_size=self.batch_size,
                         nonsaturating=self.nonsaturating)


@dataclass
class RunSection:
    seed: int = 0
    out: str = "run"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gan: GanSection = field(default_factory=GanSection)
    run: RunSection = field(default_factory=RunSection)


def _parse(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in raw.replace(",", " ").split())
    return type(default)(raw)


def load_config(path=None, text=None):
    """Read an INI document into a RunConfig; missing keys keep their defaults."""
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh)
        elif text is not None:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        target = sections[name]
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                value = _parse(raw, getattr(target, key))
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
            setattr(target, key, value)
    # re-run validation on sections that have it
    try:
        cfg.train = TrainConfig(**dataclasses.asdict(cfg.train))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def dump_config(cfg):
    """INI text for ``cfg`` (round-trips through load_config)."""
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"[{f.name}]")
        for g in dataclasses.fields(getattr(cfg, f.name)):
            value = getattr(getattr(cfg, f.name), g.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{g.name} = {value}")
        lines.append("")
    return "\n".join(lines)
