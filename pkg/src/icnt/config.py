"""Run configuration: presets, ``key = value`` files, and flag precedence.

Resolution order, lowest to highest: dataclass defaults, preset,
config-file keys, explicit command-line flags.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import TINY_DEPTHS, TINY_WIDTHS, BackboneConfig
from .data import SplitSpec
from .head import HeadConfig, ModelConfig
from .loss import LossConfig
from .train import LR_RESULTS, LR_METHODS, TrainConfig


class ConfigError(Exception):
    pass


PRESETS: dict[str, dict[str, Any]] = {
    # full model: dual pooling + SEVector + feature smoothing
    "icnt": {"model.arch": "convnext", "head.use_gmp": True, "head.use_sevector": True, "loss.lambda_fs": 0.05},
    # plain GAP head on the same backbone
    "cnt": {"model.arch": "convnext", "head.use_gmp": False, "head.use_sevector": False, "loss.lambda_fs": 0.0},
    "basecnn": {"model.arch": "basecnn", "head.use_gmp": False, "head.use_sevector": False, "loss.lambda_fs": 0.0},
}

PROTOCOLS = {
    "results": {"train.learning_rate": LR_RESULTS, "train.epochs": 10},
    "methods": {"train.learning_rate": LR_METHODS, "train.epochs": 20},
}


@dataclass
class ModelSection:
    arch: str = "convnext"
    img_size: int = 64


@dataclass
class TrainSection:
    learning_rate: float = LR_RESULTS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    threads: int = 8


@dataclass
class PathSection:
    data: str = ""
    out: str = ""
    checkpoint: str = ""


@dataclass
class RunConfig:
    preset: str = "icnt"
    model: ModelSection = field(default_factory=ModelSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    split: SplitSpec = field(default_factory=SplitSpec)
    paths: PathSection = field(default_factory=PathSection)

    # ---- flattening -------------------------------------------------------

    def items(self) -> list[tuple[str, Any]]:
        out: list[tuple[str, Any]] = [("preset", self.preset)]
        for f in dataclasses.fields(self):
            if f.name == "preset":
                continue
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                out.append((f"{f.name}.{sf.name}", getattr(section, sf.name)))
        return out

    def set(self, key: str, raw: Any) -> None:
        if key == "preset":
            self.preset = str(raw)
            return
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None)
        if not dataclasses.is_dataclass(section) or name not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, name, _coerce(key, raw, getattr(section, name)))

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    # ---- derived configs --------------------------------------------------

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(
            self.model.arch,
            self.model.img_size,
            dataclasses.replace(self.backbone),
            dataclasses.replace(self.head),
        )
        return cfg.sync()

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
            batch_size=t.batch_size, epochs=t.epochs, seed=t.seed,
            worker_threads=t.threads, lambda_fs=self.loss.lambda_fs,
        )

    def validate(self) -> None:
        try:
            BackboneConfig(**dataclasses.asdict(self.backbone))
            HeadConfig(**dataclasses.asdict(self.head))
            LossConfig(**dataclasses.asdict(self.loss))
            self.train_config()
            self.split.validate()
            ModelConfig(self.model.arch, self.model.img_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        m = 32 if self.model.arch == "convnext" else 8
        if self.model.img_size < m or self.model.img_size % m:
            raise ConfigError(f"model.img_size must be a positive multiple of {m}, got {self.model.img_size}")


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: Any, current: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if isinstance(current, bool):
            if s.lower() in ("true", "1", "yes", "on"):
                return True
            if s.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(current, int):
            return int(s)
        if isinstance(current, float):
            return float(s)
        if isinstance(current, list):
            return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return s


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def resolve(
    file_values: dict[str, str] | None = None,
    flags: dict[str, Any] | None = None,
    preset: str | None = None,
    protocol: str | None = None,
    full_size: bool = False,
) -> RunConfig:
    """Merge defaults, preset, file and flag values into a validated RunConfig."""
    file_values = dict(file_values or {})
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    cfg = RunConfig()
    name = preset or file_values.get("preset") or cfg.preset
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    cfg.preset = name
    layers: list[dict[str, Any]] = [PRESETS[name]]
    if protocol is not None:
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
        layers.append(PROTOCOLS[protocol])
    if full_size:
        layers.append({"backbone.stage_depths": list(TINY_DEPTHS), "backbone.stage_widths": list(TINY_WIDTHS),
                       "model.img_size": 224})
    file_values.pop("preset", None)
    layers += [file_values, flags]
    for layer in layers:
        for k, v in layer.items():
            cfg.set(k, v)
    cfg.validate()
    return cfg


def config_from_text(text: str) -> RunConfig:
    """Rebuild a RunConfig from ``to_text`` output (e.g. checkpoint metadata)."""
    values = parse_config_text(text)
    cfg = RunConfig()
    for k, v in values.items():
        if k.startswith("meta."):
            continue
        cfg.set(k, v)
    cfg.validate()
    return cfg
