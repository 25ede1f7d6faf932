"""Flat ``section.key`` run configuration backed by INI files."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .foundation import ClassVocabulary
from .training import TrainConfig
from .transfer import ModelConfig


class ConfigError(ValueError):
    """Bad key or value; the CLI maps this to exit code 2."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    manifest: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    precision: str = "float32"

    # model.* keys that are owned by nested sections
    _NESTED = {"fusion", "decoder"}

    def sections(self) -> Dict[str, object]:
        return {
            "model": self.model,
            "fusion": self.model.fusion,
            "decoder": self.model.decoder,
            "train": self.train,
            "data": self.data,
        }

    def flat(self) -> Dict[str, object]:
        out = {}
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                if sec == "model" and f.name in self._NESTED:
                    continue
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        out["run.precision"] = self.precision
        return out

    def set(self, key: str, raw: str) -> None:
        if key == "run.precision":
            if raw not in ("float32", "float64"):
                raise ConfigError(key, "expected float32 or float64")
            self.precision = raw
            return
        sec, _, name = key.partition(".")
        obj = self.sections().get(sec)
        names = {f.name for f in dataclasses.fields(obj)} if obj is not None else set()
        if obj is None or name not in names or (sec == "model" and name in self._NESTED):
            raise ConfigError(key, "unknown configuration key")
        setattr(obj, name, _parse(key, raw, getattr(obj, name)))

    def finalize(self) -> "RunConfig":
        """Cross-field consistency; call after all overrides."""
        try:
            ClassVocabulary(["probe"], self.model.templates)
        except ValueError as e:
            raise ConfigError("model.templates", str(e)) from None
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigError("train", str(e)) from None
        try:
            self.model.fusion.validate()
        except ValueError as e:
            raise ConfigError("fusion", str(e)) from None
        if self.model.strategy not in ("mean", "cat", "separate"):
            raise ConfigError("model.strategy", f"unknown fusion strategy {self.model.strategy!r}")
        return self

    def render(self) -> str:
        lines = []
        current = None
        for key, value in self.flat().items():
            sec, name = key.split(".", 1)
            if sec != current:
                lines.append(f"[{sec}]")
                current = sec
            lines.append(f"{name} = {_render(value)}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, (list, tuple)):
        return " | ".join(str(v) for v in value)
    return str(value)


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", "|").split("|"))
        if isinstance(default, list):
            parts = [p.strip() for p in raw.split("|")] if "|" in raw else [p.strip() for p in raw.split(",")]
            parts = [p for p in parts if p]
            if default and isinstance(default[0], int):
                return [int(p) for p in parts]
            return parts
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None, seed: Optional[int] = None) -> RunConfig:
    """Defaults <- INI file <- ``key=value`` overrides <- RSKT_SEED <- explicit seed."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        if not parser.read(path):
            raise ConfigError("config", f"cannot read {path}")
        for sec in parser.sections():
            for name, value in parser.items(sec):
                cfg.set(f"{sec}.{name}", value)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        cfg.set(key.strip(), value)
    env_seed = os.environ.get("RSKT_SEED")
    if env_seed is not None:
        cfg.set("train.seed", env_seed)
    if seed is not None:
        cfg.train.seed = seed
    return cfg.finalize()
