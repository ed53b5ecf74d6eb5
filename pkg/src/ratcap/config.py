"""Run configuration: one key=value file with [model] [train] [retrieval] [data] sections."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import ModelConfig
from .numerics import ConfigError
from .retrieval import RetrievalConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_manifest: str = "corpus/manifest_train.json"
    val_manifest: str = "corpus/manifest_val.json"
    test_manifest: str = "corpus/manifest_test.json"
    vocab_size: int = 2000  # BPE target; stops early when merges run out
    workdir: str = "runs"


# desk-scale model defaults; vocab_size and d_feat are filled in from the data
DESK_MODEL = dict(d=32, enc_layers=1, dec_layers=2, heads=4, mem_layers=1, k=10, max_len=20, ffn_mult=2, d_feat=32, vocab_size=512)
DESK_TRAIN = dict(warmup_steps=100, batch_size=8, xe_steps=1000, scst_steps=100, lr_scale=0.3, scst_lr=1e-4, scst_batch_size=4, val_every=100)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**DESK_MODEL))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "train", "retrieval", "data")

    def to_dict(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in self.SECTIONS}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "RunConfig":
        """Copy with ``changes`` applied to one section (re-validated)."""
        parts = {s: getattr(self, s) for s in self.SECTIONS}
        parts[section] = dataclasses.replace(parts[section], **changes)
        return RunConfig(**parts)

    def dumps(self) -> str:
        lines = []
        for s in self.SECTIONS:
            lines.append(f"[{s}]")
            for k, v in asdict(getattr(self, s)).items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(cls, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"unknown key {name!r} for [{cls.__name__}]")
    typ = hints[name]
    raw = raw.strip().strip('"').strip("'")
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typing.get_origin(typ) is tuple:
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name} ({getattr(typ, '__name__', typ)})") from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply ``section.key -> value`` overrides."""
    base = RunConfig()
    values: dict[str, dict[str, str]] = {s: {} for s in RunConfig.SECTIONS}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text())
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown section [{section}]")
            values[section].update(parser[section])
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in values or not key:
            raise ConfigError(f"override must look like section.key, got {dotted!r}")
        values[section][key] = str(raw)
    parts = {}
    for section in RunConfig.SECTIONS:
        current = getattr(base, section)
        cls = type(current)
        changes = {k: _coerce(cls, k, v) for k, v in values[section].items()}
        parts[section] = dataclasses.replace(current, **changes)
    return RunConfig(**parts)
