"""Run configuration: one JSON file, every field overridable as --section.key=value."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from .encoder import EncoderConfig
from .qse import Seq2SeqConfig
from .ranker import HybridConfig
from .rl import RewardConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    workdir: str = "runs/desk"
    corpus: Optional[str] = None
    lexicon: Optional[str] = None


@dataclass
class CorpusConfig:
    synthetic: int = 500
    vocab_size: int = 10000
    max_code_len: int = 200
    max_desc_len: int = 60
    max_query_len: int = 30


SECTIONS = {
    "paths": PathsConfig,
    "corpus": CorpusConfig,
    "encoder": EncoderConfig,
    "qse": Seq2SeqConfig,
    "reward": RewardConfig,
    "hybrid": HybridConfig,
}

# Config sections each stage's artifacts depend on.
_DATA = ("seed", "paths.corpus", "corpus")
STAGE_SECTIONS = {
    "prepare": _DATA,
    "train-cs": _DATA + ("encoder",),
    "train-qse": _DATA + ("qse",),
    "train-rl": _DATA + ("encoder", "qse", "reward"),
    "build-index": _DATA + ("encoder",),
    "build-pools": _DATA,
}


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    qse: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)

    def __post_init__(self):
        # the global seed drives every module
        self.encoder.seed = self.qse.seed = self.reward.seed = self.seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {"seed": int(data.get("seed", 0))}
        for name, klass in SECTIONS.items():
            section = data.get(name) or {}
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                kwargs[name] = klass(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(apply_overrides(data, overrides))

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def stage_hash(self, stage: str) -> str:
        data = self.to_dict()
        picked = {}
        for key in STAGE_SECTIONS[stage]:
            node = data
            for part in key.split("."):
                node = node[part]
            picked[key] = node
        blob = json.dumps(picked, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def full_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.path=value`` overrides (leading dashes optional)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        item = item.lstrip("-")
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.replace("-", "_").split(".")
        node = data
        for part in parts[:-1]:
            if part not in SECTIONS:
                raise ConfigError(f"unknown config section {part!r}")
            node = node.setdefault(part, {})
        if len(parts) == 1 and parts[0] != "seed":
            raise ConfigError(f"unknown top-level key {parts[0]!r}")
        node[parts[-1]] = _parse_value(value)
    return data
