"""Pipeline configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

from .embed import EmbedParams
from .gbdt import TreeParams
from .mf import MfHyper

MODE_ALIASES = {"mf": "mf-only", "rnn": "rnn-only"}


@dataclass(frozen=True)
class RnnParams:
    hidden_dim: int = 100
    epochs: int = 50
    lr: float = 0.5
    max_len: int = 200
    batch_size: int = 32
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.max_len <= 200:
            raise ValueError("rnn max_len must lie in [1, 200]")
        if min(self.hidden_dim, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("rnn hidden_dim, epochs, batch_size and lr must be positive")


@dataclass
class PipelineConfig:
    input: str = ""
    workdir: str = "work"
    output: str = ""
    delimiter: str = ","
    ratio: float = 0.8
    split_seed: int = 0
    embed: EmbedParams = field(default_factory=EmbedParams)
    mf: MfHyper = field(default_factory=MfHyper)
    price_buckets: int = 10
    rerank: bool = True
    rnn: RnnParams = field(default_factory=RnnParams)
    tree: TreeParams = field(default_factory=TreeParams)
    mode: str = "stack"
    retrain_base: bool = True
    oof_folds: int = 5

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)

    @property
    def submission_path(self) -> str:
        return self.output or os.path.join(self.workdir, "submission.csv")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Derive every stage seed from one global seed."""
        return dataclasses.replace(
            self,
            split_seed=seed,
            embed=dataclasses.replace(self.embed, seed=seed + 1),
            mf=dataclasses.replace(self.mf, seed=seed + 2),
            rnn=dataclasses.replace(self.rnn, seed=seed + 3),
        )

    def validate(self, check_paths: bool = True):
        from .ensemble import MODES

        if not 0 < self.ratio < 1:
            raise ValueError(f"split ratio must lie in (0, 1), got {self.ratio}")
        if self.mode not in MODES:
            raise ValueError(f"unknown ensemble mode {self.mode!r}; expected one of {MODES}")
        if self.oof_folds < 2:
            raise ValueError("ensemble.oof_folds must be >= 2")
        if check_paths and self.input and not os.path.exists(self.input):
            raise FileNotFoundError(f"input log not found: {self.input}")


# config key -> (attribute, sub-field); sub-field None means a top-level attribute
_KEYS = {
    "paths.input": ("input", None),
    "paths.workdir": ("workdir", None),
    "paths.output": ("output", None),
    "io.delimiter": ("delimiter", None),
    "split.ratio": ("ratio", None),
    "split.seed": ("split_seed", None),
    "mf.price_buckets": ("price_buckets", None),
    "mf.rerank": ("rerank", None),
    "mf.components": ("mf", "n_components"),
    "mf.lr": ("mf", "learning_rate"),
    "ensemble.mode": ("mode", None),
    "ensemble.retrain_base": ("retrain_base", None),
    "ensemble.oof_folds": ("oof_folds", None),
}
_SECTIONS = {"embed": "embed", "mf": "mf", "rnn": "rnn", "tree": "tree"}


def _cast(value: str, like: Any):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def apply_settings(config: PipelineConfig, settings: dict[str, str]) -> PipelineConfig:
    updates: dict[str, Any] = {}
    subs: dict[str, dict[str, Any]] = {}
    for key, raw in settings.items():
        if key in _KEYS:
            attr, sub = _KEYS[key]
        else:
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise KeyError(f"unknown config key {key!r}")
            attr, sub = _SECTIONS[section], name
        if sub is None:
            updates[attr] = _cast(raw, getattr(config, attr))
        else:
            current = getattr(config, attr)
            if not hasattr(current, sub):
                raise KeyError(f"unknown config key {key!r}")
            subs.setdefault(attr, {})[sub] = _cast(raw, getattr(current, sub))
    for attr, kw in subs.items():
        updates[attr] = dataclasses.replace(getattr(config, attr), **kw)
    return dataclasses.replace(config, **updates)


def parse_config(text: str) -> dict[str, str]:
    settings = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        settings[key.strip()] = value.strip()
    return settings


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        return apply_settings(base or PipelineConfig(), parse_config(f.read()))


def dump_config(config: PipelineConfig) -> str:
    """Every key with its current value, in loadable form."""
    lines = []
    reverse = {v: k for k, v in _KEYS.items()}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sf in dataclasses.fields(value):
                key = reverse.get((f.name, sf.name), f"{f.name}.{sf.name}")
                lines.append(f"{key} = {getattr(value, sf.name)}")
        else:
            lines.append(f"{reverse[(f.name, None)]} = {value}")
    return "\n".join(lines) + "\n"
