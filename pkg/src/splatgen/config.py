"""Run configuration files: strict TOML loading and round-trip dumping.

Layout::

    profile = "desk"            # or "full"; picks the base defaults
    [train]    ...TrainConfig fields
    [guidance] ...GuidanceConfig fields
    [densify]  ...DensifyConfig fields
    [provider] kind = "analytic" | "remote", endpoint, timeout, ...
    [body]     model = "toy" | path to a converted body model
    [output]   dir = "runs/default"

Unknown sections or keys are errors; every problem is reported at once.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .density import DensifyConfig
from .errors import ConfigError
from .guidance import GuidanceConfig
from .optim import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROFILES = ("full", "desk")
PROVIDER_KINDS = ("analytic", "remote")


@dataclass
class ProviderConfig:
    kind: str = "analytic"
    endpoint: str = "http://127.0.0.1:8765"
    timeout: float = 60.0
    views: int = 16
    heldout_views: int = 4
    reference_seed: int = 1234
    reference_count: int = 4000

    def validate(self):
        problems = []
        if self.kind not in PROVIDER_KINDS:
            problems.append(f"provider.kind: must be one of {PROVIDER_KINDS}")
        if self.kind == "remote" and not self.endpoint.startswith(("http://", "https://")):
            problems.append("provider.endpoint: must be an http(s) URL")
        if not self.timeout > 0:
            problems.append("provider.timeout: must be positive")
        for name in ("views", "heldout_views", "reference_count"):
            if getattr(self, name) < 1:
                problems.append(f"provider.{name}: must be >= 1")
        return problems


@dataclass
class BodyConfig:
    model: str = "toy"


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    profile: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    body: BodyConfig = field(default_factory=BodyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        problems = []
        if self.profile not in PROFILES:
            problems.append(f"profile: must be one of {PROFILES}")
        return problems + self.train.validate() + self.provider.validate()

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        guidance = train.pop("guidance")
        densify = train.pop("densify")
        return {"profile": self.profile, "train": _plain(train), "guidance": guidance,
                "densify": densify, "provider": dataclasses.asdict(self.provider),
                "body": dataclasses.asdict(self.body),
                "output": dataclasses.asdict(self.output)}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(value, default, key, problems):
    """Check ``value`` against the type of ``default``; returns the coerced value."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if (isinstance(value, list) and len(value) == len(default)
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            return tuple(float(v) for v in value)
        problems.append(f"{key}: expected a list of {len(default)} numbers")
        return default
    problems.append(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return default


def _fill(obj, section: str, table, problems, skip=()):
    if not isinstance(table, dict):
        problems.append(f"{section}: expected a table")
        return obj
    names = {f.name for f in dataclasses.fields(obj)} - set(skip)
    updates = {}
    for key, value in table.items():
        if key not in names:
            problems.append(f"{section}.{key}: unknown key")
            continue
        updates[key] = _coerce(value, getattr(obj, key), f"{section}.{key}", problems)
    return dataclasses.replace(obj, **updates)


def from_dict(data: dict) -> RunConfig:
    problems = []
    profile = data.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError([f"profile: must be one of {PROFILES}"])
    train = TrainConfig.desk() if profile == "desk" else TrainConfig()
    sections = {"train", "guidance", "densify", "provider", "body", "output"}
    for key in data:
        if key != "profile" and key not in sections:
            problems.append(f"{key}: unknown section")
    train = _fill(train, "train", data.get("train", {}), problems, skip=("guidance", "densify"))
    guidance = _fill(train.guidance, "guidance", data.get("guidance", {}), problems)
    densify = _fill(train.densify, "densify", data.get("densify", {}), problems)
    train = dataclasses.replace(train, guidance=guidance, densify=densify)
    cfg = RunConfig(profile, train,
                    _fill(ProviderConfig(), "provider", data.get("provider", {}), problems),
                    _fill(BodyConfig(), "body", data.get("body", {}), problems),
                    _fill(OutputConfig(), "output", data.get("output", {}), problems))
    # keys that failed coercion kept their defaults, so validation adds no duplicates
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    return from_dict(data)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
