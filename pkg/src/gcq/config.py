"""Run configuration: nested dataclasses, flat ``dotted.key = value`` files, digests.

Config file grammar, one assignment per line::

    # comment
    preset = "desk"
    road.corridor_length = 500
    road.ramp_positions = [200, 400]
    ablation.no_fusion = true

Values are JSON literals; anything that does not parse as JSON is taken as a
bare string. Unknown keys are rejected. A ``preset`` line is applied before
every other key regardless of where it appears.

Environment overrides use the ``GCQ_`` prefix with ``__`` standing for the
dot: ``GCQ_SCHEDULE__TOTAL_STEPS=20000`` sets ``schedule.total_steps``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .reward import RewardWeights
from .sim import Flows, IdmParams, Kind, RoadSpec

ENV_PREFIX = "GCQ_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    warmup_steps: int = 5_000
    total_steps: int = 50_000
    batch_size: int = 32
    epsilon: float = 0.3
    gamma: float = 0.99
    lr: float = 1e-3
    tau: float = 1e-2
    train_every: int = 1
    episode_horizon: int = 600
    replay_capacity: int = 100_000
    checkpoint_every: int = 10_000

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("schedule needs 0 <= warmup_steps < total_steps")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("schedule.gamma must lie in (0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("schedule.epsilon must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("schedule.tau must lie in [0, 1]")
        for name in ("batch_size", "train_every", "episode_horizon", "replay_capacity", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"schedule.{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("schedule.lr must be positive")


@dataclass(frozen=True)
class KindIdm:
    cav: IdmParams = IdmParams()
    hdv: IdmParams = IdmParams()

    def as_mapping(self) -> dict[Kind, IdmParams]:
        return {Kind.CAV: self.cav, Kind.HDV: self.hdv}


@dataclass(frozen=True)
class Ablation:
    no_fusion: bool = False
    double_q: bool = False
    # 0 keeps soft updates every train step; K > 0 copies the online net every K steps instead
    hard_target_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    dt: float = 0.5
    sensing_range: float = 30.0
    n_max: int = 40
    vehicle_length: float = 5.0
    hysteresis: float = 0.2
    mandatory_distance: float = 100.0
    road: RoadSpec = RoadSpec()
    flows: Flows = Flows()
    idm: KindIdm = KindIdm()
    reward: RewardWeights = RewardWeights()
    schedule: TrainSchedule = TrainSchedule()
    ablation: Ablation = Ablation()

    def __post_init__(self):
        if self.dt <= 0 or self.sensing_range < 0 or self.n_max < 1 or self.vehicle_length <= 0:
            raise ConfigError("dt, vehicle_length must be positive; sensing_range >= 0; n_max >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    def to_flat(self) -> dict[str, Any]:
        return _flatten(dataclasses.asdict(self))

    def digest(self) -> str:
        return _digest(self.to_flat())

    def structural_digest(self) -> str:
        """Digest of everything that shapes the scenario and observations (flows, schedule excluded)."""
        return _digest({k: v for k, v in self.to_flat().items() if _is_structural(k)})

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return from_flat({**self.to_flat(), **overrides})

    def dump(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self.to_flat().items()))


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {"schedule.warmup_steps": 5_000, "schedule.total_steps": 50_000},
    "paper": {"schedule.warmup_steps": 200_000, "schedule.total_steps": 800_000},
}

_NON_STRUCTURAL_PREFIXES = ("flows.", "schedule.")
_NON_STRUCTURAL_KEYS = {"seed", "preset", "ablation.double_q", "ablation.hard_target_every",
                        "mandatory_distance"}


def _is_structural(key: str) -> bool:
    return not key.startswith(_NON_STRUCTURAL_PREFIXES) and key not in _NON_STRUCTURAL_KEYS


def _digest(flat: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()


def _flatten(d: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, name + "."))
        elif isinstance(value, tuple):
            out[name] = list(value)
        else:
            out[name] = value
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value)
        if default is None:
            return None if value is None else float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _build(cls, flat: dict[str, Any], prefix: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        name = f"{prefix}{f.name}"
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), flat, name + ".")
        elif name in flat:
            kwargs[f.name] = _coerce(name, flat.pop(name), default)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def from_flat(flat: Mapping[str, Any]) -> RunConfig:
    flat = dict(flat)
    preset = flat.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = {**PRESETS[preset], **flat}
    config = _build(RunConfig, merged, "")
    if merged:
        raise ConfigError(f"unknown config keys: {sorted(merged)}")
    return config


def preset_config(name: str = "desk", overrides: Mapping[str, Any] | None = None) -> RunConfig:
    return from_flat({"preset": name, **(overrides or {})})


def parse_config_text(text: str) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if " #" in value and not value.startswith('"'):
            value = value.split(" #", 1)[0].strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value
    return flat


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX:
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None,
                **overrides: Any) -> RunConfig:
    """File keys, then ``GCQ_`` environment variables, then keyword overrides (dots as ``__``)."""
    flat = parse_config_text(Path(path).read_text()) if path is not None else {}
    flat.update(env_overrides(environ))
    flat.update({k.replace("__", "."): v for k, v in overrides.items()})
    return from_flat(flat)


def default_config_text() -> str:
    return RunConfig().dump()

