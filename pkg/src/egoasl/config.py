"""Flat key=value run configuration shared by the CLI commands."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .features import FEATURE_KINDS


@dataclass(frozen=True)
class RunConfig:
    feature: str = "cor"
    use_box_mask: bool = False
    channels: int = 4
    fov_h_deg: float = 80.0
    fov_v_deg: float = 45.0
    work_w: int = 320
    work_h: int = 180
    epochs: int = 5
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    nms_radius: int = 5
    nms_threshold: float = 0.0

    def __post_init__(self):
        if self.feature not in FEATURE_KINDS:
            raise ConfigError(f"feature must be one of {FEATURE_KINDS}, got {self.feature!r}")
        if self.channels < 2:
            raise ConfigError("channels must be >= 2")
        if self.epochs < 1 or self.batch < 1 or self.nms_radius < 1:
            raise ConfigError("epochs, batch and nms_radius must be >= 1")
        if self.work_w < 4 or self.work_h < 4:
            raise ConfigError("working resolution too small")

    @staticmethod
    def keys():
        return [f.name for f in fields(RunConfig)]

    def with_values(self, values: dict):
        """Copy with string (or typed) overrides; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(self)}
        conv = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            conv[key] = _coerce(key, types[key], raw)
        return replace(self, **conv)

    def dumps(self):
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in self.keys())


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if typ in ("bool", bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ in ("int", int):
            return int(s)
        if typ in ("float", float):
            return float(s)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return s


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v
    return (base or RunConfig()).with_values(values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
