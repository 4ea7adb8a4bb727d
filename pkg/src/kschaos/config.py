"""Flat TOML experiment configuration with a typed schema.

Every key is top level.  Unknown keys are errors so a typo in a sweep
definition cannot silently fall back to a default.  Coupling strengths may be
written as plain numbers or as multiples of pi (``"4pi"``, ``"4*pi"``).
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import sys
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .densities import InitialDensitySpec

CRITICAL_CHI = 8.0 * math.pi


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    n_values: tuple = (1024,)
    chi_values: tuple = (4.0 * math.pi,)
    alpha_values: tuple = (0.25,)
    T: float = 0.5
    replicas: int = 50
    density: str = "gaussian"
    sigma: float = 1.0
    disc_radius: float = 1.0
    L: float = 20.0
    n_g: int = 256
    h: float = 0.0  # 0 selects min(1e-3, 0.1 / nu^2) per cell
    report_every: int = 10
    w1: bool = True
    w1_samples: int = 0  # 0 selects min(N, 2048)
    w1_repeats: int = 1
    loln: bool = True
    j_process: bool = False
    j_points: int = 16
    exceptional_c: float = 1.0
    seed: int = 0
    threads: int = 1
    out: str = "runs"

    def __post_init__(self):
        for name in ("n_values", "chi_values", "alpha_values"):
            vals = getattr(self, name)
            if isinstance(vals, (int, float, str)):
                vals = (vals,)
            object.__setattr__(self, name, tuple(vals))
            if not vals:
                raise ConfigError(f"{name} must be non-empty")
        object.__setattr__(self, "chi_values", tuple(parse_chi(c) for c in self.chi_values))
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "alpha_values", tuple(float(a) for a in self.alpha_values))
        if any(n < 1 for n in self.n_values):
            raise ConfigError("particle counts must be positive")
        if any(c < 0 for c in self.chi_values):
            raise ConfigError("chi must be non-negative")
        if any(c >= CRITICAL_CHI for c in self.chi_values):
            warnings.warn("chi >= 8 pi is supercritical: expect concentration up to the cutoff scale", stacklevel=3)
        if any(not 0 < a < 0.5 for a in self.alpha_values):
            raise ConfigError("alpha must lie in (0, 1/2)")
        if self.T < 0:
            raise ConfigError("T must be non-negative")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.density not in ("gaussian", "disc"):
            raise ConfigError(f"density must be 'gaussian' or 'disc', got {self.density!r}")
        if self.sigma <= 0 or self.disc_radius <= 0:
            raise ConfigError("sigma and disc_radius must be positive")
        if self.L <= 0 or self.n_g < 8:
            raise ConfigError("need L > 0 and n_g >= 8")
        if self.h < 0:
            raise ConfigError("h must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.w1_samples < 0 or self.w1_repeats < 1 or self.report_every < 1:
            raise ConfigError("w1_samples >= 0, w1_repeats >= 1 and report_every >= 1 required")
        if not 2 <= self.j_points <= 32:
            raise ConfigError("j_points must lie in [2, 32]")

    # ------------------------------------------------------------------
    def initial_density(self) -> InitialDensitySpec:
        if self.density == "disc":
            return InitialDensitySpec.disc(self.disc_radius)
        return InitialDensitySpec.gaussian(self.sigma)

    def cells(self):
        """``(index, N, chi, alpha)`` in a fixed order."""
        k = 0
        for n in self.n_values:
            for chi in self.chi_values:
                for a in self.alpha_values:
                    yield k, n, chi, a
                    k += 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("n_values", "chi_values", "alpha_values"):
            d[key] = list(d[key])
        return d

    def science_dict(self) -> dict:
        """Everything that can change results (thread count and output path cannot)."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("out")
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.science_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig(**d)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

_PI_RE = re.compile(r"^\s*([0-9.eE+-]*)\s*\*?\s*pi\s*$")


def parse_chi(value) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"chi must be numeric, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _PI_RE.match(str(value))
    if not m:
        raise ConfigError(f"cannot parse chi value {value!r}; use a number or e.g. '4pi'")
    coef = m.group(1)
    return (float(coef) if coef else 1.0) * math.pi


def _check_type(key, value):
    kind = _TYPES[key]
    if kind == "tuple":
        if not isinstance(value, (list, int, float, str)):
            raise ConfigError(f"{key} must be a list")
        return value
    want = {"int": int, "float": (int, float), "bool": bool, "str": str}[kind]
    if isinstance(value, bool) and kind != "bool":
        raise ConfigError(f"{key} must be {kind}, got a boolean")
    if not isinstance(value, want):
        raise ConfigError(f"{key} must be {kind}, got {type(value).__name__}")
    return float(value) if kind == "float" else value


def from_mapping(data: dict) -> ExperimentConfig:
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables: {', '.join(nested)}")
    unknown = sorted(set(data) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = {k: _check_type(k, v) for k, v in data.items()}
    try:
        return ExperimentConfig(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def defaults_toml() -> str:
    d = ExperimentConfig().to_dict()
    d["chi_values"] = ["4pi"]
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in d.items())
