"""Experiment configuration: schema validation and typed access."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .brownian import TimeGrid
from .fields import Domain, NormSpec
from .io import config_hash


class ConfigError(ValueError):
    """Configuration rejected before any computation."""


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files("kinflow").joinpath("config_schema.json").read_text())


@dataclass(frozen=True)
class EnsembleSpec:
    seed: int
    samples: int
    modes: int
    steps: int
    t0: float
    t1: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ConfigError("ensemble horizon must satisfy t1 > t0")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.t0, self.t1, self.steps)

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps


def _exp(x) -> float:
    return math.inf if x == "inf" else float(x)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    ensemble: EnsembleSpec
    dimension: Optional[int] = None
    domain: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    output: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        validate(data)
        e = data["ensemble"]
        ens = EnsembleSpec(int(e["seed"]), int(e["samples"]), int(e["modes"]), int(e["steps"]),
                           float(e["t0"]), float(e["t1"]))
        return cls(data["scenario"], ens, data.get("dimension"), dict(data.get("domain", {})),
                   dict(data.get("noise", {})), dict(data.get("kernel", {})),
                   dict(data.get("norms", {})), dict(data.get("solver", {})),
                   dict(data.get("params", {})), data.get("output"), copy.deepcopy(data))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, seed: Optional[int] = None, output: Optional[str] = None) -> "ExperimentConfig":
        data = copy.deepcopy(self.raw)
        if seed is not None:
            data["ensemble"]["seed"] = int(seed)
        if output is not None:
            data["output"] = str(output)
        return ExperimentConfig.from_dict(data)

    @property
    def hash(self) -> str:
        # the output location does not change results
        data = {k: v for k, v in self.raw.items() if k != "output"}
        return config_hash(data)

    def d(self, default: int) -> int:
        return int(self.dimension if self.dimension is not None else default)

    def make_domain(self, d: int, **defaults) -> Domain:
        p = {**defaults, **self.domain}
        return Domain(d, float(p["L"]), int(p["n_x"]), float(p["v_max"]), int(p["n_v"]),
                      p.get("support"))

    def norm_spec(self, default: tuple) -> NormSpec:
        q, r, p, a = default
        n = self.norms
        return NormSpec(_exp(n.get("q", q)), _exp(n.get("r", r)), _exp(n.get("p", p)),
                        _exp(n.get("a", a)))


def validate(data: dict) -> None:
    """Schema check; raises ConfigError with the offending path."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    v = jsonschema.Draft202012Validator(schema())
    errors = sorted(v.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}")
    e = data["ensemble"]
    if not float(e["t1"]) > float(e["t0"]):
        raise ConfigError("ensemble: horizon t1 must exceed t0")
