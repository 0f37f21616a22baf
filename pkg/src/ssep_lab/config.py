"""Experiment configuration: schema, file loading and object builders."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .lattice import Kernel, build_kernel, nearest_neighbor_kernel

COMMANDS = ("solve", "simulate", "bound", "vfunctions", "two-time", "bg", "lsi")


class ConfigError(ValueError):
    """Raised with human-readable field or line diagnostics."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelSpec(_Strict):
    """Either the nearest-neighbour kernel in dimension d or an explicit jump list."""

    kind: Literal["nearest", "custom"] = "nearest"
    d: int = Field(1, ge=1, le=3)
    jumps: Optional[list[tuple[list[int], Union[str, float]]]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "custom" and not self.jumps:
            raise ValueError("custom kernel needs a non-empty 'jumps' list")
        return self

    def build(self) -> Kernel:
        if self.kind == "nearest":
            return nearest_neighbor_kernel(self.d)
        return build_kernel([(v, w) for v, w in self.jumps])


class ProfileSpec(_Strict):
    """Initial profile ρ0 on macroscopic coordinates.

    ``cosine``: mean + amp·cos(2πu/period); a missing period means one torus length.
    ``table``: linear interpolation of (u, value) samples, periodic in the table span.
    """

    kind: Literal["constant", "cosine", "table"] = "cosine"
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    mean: float = 0.5
    amp: float = 0.25
    period: Optional[float] = Field(None, gt=0.0)
    u: Optional[list[float]] = None
    values: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "cosine" and not (0 <= self.mean - abs(self.amp) and self.mean + abs(self.amp) <= 1):
            raise ValueError("cosine profile leaves [0, 1]")
        if self.kind == "table":
            if not self.u or not self.values or len(self.u) != len(self.values):
                raise ValueError("table profile needs equal-length 'u' and 'values'")
            if min(self.values) < 0 or max(self.values) > 1:
                raise ValueError("table profile leaves [0, 1]")
        return self

    def build(self, N: int, side: int) -> Callable:
        if self.kind == "constant":
            a = self.alpha
            return lambda u: np.full(np.shape(u), a)
        if self.kind == "cosine":
            per = self.period if self.period is not None else side / N
            mean, amp = self.mean, self.amp
            return lambda u: mean + amp * np.cos(2 * np.pi * np.asarray(u, float) / per)
        u0, v0 = np.array(self.u), np.array(self.values)
        span = u0[-1] - u0[0]
        return lambda u: np.interp((np.asarray(u, float) - u0[0]) % span + u0[0], u0, v0)


class CylinderSpec(_Strict):
    support: list[int]
    table: list[float]


class TestFunctionSpec(_Strict):
    """H(u); ``gaussian`` uses exp(−u²/(2 width²)), ``bump`` is (1 − (u/width)²)² on |u| < width."""

    kind: Literal["gaussian", "bump"] = "gaussian"
    width: float = Field(0.125, gt=0.0)


class ExperimentConfig(_Strict):
    command: Literal["solve", "simulate", "bound", "vfunctions", "two-time", "bg", "lsi"]
    kernel: KernelSpec = KernelSpec()
    profile: ProfileSpec = ProfileSpec()
    output: str = "out"
    seed: int = Field(0, ge=0)
    # state spaces and forward solves
    n: int = Field(1, ge=1)
    labeled: bool = False
    L: Optional[int] = Field(None, ge=1)
    z: Optional[list[list[int]]] = None
    T: float = Field(1.0, gt=0.0)
    times: Optional[list[float]] = None
    binary: bool = False
    replicas: int = Field(0, ge=0)
    max_events: int = Field(10_000_000, ge=1)
    # bounds
    phi_table: Optional[str] = None
    a0: float = Field(1.0, gt=0.0)
    gamma: float = Field(2.0, gt=0.0)
    # correlations
    Ns: list[int] = [32, 64]
    torus_factor: float = Field(2.0, gt=0.0)
    convention: Literal["ordered", "bond"] = "ordered"
    max_card: int = Field(2, ge=2, le=4)
    rtol: float = Field(1e-7, gt=0.0)
    A: list[int] = [0, 1]
    B_sets: Optional[list[list[int]]] = None
    s: float = Field(0.02, ge=0.0)
    r_values: Optional[list[float]] = None
    # Boltzmann-Gibbs
    cylinder: Optional[CylinderSpec] = None
    H: TestFunctionSpec = TestFunctionSpec()
    # log-Sobolev audit
    ell_values: list[int] = [3, 4, 5, 6]
    m: int = Field(1, ge=1)
    iterations: int = Field(2000, ge=1)
    random_starts: int = Field(64, ge=1)
    path_pairs: int = Field(50, ge=0)

    @field_validator("Ns", "ell_values")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("must be a non-empty list of positive integers")
        return v

    @field_validator("times", "r_values")
    @classmethod
    def _increasing(cls, v):
        if v is not None and (min(v) < 0 or any(b <= a for a, b in zip(v, v[1:]))):
            raise ValueError("must be non-negative and strictly increasing")
        return v

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())

    def torus_L(self, N: int) -> int:
        return self.L if self.L is not None else max(2, int(round(self.torus_factor * N)))


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"field '{loc}': {e['msg']}")
    return "\n".join(lines)


def parse_mapping(obj: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(obj)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def read_tree(path) -> dict:
    """Load a TOML (by extension) or JSON file into a dict, with line diagnostics."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            return tomli.loads(text)
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from None


def load_config(path) -> ExperimentConfig:
    return parse_mapping(read_tree(path))


def merge(base: dict, overrides: dict[str, Any]) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    return out
