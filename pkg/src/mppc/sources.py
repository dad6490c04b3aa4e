"""Photon-number statistics of the light sources used with the detector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from .model import ProbDist

__all__ = [
    "Coherent",
    "TwoModeSqueezed",
    "Fock",
    "SourceModel",
    "photon_distribution",
    "mean_to_r",
    "r_to_mean",
    "spdc_weights",
    "parse_source",
]


def _check_nonneg(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be finite and non-negative, got {value}")
    return value


@dataclass(frozen=True)
class Coherent:
    mean: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _check_nonneg("mean", self.mean))

    def spec(self) -> str:
        return f"coherent:{self.mean!r}"


@dataclass(frozen=True)
class TwoModeSqueezed:
    """Two-mode squeezed vacuum; both modes carry the same photon number."""

    r: float

    def __post_init__(self):
        object.__setattr__(self, "r", _check_nonneg("r", self.r))

    @property
    def mean(self) -> float:
        return r_to_mean(self.r)

    @classmethod
    def from_mean(cls, mean: float) -> "TwoModeSqueezed":
        return cls(mean_to_r(mean))

    def spec(self) -> str:
        return f"spdc-r:{self.r!r}"


@dataclass(frozen=True)
class Fock:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 0:
            raise ValueError(f"Fock photon number must be a non-negative integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def mean(self) -> float:
        return float(self.n)

    def spec(self) -> str:
        return f"fock:{self.n}"


SourceModel = Coherent | TwoModeSqueezed | Fock


def mean_to_r(mean: float) -> float:
    """Squeeze parameter giving per-mode mean photon number ``sinh(r)**2``."""
    mean = _check_nonneg("mean", mean)
    return math.asinh(math.sqrt(mean))


def r_to_mean(r: float) -> float:
    return math.sinh(_check_nonneg("r", r)) ** 2


def spdc_weights(r: float, n_max: int) -> np.ndarray:
    """``|C_n|^2 = tanh(r)^(2n) / cosh(r)^2`` for ``n = 0..n_max``.

    Phases drop out; the per-mode marginal is thermal with ratio
    ``mean / (1 + mean)``.
    """
    r = _check_nonneg("r", r)
    n = np.arange(n_max + 1)
    t2 = math.tanh(r) ** 2
    return np.power(t2, n) / math.cosh(r) ** 2


def photon_distribution(source: SourceModel, n_max: int) -> ProbDist:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    n = np.arange(n_max + 1)
    if isinstance(source, Coherent):
        values = poisson.pmf(n, source.mean) if source.mean > 0 else (n == 0).astype(float)
    elif isinstance(source, TwoModeSqueezed):
        values = spdc_weights(source.r, n_max)
    elif isinstance(source, Fock):
        if source.n > n_max:
            raise ValueError(f"Fock state |{source.n}> exceeds truncation n_max={n_max}")
        values = (n == source.n).astype(float)
    else:
        raise TypeError(f"unsupported source {source!r}")
    return ProbDist(values)


def parse_source(text: str) -> SourceModel:
    """Parse ``coherent:1.66``, ``spdc-mean:0.5``, ``spdc-r:0.88`` or ``fock:3``."""
    kind, sep, arg = text.strip().partition(":")
    if not sep or not arg:
        raise ValueError(f"malformed source spec {text!r}; expected kind:value")
    kind = kind.lower()
    try:
        if kind == "coherent":
            return Coherent(float(arg))
        if kind == "spdc-mean":
            return TwoModeSqueezed.from_mean(float(arg))
        if kind == "spdc-r":
            return TwoModeSqueezed(float(arg))
        if kind == "fock":
            value = float(arg)
            if not value.is_integer():
                raise ValueError(f"Fock photon number must be an integer, got {arg}")
            return Fock(int(value))
    except ValueError as exc:
        raise ValueError(f"bad source spec {text!r}: {exc}") from None
    raise ValueError(f"unknown source kind {kind!r} in {text!r}")
