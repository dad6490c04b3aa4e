"""Heralded Fock-state preparation fidelity from a two-mode squeezed source.

Conditioning on ``k`` clicks in one mode of a two-mode squeezed vacuum, the
probability that the partner mode holds exactly ``k`` photons is::

    Q(k|k) = theta_k^(k) |C_k|^2 / sum_i theta_i^(k) |C_i|^2

where ``theta_i^(k)`` is the herald detector's POVM. The sum is truncated at
the POVM's ``n_max``; the neglected tail is bounded by the thermal tail
``(mean / (1 + mean))^(n_max + 1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import Povm
from .sources import mean_to_r, r_to_mean, spdc_weights

__all__ = [
    "ReferenceKind",
    "FidelityCurve",
    "reference_povm",
    "ideal_povm",
    "fidelity_q",
    "fidelity_sweep",
    "tail_bound",
]


class ReferenceKind(str, enum.Enum):
    SINGLE_APD = "single-apd"
    TWO_APD_BEAMSPLITTER = "two-apd"


@dataclass(frozen=True)
class FidelityCurve:
    means: tuple
    fidelities: tuple
    k: int
    detector_label: str

    def __post_init__(self):
        if len(self.means) != len(self.fidelities):
            raise ValueError("means and fidelities differ in length")
        if any(b <= a for a, b in zip(self.means, self.means[1:])):
            raise ValueError("means must be strictly increasing")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.means, self.fidelities))

    def to_dict(self) -> dict:
        return {
            "detector": self.detector_label,
            "k": self.k,
            "points": [[m, q] for m, q in self.points],
        }


def reference_povm(kind: ReferenceKind | str, eta: float, n_max: int) -> Povm:
    """Non-resolving reference heralds, with no dark counts.

    A single on/off APD has outcomes {0, 1}. Two APDs behind a 50/50 splitter
    count 0, 1 or 2 firing detectors; each photon is detected with
    probability ``eta`` and routed to either side with equal odds.
    """
    kind = ReferenceKind(kind)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    i = np.arange(n_max + 1)
    none = np.power(1.0 - eta, i)
    if kind is ReferenceKind.SINGLE_APD:
        theta = np.column_stack([none, 1.0 - none])
    else:
        # P(one given side silent) = (1 - eta/2)^i
        one_silent = np.power(1.0 - eta / 2.0, i)
        both = 1.0 - 2.0 * one_silent + none
        theta = np.column_stack([none, 1.0 - none - both, both])
    theta = np.clip(theta, 0.0, None)
    return Povm(theta, normalized=True, label=kind.value, params={"eta": eta, "kind": kind.value})


def ideal_povm(n_max: int) -> Povm:
    return Povm(np.eye(n_max + 1), normalized=True, label="ideal")


def fidelity_q(povm: Povm, r: float, k: int) -> float:
    if not 0 <= k < povm.n_outcomes:
        raise ValueError(f"outcome k={k} not available (POVM has {povm.n_outcomes} outcomes)")
    if k > povm.n_max:
        raise ValueError(f"k={k} exceeds truncation n_max={povm.n_max}")
    weights = spdc_weights(r, povm.n_max)
    herald = povm.theta[:, k] * weights
    denom = herald.sum()
    if denom <= 0.0:
        raise ZeroDivisionError(f"herald outcome {k} has zero probability at r={r}")
    return float(herald[k] / denom)


def _grid(lo: float, hi: float, points: int, scale: str) -> np.ndarray:
    if not 0.0 < lo < hi:
        raise ValueError("need 0 < mean_min < mean_max")
    if points < 2:
        raise ValueError("need at least two grid points")
    if scale == "log":
        return np.geomspace(lo, hi, points)
    if scale == "linear":
        return np.linspace(lo, hi, points)
    raise ValueError(f"scale must be 'log' or 'linear', got {scale!r}")


def fidelity_sweep(detectors, k: int, mean_min: float, mean_max: float, points: int,
                   scale: str = "log") -> list[FidelityCurve]:
    """``Q(k|k)`` over a grid of per-mode means, one curve per detector.

    ``detectors`` is a sequence of :class:`Povm` (labelled by ``povm.label``)
    or ``(label, povm)`` pairs.
    """
    grid = _grid(mean_min, mean_max, points, scale)
    curves = []
    for det in detectors:
        label, povm = det if isinstance(det, tuple) else (det.label, det)
        values = []
        for mean in grid:
            try:
                values.append(fidelity_q(povm, mean_to_r(mean), k))
            except ZeroDivisionError:
                values.append(math.nan)
        curves.append(FidelityCurve(tuple(grid.tolist()), tuple(values), k, label))
    return curves


def tail_bound(r: float, n_max: int) -> float:
    """Thermal mass beyond ``n_max``, an upper bound on the truncated weight."""
    mean = r_to_mean(r)
    return (mean / (1.0 + mean)) ** (n_max + 1)
