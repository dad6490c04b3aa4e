"""Dark-rate and cross-talk calibration from dark and coherent-light runs.

Loss is not calibrated: a lossy coherent state is another coherent state, so
the efficiency cannot be separated from the mean without a reference
detector. Only the zero- and one-click frequencies of the light run are used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bisect

__all__ = [
    "CalibrationError",
    "RunSummary",
    "CalibrationResult",
    "PooledCalibration",
    "dark_prime_from_run",
    "correct_dark",
    "predicted_p1",
    "calibrate_xt",
    "pool_calibrations",
]

log = logging.getLogger(__name__)

XT_BRACKET = (0.0, 0.5)
XTOL = 1e-10
MAXITER = 200


class CalibrationError(ValueError):
    """The data cannot be explained by the two-unknown coherent-state model."""


@dataclass(frozen=True)
class RunSummary:
    """Click histogram of one acquisition run.

    ``counts[n]`` is the number of accepted pulses with ``n`` clicks and
    ``capped`` how many of those were clipped into the top bin by a
    simulator.
    """

    counts: dict
    pulses: int
    capped: int = 0

    def __post_init__(self):
        counts = {int(k): int(v) for k, v in dict(self.counts).items()}
        if any(k < 0 for k in counts):
            raise ValueError("click numbers must be non-negative")
        if any(v < 0 for v in counts.values()):
            raise ValueError("counts must be non-negative")
        if sum(counts.values()) != self.pulses:
            raise ValueError(f"counts sum to {sum(counts.values())}, expected pulses={self.pulses}")
        object.__setattr__(self, "counts", dict(sorted(counts.items())))
        object.__setattr__(self, "pulses", int(self.pulses))

    @classmethod
    def from_array(cls, hist, capped: int = 0) -> "RunSummary":
        hist = np.asarray(hist, dtype=np.int64)
        counts = {int(n): int(c) for n, c in enumerate(hist) if c}
        return cls(counts=counts, pulses=int(hist.sum()), capped=capped)

    @classmethod
    def from_clicks(cls, clicks) -> "RunSummary":
        clicks = np.asarray(clicks, dtype=np.int64)
        if clicks.size and clicks.min() < 0:
            raise ValueError("click numbers must be non-negative")
        return cls.from_array(np.bincount(clicks) if clicks.size else [])

    def histogram(self, n_max: int | None = None) -> np.ndarray:
        top = max(self.counts, default=0)
        size = (top if n_max is None else n_max) + 1
        hist = np.zeros(size, dtype=np.int64)
        for n, c in self.counts.items():
            if n_max is not None and n > n_max:
                hist[n_max] += c
            else:
                hist[n] = c
        return hist

    def frequencies(self, n_max: int | None = None) -> np.ndarray:
        if self.pulses == 0:
            raise ValueError("empty run")
        return self.histogram(n_max) / self.pulses

    def merge(self, other: "RunSummary") -> "RunSummary":
        counts = dict(self.counts)
        for n, c in other.counts.items():
            counts[n] = counts.get(n, 0) + c
        return RunSummary(counts, self.pulses + other.pulses, self.capped + other.capped)

    def to_dict(self) -> dict:
        return {
            "pulses": self.pulses,
            "counts": {str(n): c for n, c in self.counts.items()},
            "capped": self.capped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        try:
            return cls(counts=data["counts"], pulses=data["pulses"], capped=data.get("capped", 0))
        except KeyError as exc:
            raise ValueError(f"run summary is missing field {exc}") from None


@dataclass(frozen=True)
class CalibrationResult:
    eps_xt: float
    mean: float
    eps_d_prime: float
    eps_d: float
    residual: float
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PooledCalibration:
    """Summary over repeated calibrations.

    Both a sample standard deviation and the half-range are given, since a
    quoted ``+/-`` can mean either.
    """

    mean: float
    std: float
    half_range: float
    values: tuple

    def to_dict(self) -> dict:
        return asdict(self)


def dark_prime_from_run(dark: RunSummary) -> float:
    """Measured single-avalanche dark probability, P(exactly one click).

    Multi-click dark pulses are not folded in.
    """
    if dark.pulses <= 0:
        raise ValueError("dark run has no pulses")
    multi = dark.pulses - dark.counts.get(0, 0) - dark.counts.get(1, 0)
    if multi:
        log.info("dark run: %d multi-click pulses out of %d ignored", multi, dark.pulses)
    return dark.counts.get(1, 0) / dark.pulses


def correct_dark(eps_d_prime: float, eps_xt: float) -> float:
    """Remove cross-talk inflation from the measured dark rate."""
    if not 0.0 <= eps_d_prime < 1.0:
        raise ValueError(f"eps_d_prime must lie in [0, 1), got {eps_d_prime}")
    if not 0.0 <= eps_xt < 1.0:
        raise ValueError(f"eps_xt must lie in [0, 1), got {eps_xt}")
    eps_d = eps_d_prime / (1.0 - eps_xt)
    if eps_d >= 1.0:
        raise ValueError(f"corrected dark probability {eps_d} >= 1")
    return eps_d


def _implied_p0(p0_meas: float, eps_d: float) -> float:
    return p0_meas / (1.0 - eps_d)


def predicted_p1(eps_xt: float, p0_meas: float, eps_d_prime: float) -> tuple[float, float]:
    """Predicted one-click frequency and coherent mean for a trial ``eps_xt``.

    ``p0_meas`` fixes the vacuum probability through the zero-click
    relation; the coherent-state mean follows as ``-ln p0``.
    """
    eps_d = correct_dark(eps_d_prime, eps_xt)
    p0 = _implied_p0(p0_meas, eps_d)
    if p0 >= 1.0:
        raise CalibrationError(
            f"p0'/(1-eps_d) = {p0:.6g} >= 1 implies a non-positive mean photon number"
        )
    mean = -math.log(p0)
    p1 = mean * p0
    return (p1 * (1.0 - eps_d) + p0 * eps_d) * (1.0 - eps_xt), mean


def calibrate_xt(
    light: RunSummary | tuple[float, float],
    eps_d_prime: float,
    *,
    bracket: tuple[float, float] = XT_BRACKET,
    xtol: float = XTOL,
    maxiter: int = MAXITER,
) -> CalibrationResult:
    """Solve the zero/one-click relations for cross-talk and coherent mean.

    ``light`` is either a run histogram or the measured pair
    ``(p0', p1')``. The one-click residual is bisected over ``eps_xt``.
    """
    if isinstance(light, RunSummary):
        if light.pulses <= 0:
            raise ValueError("light run has no pulses")
        p0m = light.counts.get(0, 0) / light.pulses
        p1m = light.counts.get(1, 0) / light.pulses
    else:
        p0m, p1m = map(float, light)
    if not (p0m > 0.0 and p1m > 0.0):
        raise CalibrationError(f"need non-zero zero- and one-click frequencies, got p0'={p0m}, p1'={p1m}")
    if not 0.0 <= eps_d_prime < 1.0:
        raise ValueError(f"eps_d_prime must lie in [0, 1), got {eps_d_prime}")

    lo, hi = map(float, bracket)
    # the implied vacuum probability rises with eps_xt; stop short of p0 == 1
    if eps_d_prime > 0.0 and p0m < 1.0:
        x_vac = 1.0 - eps_d_prime / (1.0 - p0m)
        if x_vac <= lo:
            raise CalibrationError("p0'/(1-eps_d) >= 1 over the whole bracket (implied negative mean)")
        hi = min(hi, x_vac - 1e-12)
    elif p0m >= 1.0:
        raise CalibrationError("p0' = 1 implies a zero mean photon number")

    def residual(x: float) -> float:
        return predicted_p1(x, p0m, eps_d_prime)[0] - p1m

    f_lo, f_hi = residual(lo), residual(hi)
    if abs(f_lo) <= 1e-15:
        root, iterations = lo, 0
    elif abs(f_hi) <= 1e-15:
        root, iterations = hi, 0
    elif f_lo * f_hi > 0.0:
        raise CalibrationError(
            f"no sign change of the one-click residual on [{lo}, {hi}] "
            f"(f={f_lo:.3g}, {f_hi:.3g}); p1'={p1m:.6g} cannot be explained"
        )
    else:
        root, info = bisect(residual, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps,
                            maxiter=maxiter, full_output=True)
        iterations = info.iterations
        if not info.converged:
            log.warning("bisection did not converge: %s", info.flag)

    pred, mean = predicted_p1(root, p0m, eps_d_prime)
    eps_d = correct_dark(eps_d_prime, root)
    diagnostics = {"p0_meas": p0m, "p1_meas": p1m, "bracket": [lo, hi]}
    if isinstance(light, RunSummary):
        diagnostics["pulses"] = light.pulses
    return CalibrationResult(
        eps_xt=float(root),
        mean=float(mean),
        eps_d_prime=float(eps_d_prime),
        eps_d=float(eps_d),
        residual=float(abs(pred - p1m)),
        iterations=int(iterations),
        diagnostics=diagnostics,
    )


def pool_calibrations(results) -> PooledCalibration:
    values = np.array([r.eps_xt if isinstance(r, CalibrationResult) else float(r) for r in results])
    if values.size < 2:
        raise ValueError("pooling needs at least two calibrations")
    return PooledCalibration(
        mean=float(values.mean()),
        std=float(values.std(ddof=1)),
        half_range=float(np.ptp(values) / 2),
        values=tuple(values.tolist()),
    )
