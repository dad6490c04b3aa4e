"""Photon-number reconstruction from click statistics.

Two routes: direct inversion of the loss, dark and cross-talk matrices
(unbiased but noise-amplifying), and a one-parameter maximum-likelihood fit
of an assumed source family through the forward model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .model import (
    DetectorParams,
    ProbDist,
    TransferMatrix,
    dark_matrix,
    loss_matrix,
    total_matrix,
    xt_matrix,
)
from .sources import Coherent, SourceModel, TwoModeSqueezed, photon_distribution

__all__ = [
    "ReconstructionReport",
    "invert_transfer",
    "reconstruct_direct",
    "fit_source",
    "stabilize",
    "stabilize_with_mass",
    "source_likelihood",
]

FIT_TOL = 1e-8
_TINY = 1e-300


@dataclass(frozen=True, eq=False)
class ReconstructionReport:
    estimate: ProbDist
    method: str
    raw: np.ndarray | None = None
    negatives_clipped: float = 0.0
    fit_param: float | None = None
    fit_family: str | None = None
    residual: float = 0.0
    flags: tuple = ()
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "estimate": self.estimate.values.tolist(),
            "raw": None if self.raw is None else np.asarray(self.raw).tolist(),
            "negatives_clipped": self.negatives_clipped,
            "fit_param": self.fit_param,
            "fit_family": self.fit_family,
            "residual": self.residual,
            "flags": list(self.flags),
        }
        out.update(self.extra)
        return out


def invert_transfer(m: TransferMatrix) -> TransferMatrix:
    """Exact inverse of a triangular transfer matrix by back-substitution."""
    a = m.entries
    diag = np.diag(a)
    if np.any(diag == 0.0):
        raise ValueError("transfer matrix has a zero diagonal entry and is not invertible")
    if not np.any(np.tril(a, -1)):
        lower = False
    elif not np.any(np.triu(a, 1)):
        lower = True
    else:
        raise ValueError("invert_transfer expects a triangular matrix; invert factors separately")
    inv = solve_triangular(a, np.eye(m.dim), lower=lower)
    return TransferMatrix(inv, kind=f"inverse({m.kind})", params=m.params)


def _as_vector(p) -> np.ndarray:
    return np.asarray(p, dtype=float)


def stabilize_with_mass(raw) -> tuple[ProbDist, float]:
    """Clip negative entries and renormalize; also return the clipped mass."""
    raw = _as_vector(raw)
    clipped = np.clip(raw, 0.0, None)
    total = clipped.sum()
    if total <= 0.0:
        raise ValueError("nothing left after clipping negative entries")
    return ProbDist(clipped / total), float(-raw[raw < 0].sum())


def stabilize(raw) -> ProbDist:
    return stabilize_with_mass(raw)[0]


def reconstruct_direct(p_meas, params: DetectorParams) -> ReconstructionReport:
    """Undo cross-talk, then dark counts, then loss."""
    if params.eta <= 0.0:
        raise ValueError("eta = 0 makes the loss matrix singular")
    p = _as_vector(p_meas)
    if p.size != params.n_max + 1:
        raise ValueError(f"measured distribution has {p.size} entries, n_max={params.n_max}")
    n = params.n_max
    m_xt = xt_matrix(params.eps_xt, n, params.xt_variant, params.xt_base)
    m_d = dark_matrix(params.eps_d, n)
    m_l = loss_matrix(params.eta, n)
    # solve each triangular system in turn rather than forming inverses
    q = solve_triangular(m_xt.entries, p, lower=True)
    q = solve_triangular(m_d.entries, q, lower=True)
    raw = solve_triangular(m_l.entries, q, lower=False)
    estimate, clipped = stabilize_with_mass(raw)
    predicted = total_matrix(params).entries @ estimate.values
    return ReconstructionReport(
        estimate=estimate,
        method="direct-inverse",
        raw=raw,
        negatives_clipped=clipped,
        residual=float(np.abs(predicted - p).sum()),
    )


def _family_of(family) -> str:
    if isinstance(family, str):
        key = family.lower()
    elif isinstance(family, type):
        key = family.__name__.lower()
    else:
        key = type(family).__name__.lower()
    if key in ("coherent",):
        return "coherent"
    if key in ("spdc", "spdc-r", "twomodesqueezed", "thermal"):
        return "spdc-r"
    raise ValueError(f"family {family!r} has no single free parameter")


def _make_source(family: str, value: float) -> SourceModel:
    return Coherent(value) if family == "coherent" else TwoModeSqueezed(value)


def source_likelihood(p_meas, params: DetectorParams, source: SourceModel,
                      m_tot: np.ndarray | None = None) -> float:
    """Multinomial log-likelihood per pulse, ``sum_n f_n log q_n``."""
    f = _as_vector(p_meas)
    if m_tot is None:
        m_tot = total_matrix(params).entries
    q = m_tot @ photon_distribution(source, params.n_max).values
    q = q / q.sum()
    mask = f > 0
    return float(np.sum(f[mask] * np.log(np.maximum(q[mask], _TINY))))


def fit_source(
    p_meas,
    params: DetectorParams,
    family="coherent",
    bounds: tuple[float, float] = (0.0, 10.0),
    tol: float = FIT_TOL,
) -> ReconstructionReport:
    """Fit one source parameter by maximum multinomial likelihood.

    ``family`` is ``"coherent"`` (free mean) or ``"spdc-r"`` (free squeeze
    parameter). The fit is a golden-section search on ``bounds``. A fit at
    the lower bound is flagged.
    """
    fam = _family_of(family)
    lo, hi = map(float, bounds)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0.0 or hi <= lo:
        raise ValueError(f"empty or invalid bracket {bounds}")
    f = _as_vector(p_meas)
    if f.size != params.n_max + 1:
        raise ValueError(f"measured distribution has {f.size} entries, n_max={params.n_max}")
    if f.sum() <= 0.0:
        raise ValueError("measured distribution is empty")
    f = f / f.sum()
    m_tot = total_matrix(params).entries

    def nll(x: float) -> float:
        x = min(max(x, lo), hi)
        return -source_likelihood(f, params, _make_source(fam, x), m_tot)

    # golden section never probes the endpoints; compare them explicitly
    x = _golden(nll, lo, hi, tol)
    best = min((x, lo, hi), key=nll)
    flags = []
    scale = max(1.0, hi - lo)
    if best - lo <= 10 * tol * scale:
        flags.append("lower-bound")
    if hi - best <= 10 * tol * scale:
        flags.append("upper-bound")
    source = _make_source(fam, best)
    p_fit = photon_distribution(source, params.n_max)
    predicted = m_tot @ p_fit.values
    predicted = predicted / predicted.sum()
    return ReconstructionReport(
        estimate=p_fit,
        method="forward-fit",
        fit_param=float(best),
        fit_family=fam,
        residual=float(np.abs(predicted - f).sum()),
        flags=tuple(flags),
        extra={"predicted": predicted.tolist(), "nll": nll(best), "bounds": [lo, hi]},
    )


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden(fun, a: float, b: float, tol: float) -> float:
    """Golden-section minimum of a unimodal ``fun`` on ``[a, b]``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fun(d)
    return (a + b) / 2.0
