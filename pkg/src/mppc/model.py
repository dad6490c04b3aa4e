"""Transfer-matrix model of a multi-pixel photon counter.

All matrices use one orientation: row ``n`` is the output (click/avalanche)
count and column ``m`` is the input count, so that ``p_out = M @ p_in``.
The POVM is read from the transpose of the total matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

__all__ = [
    "XtVariant",
    "DetectorParams",
    "ProbDist",
    "TransferMatrix",
    "Povm",
    "loss_matrix",
    "dark_matrix",
    "xt_matrix",
    "total_matrix",
    "apply_forward",
    "build_povm",
]

DEFAULT_NMAX = 40

# tolerated float noise below zero in forward products
_NEG_TOL = 1e-12
_SUM_TOL = 1e-9
# extra ladder rungs used to measure truncation leakage of POVM rows
_LEAK_MARGIN = 60


class XtVariant(str, enum.Enum):
    """Cross-talk kernel variants."""

    PAPER = "paper"
    CHAIN = "chain"
    FIRST_ORDER = "first-order"

    @classmethod
    def parse(cls, value: "XtVariant | str") -> "XtVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown cross-talk variant {value!r} (expected one of {names})") from None


def _check_prob(name: str, value: float, *, upper_open: bool = False) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0.0 or value > 1.0 or (upper_open and value >= 1.0):
        interval = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value


def _check_nmax(n_max: int) -> int:
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"n_max must be a positive integer, got {n_max}")
    return int(n_max)


@dataclass(frozen=True)
class DetectorParams:
    """Detector description shared by every model path.

    Attributes:
        eta: photon detection efficiency.
        eps_d: per-pulse single-avalanche dark probability (cross-talk free).
        eps_xt: probability that an avalanche induces another one.
        xt_variant: which cross-talk kernel to build.
        n_max: truncation; vectors and matrices are indexed ``0..n_max``.
        xt_base: full kernel that ``FIRST_ORDER`` truncates.
    """

    eta: float = 1.0
    eps_d: float = 0.0
    eps_xt: float = 0.0
    xt_variant: XtVariant = XtVariant.CHAIN
    n_max: int = DEFAULT_NMAX
    xt_base: XtVariant = XtVariant.CHAIN

    def __post_init__(self):
        object.__setattr__(self, "eta", _check_prob("eta", self.eta))
        object.__setattr__(self, "eps_d", _check_prob("eps_d", self.eps_d, upper_open=True))
        object.__setattr__(self, "eps_xt", _check_prob("eps_xt", self.eps_xt, upper_open=True))
        object.__setattr__(self, "xt_variant", XtVariant.parse(self.xt_variant))
        object.__setattr__(self, "xt_base", XtVariant.parse(self.xt_base))
        if self.xt_base is XtVariant.FIRST_ORDER:
            raise ValueError("xt_base must be a full kernel (paper or chain)")
        object.__setattr__(self, "n_max", _check_nmax(self.n_max))

    def replace(self, **changes) -> "DetectorParams":
        values = self.to_dict()
        values.update(changes)
        return DetectorParams(**values)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "eps_d": self.eps_d,
            "eps_xt": self.eps_xt,
            "xt_variant": self.xt_variant.value,
            "n_max": self.n_max,
            "xt_base": self.xt_base.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorParams":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class ProbDist:
    """Truncated distribution over a count ladder ``0..n_max``.

    The sum may fall short of one because of truncation; :attr:`deficit`
    reports the missing mass.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise ValueError("ProbDist needs a 1-d vector with at least two entries")
        if not np.all(np.isfinite(values)):
            raise ValueError("ProbDist entries must be finite")
        if values.min() < 0.0:
            raise ValueError(f"ProbDist entries must be non-negative (min {values.min():.3g})")
        total = values.sum()
        if total > 1.0 + _SUM_TOL:
            raise ValueError(f"ProbDist sums to {total!r} > 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_max(self) -> int:
        return self.values.size - 1

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def deficit(self) -> float:
        return 1.0 - self.total

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, n):
        return self.values[n]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def to_dict(self) -> dict:
        return {"dim": len(self), "values": self.values.tolist(), "deficit": self.deficit}

    @classmethod
    def from_dict(cls, data: dict) -> "ProbDist":
        return cls(np.asarray(data["values"], dtype=float))

    @classmethod
    def point_mass(cls, n: int, n_max: int) -> "ProbDist":
        values = np.zeros(n_max + 1)
        values[n] = 1.0
        return cls(values)


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Square matrix with ``entries[n, m] = P(out = n | in = m)``.

    ``kind`` names the family (``loss``, ``dark``, ``xt``, ``total``, or an
    ``inverse`` thereof) and ``params`` echoes the parameters it was built
    from.
    """

    entries: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"transfer matrix must be square, got shape {entries.shape}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_max(self) -> int:
        return self.dim - 1

    def column_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def __matmul__(self, other: "TransferMatrix") -> "TransferMatrix":
        if not isinstance(other, TransferMatrix):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return TransferMatrix(self.entries @ other.entries, kind=f"{self.kind}*{other.kind}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "orientation": "row=output,col=input",
            "params": self.params,
            "entries": self.entries.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TransferMatrix":
        entries = np.asarray(data["entries"], dtype=float)
        if "dim" in data and entries.shape != (data["dim"], data["dim"]):
            raise ValueError("entries do not match declared dim")
        return cls(entries, kind=data.get("kind", "custom"), params=data.get("params", {}))


@dataclass(frozen=True, eq=False)
class Povm:
    """Diagonal POVM, ``theta[k, n]`` = P(n clicks | Fock state k).

    ``leakage[k]`` is the fraction of the outcome mass of input ``k`` lost
    beyond the last resolvable outcome; rows where it exceeds ``1e-9`` are
    listed in ``flagged`` and exempt from the unit-sum check.
    """

    theta: np.ndarray
    normalized: bool
    leakage: np.ndarray | None = None
    label: str = "mppc"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2:
            raise ValueError("theta must be 2-d (fock input x click outcome)")
        if theta.min() < 0.0:
            raise ValueError("POVM entries must be non-negative")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        leakage = np.zeros(theta.shape[0]) if self.leakage is None else np.asarray(self.leakage, dtype=float)
        object.__setattr__(self, "leakage", leakage)

    @property
    def n_max(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def n_outcomes(self) -> int:
        return self.theta.shape[1]

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero(self.leakage > _SUM_TOL)

    def element(self, n: int) -> np.ndarray:
        """Diagonal of the POVM operator for outcome ``n``."""
        return self.theta[:, n]

    def outcome_probabilities(self, p: ProbDist | np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.size != self.theta.shape[0]:
            raise ValueError("distribution and POVM truncations differ")
        return p @ self.theta

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "normalized": self.normalized,
            "index": "theta[k][n] = P(n clicks | k photons)",
            "params": self.params,
            "theta": self.theta.tolist(),
            "leakage": self.leakage.tolist(),
            "flagged_rows": self.flagged.tolist(),
        }


def loss_matrix(eta: float, n_max: int) -> TransferMatrix:
    """Binomial loss channel, ``M[n, m] = C(m, n) eta^n (1 - eta)^(m - n)``."""
    eta = _check_prob("eta", eta)
    n_max = _check_nmax(n_max)
    n = np.arange(n_max + 1)
    out, inp = n[:, None], n[None, :]
    gap = np.clip(inp - out, 0, None)
    with np.errstate(invalid="ignore"):
        entries = comb(inp, out) * np.power(eta, out) * np.power(1.0 - eta, gap)
    # 0**0 == 1 covers eta in {0, 1}
    entries = np.where(out <= inp, entries, 0.0)
    return TransferMatrix(entries, kind="loss", params={"eta": eta})


def dark_matrix(eps_d: float, n_max: int) -> TransferMatrix:
    """At most one dark avalanche per pulse: a shift by one with probability ``eps_d``.

    The shift out of the last column is truncated, so that column sums to
    ``1 - eps_d``.
    """
    eps_d = _check_prob("eps_d", eps_d, upper_open=True)
    n_max = _check_nmax(n_max)
    entries = (1.0 - eps_d) * np.eye(n_max + 1) + eps_d * np.eye(n_max + 1, k=-1)
    return TransferMatrix(entries, kind="dark", params={"eps_d": eps_d})


def _xt_full(eps: float, n_max: int, variant: XtVariant) -> np.ndarray:
    n = np.arange(n_max + 1)
    out, inp = n[:, None], n[None, :]
    gap = np.clip(out - inp, 0, None)
    if variant is XtVariant.PAPER:
        coef = comb(out, gap)
    else:
        coef = comb(out - 1, gap)
    entries = coef * np.power(eps, gap) * np.power(1.0 - eps, inp)
    entries = np.where((out >= inp) & (inp >= 1), entries, 0.0)
    # zero avalanches never produce clicks, in both kernels
    entries[0, 0] = 1.0
    return entries


def xt_matrix(
    eps_xt: float,
    n_max: int,
    variant: XtVariant | str = XtVariant.CHAIN,
    base: XtVariant | str = XtVariant.CHAIN,
) -> TransferMatrix:
    """Cross-talk kernel mapping primary avalanches to total avalanches.

    ``PAPER`` uses the binomial ``C(n, n-m)`` coefficient as printed; its
    columns sum to ``1/(1 - eps_xt)``. ``CHAIN`` lets every avalanche seed an
    independent geometric chain of induced avalanches, giving the negative
    binomial ``C(n-1, n-m) eps^(n-m) (1-eps)^m`` with unit column sums.
    ``FIRST_ORDER`` keeps only the diagonal and first sub-diagonal of
    ``base``.
    """
    eps_xt = _check_prob("eps_xt", eps_xt, upper_open=True)
    n_max = _check_nmax(n_max)
    variant = XtVariant.parse(variant)
    base = XtVariant.parse(base)
    params = {"eps_xt": eps_xt, "variant": variant.value}
    if variant is XtVariant.FIRST_ORDER:
        if base is XtVariant.FIRST_ORDER:
            raise ValueError("first-order truncation needs a full base kernel")
        full = _xt_full(eps_xt, n_max, base)
        entries = np.tril(np.triu(full, k=-1))
        params["base"] = base.value
    else:
        entries = _xt_full(eps_xt, n_max, variant)
    return TransferMatrix(entries, kind="xt", params=params)


def total_matrix(params: DetectorParams) -> TransferMatrix:
    """``M_XT @ M_D @ M_L``; dark avalanches pass through cross-talk too."""
    m_l = loss_matrix(params.eta, params.n_max)
    m_d = dark_matrix(params.eps_d, params.n_max)
    m_xt = xt_matrix(params.eps_xt, params.n_max, params.xt_variant, params.xt_base)
    entries = m_xt.entries @ m_d.entries @ m_l.entries
    return TransferMatrix(entries, kind="total", params=params.to_dict())


def apply_forward(m: TransferMatrix, p: ProbDist, *, normalize: bool = False) -> ProbDist:
    """Push an input distribution through a forward matrix.

    Float noise down to ``-1e-12`` is clipped; anything more negative means an
    inverse (or otherwise invalid) matrix was passed and raises. A
    super-normalized kernel (``PAPER`` cross-talk) yields a sum above one,
    which raises unless ``normalize`` rescales the result to unit sum.
    """
    values = np.asarray(p, dtype=float)
    if values.size != m.dim:
        raise ValueError(f"dimension mismatch: matrix {m.dim} vs distribution {values.size}")
    out = m.entries @ values
    if out.min() < -_NEG_TOL:
        raise ValueError(
            f"forward product has negative entry {out.min():.3g}; was an inverse matrix passed?"
        )
    out = np.clip(out, 0.0, None)
    if normalize:
        total = out.sum()
        if total <= 0.0:
            raise ValueError("forward product carries no probability mass")
        out = out / total
    elif out.sum() > 1.0 + _SUM_TOL:
        raise ValueError(
            f"forward product sums to {out.sum():.6g} > 1 (super-normalized kernel); "
            "pass normalize=True to rescale"
        )
    return ProbDist(out)


def build_povm(params: DetectorParams, normalize: bool = True) -> Povm:
    """POVM of the modelled detector, ``theta[k, n] = M_TOT[n, k]``."""
    m_tot = total_matrix(params).entries
    theta = m_tot.T.copy()
    # leakage: compare in-window mass with mass on a much longer ladder
    wide = total_matrix(params.replace(n_max=params.n_max + _LEAK_MARGIN)).entries
    dim = params.n_max + 1
    wide_cols = wide[:, :dim]
    leakage = 1.0 - wide_cols[:dim].sum(axis=0) / wide_cols.sum(axis=0)
    leakage = np.clip(leakage, 0.0, None)
    if normalize:
        theta = theta / theta.sum(axis=1, keepdims=True)
    return Povm(theta, normalized=normalize, leakage=leakage, label="mppc", params=params.to_dict())
