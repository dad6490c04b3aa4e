"""Generative Monte Carlo of the per-pulse detection process.

Used as an independent check on the transfer-matrix model: photons are drawn
from the source, thinned one by one, a dark avalanche is added with
probability ``eps_d``, and every avalanche then branches into a chain of
induced avalanches. No model matrix is consulted.

Randomness is split into fixed blocks of ``BLOCK`` consecutive pulses, each
driven by its own stream derived from ``(seed, block index)``. A pulse's
outcome therefore depends only on the seed and its index, and runs are
identical for any number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .calibrate import RunSummary
from .model import DetectorParams, XtVariant
from .sources import Coherent, Fock, SourceModel, TwoModeSqueezed

__all__ = [
    "BLOCK",
    "SimConfig",
    "HeraldEstimate",
    "simulate_pulse",
    "simulate_block",
    "simulate_run",
    "simulate_heralded",
]

BLOCK = 1 << 16


@dataclass(frozen=True)
class SimConfig:
    params: DetectorParams
    source: SourceModel
    pulses: int
    seed: int = 0

    def __post_init__(self):
        if int(self.pulses) != self.pulses or self.pulses < 1:
            raise ValueError(f"pulses must be a positive integer, got {self.pulses}")


@dataclass(frozen=True)
class HeraldEstimate:
    fidelity: float
    events: int
    hits: int
    pulses: int

    @property
    def stderr(self) -> float:
        if self.events == 0:
            return math.nan
        q = self.fidelity
        return math.sqrt(q * (1.0 - q) / self.events)

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "events": self.events,
            "hits": self.hits,
            "pulses": self.pulses,
            "stderr": self.stderr,
        }


def _check_variant(params: DetectorParams) -> None:
    if params.xt_variant is not XtVariant.CHAIN:
        raise ValueError(
            f"Monte Carlo supports only the chain cross-talk model, got {params.xt_variant.value!r}"
        )


def _rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(ss))


def _sample_photons(source: SourceModel, size: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(source, Coherent):
        return rng.poisson(source.mean, size)
    if isinstance(source, TwoModeSqueezed):
        mean = source.mean
        if mean == 0.0:
            return np.zeros(size, dtype=np.int64)
        # thermal marginal: failures before first success, p = 1/(1+mean)
        return rng.geometric(1.0 / (1.0 + mean), size) - 1
    if isinstance(source, Fock):
        return np.full(size, source.n, dtype=np.int64)
    raise TypeError(f"unsupported source {source!r}")


def _detect(photons: np.ndarray, params: DetectorParams, rng: np.random.Generator) -> np.ndarray:
    """Avalanche count for each pulse given its incident photon number."""
    primary = rng.binomial(photons, params.eta)
    primary += rng.random(photons.size) < params.eps_d
    total = primary.astype(np.int64)
    pending = total.copy()
    eps = params.eps_xt
    if eps > 0.0:
        # each pending avalanche independently spawns one successor
        while pending.any():
            pending = rng.binomial(pending, eps)
            total += pending
    return total


def simulate_block(params: DetectorParams, source: SourceModel, block: int, seed: int,
                   size: int = BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Photon numbers and uncapped click counts for one block of pulses."""
    _check_variant(params)
    rng = _rng(seed, block)
    photons = _sample_photons(source, BLOCK, rng)
    clicks = _detect(photons, params, rng)
    return photons[:size], clicks[:size]


def simulate_pulse(params: DetectorParams, source: SourceModel, pulse_index: int,
                   seed: int) -> int:
    """Click count of a single pulse, capped at ``n_max``.

    Identical to entry ``pulse_index`` of any run with the same seed.
    """
    if pulse_index < 0:
        raise ValueError("pulse_index must be non-negative")
    block, offset = divmod(int(pulse_index), BLOCK)
    _, clicks = simulate_block(params, source, block, seed)
    return int(min(clicks[offset], params.n_max))


def _run_block(params, source, block, seed, size):
    _, clicks = simulate_block(params, source, block, seed, size)
    capped = int(np.count_nonzero(clicks > params.n_max))
    clicks = np.minimum(clicks, params.n_max)
    return np.bincount(clicks, minlength=params.n_max + 1), capped


def _blocks(pulses: int):
    full, rest = divmod(pulses, BLOCK)
    sizes = [BLOCK] * full + ([rest] if rest else [])
    return list(enumerate(sizes))


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(*item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: fn(*item), items))


def simulate_run(config: SimConfig, workers: int = 1) -> RunSummary:
    """Click histogram over ``config.pulses`` simulated pulses."""
    params, source = config.params, config.source
    _check_variant(params)
    results = _map(lambda b, n: _run_block(params, source, b, config.seed, n),
                   _blocks(config.pulses), workers)
    hist = np.zeros(params.n_max + 1, dtype=np.int64)
    capped = 0
    for h, c in results:
        hist += h
        capped += c
    return RunSummary.from_array(hist, capped=capped)


def simulate_heralded(r: float, params: DetectorParams, k: int, pulses: int, seed: int,
                      workers: int = 1) -> HeraldEstimate:
    """Empirical fraction of ``k``-click heralds whose partner mode holds ``k`` photons."""
    if not 0 <= k <= params.n_max:
        raise ValueError(f"herald outcome k={k} outside 0..{params.n_max}")
    if int(pulses) != pulses or pulses < 1:
        raise ValueError("pulses must be a positive integer")
    source = TwoModeSqueezed(r)

    def one(block: int, size: int):
        photons, clicks = simulate_block(params, source, block, seed, size)
        clicks = np.minimum(clicks, params.n_max)
        herald = clicks == k
        return int(herald.sum()), int(np.count_nonzero(herald & (photons == k)))

    results = _map(one, _blocks(int(pulses)), workers)
    events = sum(e for e, _ in results)
    hits = sum(h for _, h in results)
    fidelity = hits / events if events else math.nan
    return HeraldEstimate(fidelity=fidelity, events=events, hits=hits, pulses=int(pulses))
