"""Digitizer waveforms: post-selection, pulse-height binning and synthesis.

Each trigger yields a short record (20 samples at 1 GS/s, 5 ns of
pre-trigger). A record is kept only if the trace sits at the zero level
shortly before the trigger; it then counts as a pulse if a rising edge
appears within a few ns of the trigger, in which case the height read at a
fixed offset is converted to a click number.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import brentq
from scipy.special import lambertw
from scipy.signal import find_peaks

from .calibrate import RunSummary

__all__ = [
    "WaveformRecord",
    "AcquisitionConfig",
    "Rejected",
    "Zero",
    "Accepted",
    "PulseOutcome",
    "PulseTemplate",
    "GainEstimate",
    "post_select",
    "heights_to_counts",
    "outcomes_to_counts",
    "estimate_gain",
    "synthesize_waveform",
    "synthesize_run",
    "single_dark_windows",
    "dark_rate_for_raw_probability",
    "raw_peak_height",
    "write_binary",
    "read_binary",
    "write_json",
    "read_json",
    "read_records",
    "height_histogram",
]

MAGIC = b"MPXW"
VERSION = 1
_HEADER = struct.Struct("<4sHdII")

DEFAULT_AMPLITUDE = 0.01  # volts per fired pixel at the pulse maximum


@dataclass(frozen=True, eq=False)
class WaveformRecord:
    samples: np.ndarray
    sample_period: float = 1.0
    trigger_index: int = 5

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be 1-d")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")
        if not 0 <= self.trigger_index < samples.size:
            raise ValueError(f"trigger_index {self.trigger_index} outside record of {samples.size}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "trigger_index", int(self.trigger_index))

    @property
    def duration(self) -> float:
        return self.samples.size * self.sample_period

    def index_at(self, offset_ns: float) -> int:
        """Sample index at ``offset_ns`` relative to the trigger."""
        return self.trigger_index + int(round(offset_ns / self.sample_period))

    def to_dict(self) -> dict:
        return {
            "sample_period": self.sample_period,
            "trigger_index": self.trigger_index,
            "samples": self.samples.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WaveformRecord":
        return cls(np.asarray(data["samples"], dtype=float), float(data.get("sample_period", 1.0)),
                   int(data["trigger_index"]))


@dataclass(frozen=True)
class AcquisitionConfig:
    """Post-selection settings; times in ns relative to the trigger.

    The default thresholds are 0.2 (zero level) and 0.3 per ns (rising edge)
    of the single-pixel amplitude.
    """

    zero_tolerance: float = 0.2 * DEFAULT_AMPLITUDE
    pre_check_offset: float = 1.0
    edge_window: float = 3.0
    peak_offset: float = 5.0
    edge_slope_threshold: float = 0.3 * DEFAULT_AMPLITUDE

    def __post_init__(self):
        for name in ("zero_tolerance", "pre_check_offset", "edge_window", "peak_offset",
                     "edge_slope_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_amplitude(cls, amplitude: float, **overrides) -> "AcquisitionConfig":
        values = {"zero_tolerance": 0.2 * amplitude, "edge_slope_threshold": 0.3 * amplitude}
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class Rejected:
    reason: str = "not at zero level before trigger"


@dataclass(frozen=True)
class Zero:
    pass


@dataclass(frozen=True)
class Accepted:
    height: float


PulseOutcome = Rejected | Zero | Accepted


def post_select(w: WaveformRecord, cfg: AcquisitionConfig) -> PulseOutcome:
    dt = w.sample_period
    pre = w.index_at(-cfg.pre_check_offset)
    peak = w.index_at(cfg.peak_offset)
    edge_end = w.index_at(cfg.edge_window)
    if pre < 0 or peak >= w.samples.size or edge_end + 1 >= w.samples.size:
        raise ValueError("record too short for the configured offsets")
    s = w.samples
    if abs(s[pre]) > cfg.zero_tolerance:
        return Rejected()
    diffs = np.diff(s[w.trigger_index:edge_end + 2])
    if np.any(diffs > cfg.edge_slope_threshold * dt):
        height = float(s[peak])
        # an edge that has already decayed below zero level reads as nothing
        if height > 0:
            return Accepted(height)
    return Zero()


def raw_peak_height(w: WaveformRecord) -> float:
    """Naive readout: the largest sample from the trigger to the end of the record."""
    return float(max(w.samples[w.trigger_index:].max(), 0.0))


def heights_to_counts(heights: Iterable[float], gain: float, offset: float = 0.0,
                      zeros: int = 0) -> RunSummary:
    """Bin pulse heights to the nearest click number.

    ``zeros`` adds pulses that had no rising edge (zero clicks).
    """
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    heights = np.asarray(list(heights) if not isinstance(heights, np.ndarray) else heights, dtype=float)
    clicks = np.clip(np.rint((heights - offset) / gain), 0, None).astype(np.int64)
    hist = np.bincount(clicks) if clicks.size else np.zeros(1, dtype=np.int64)
    hist = hist.copy()
    hist[0] += int(zeros)
    return RunSummary.from_array(hist)


def outcomes_to_counts(outcomes: Iterable[PulseOutcome], gain: float,
                       offset: float = 0.0) -> tuple[RunSummary, int]:
    """Histogram of accepted and zero outcomes, plus the number rejected."""
    heights, zeros, rejected = [], 0, 0
    for outcome in outcomes:
        if isinstance(outcome, Accepted):
            heights.append(outcome.height)
        elif isinstance(outcome, Zero):
            zeros += 1
        else:
            rejected += 1
    return heights_to_counts(heights, gain, offset, zeros=zeros), rejected


@dataclass(frozen=True)
class GainEstimate:
    gain: float
    offset: float
    peaks: tuple

    @property
    def baseline(self) -> float:
        """Zero-click height implied by the first peak."""
        return self.offset - self.gain * round(self.offset / self.gain)


def estimate_gain(heights, bins: int = 1024, smooth: float = 3.0,
                  min_prominence: float = 0.01) -> GainEstimate:
    """Peak spacing of the pulse-height histogram.

    The histogram is smoothed with a Gaussian of ``smooth`` bins. Maxima must
    stand out from the counting noise of the smoothed histogram; they are refined by parabolic interpolation, and the median spacing between
    neighbouring maxima is the gain. ``offset`` is the first maximum.
    """
    heights = np.asarray(heights, dtype=float)
    if heights.size < 100:
        raise ValueError(f"need at least 100 heights, got {heights.size}")
    lo, hi = heights.min(), heights.max()
    if hi <= lo:
        raise ValueError("fewer than 2 peaks: all heights identical")
    pad = 0.05 * (hi - lo)
    hist, edges = np.histogram(heights, bins=bins, range=(lo - pad, hi + pad))
    dens = gaussian_filter1d(hist.astype(float), smooth)
    # Gaussian smoothing of Poisson counts leaves noise of about sqrt(lam / (2 sqrt(pi) s))
    noise = math.sqrt(dens.max() / (2.0 * math.sqrt(math.pi) * smooth))
    idx, _ = find_peaks(dens, prominence=max(min_prominence * dens.max(), 5.0 * noise))
    if idx.size < 2:
        raise ValueError(f"fewer than 2 peaks found in the height histogram ({idx.size})")
    width = edges[1] - edges[0]
    centres = []
    for i in idx:
        y0, y1, y2 = dens[i - 1], dens[i], dens[i + 1]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        centres.append(edges[0] + (i + 0.5 + shift) * width)
    centres = np.array(centres)
    gain = float(np.median(np.diff(centres)))
    return GainEstimate(gain=gain, offset=float(centres[0]), peaks=tuple(centres.tolist()))


@dataclass(frozen=True)
class PulseTemplate:
    """Single-pixel pulse, a difference of exponentials with unit peak times ``amplitude``.

    ``delay`` is the onset of photon-induced avalanches after the trigger.
    The default time constants give a ~1 ns rise and ~20 ns FWHM.
    """

    amplitude: float = DEFAULT_AMPLITUDE
    rise: float = 0.5
    fall: float = 25.7
    delay: float = 1.0
    samples: int = 20
    pre_trigger: float = 5.0
    sample_period: float = 1.0

    def __post_init__(self):
        if not (self.amplitude > 0 and self.rise > 0 and self.fall > self.rise):
            raise ValueError("need amplitude > 0 and 0 < rise < fall")
        if self.samples < 1 or not self.sample_period > 0:
            raise ValueError("bad record geometry")

    @property
    def _peak_time(self) -> float:
        r, f = self.rise, self.fall
        return r * f / (f - r) * math.log(f / r)

    def shape(self, t) -> np.ndarray:
        """Unit-peak pulse at time ``t`` (ns) after onset."""
        t = np.asarray(t, dtype=float)
        tp = self._peak_time
        norm = math.exp(-tp / self.fall) - math.exp(-tp / self.rise)
        tc = np.clip(t, 0.0, None)
        return np.where(t > 0, (np.exp(-tc / self.fall) - np.exp(-tc / self.rise)) / norm, 0.0)

    def fwhm(self) -> float:
        tp = self._peak_time
        left = brentq(lambda t: self.shape(t) - 0.5, 0.0, tp)
        right = brentq(lambda t: self.shape(t) - 0.5, tp, 50 * self.fall)
        return right - left

    @property
    def trigger_index(self) -> int:
        return int(round(self.pre_trigger / self.sample_period))

    def times(self) -> np.ndarray:
        """Sample times relative to the trigger."""
        return (np.arange(self.samples) - self.trigger_index) * self.sample_period

    def read_gain(self, cfg: AcquisitionConfig | None = None) -> float:
        """Height read at the peak offset for a single photon-induced avalanche."""
        cfg = cfg or AcquisitionConfig.for_amplitude(self.amplitude)
        t = round(cfg.peak_offset / self.sample_period) * self.sample_period
        return float(self.amplitude * self.shape(t - self.delay))


def synthesize_waveform(clicks: int, dark_events=(), template: PulseTemplate | None = None,
                        noise_sigma: float = 0.0,
                        rng: np.random.Generator | int | None = None) -> WaveformRecord:
    """Build a digitizer record.

    ``dark_events`` holds ``(time, pixels)`` pairs with times in ns relative
    to the trigger (negative for avalanches before it).
    """
    if int(clicks) != clicks or clicks < 0:
        raise ValueError(f"clicks must be a non-negative integer, got {clicks}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    template = template or PulseTemplate()
    t = template.times()
    trace = clicks * template.shape(t - template.delay)
    for when, pixels in dark_events:
        trace = trace + pixels * template.shape(t - when)
    trace = template.amplitude * trace
    if noise_sigma > 0:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        trace = trace + rng.normal(0.0, noise_sigma, trace.size)
    return WaveformRecord(trace, template.sample_period, template.trigger_index)


def _dark_times(rng: np.random.Generator, rate: float, start: float, stop: float) -> np.ndarray:
    count = rng.poisson(rate * (stop - start))
    return np.sort(rng.uniform(start, stop, count))


def synthesize_run(clicks, dark_rate: float = 0.0, template: PulseTemplate | None = None,
                   noise_sigma: float = 0.0, seed: int = 0, lead: float | None = None,
                   block: int = 4096) -> list[WaveformRecord]:
    """One record per entry of ``clicks``, with Poissonian single-pixel dark pulses.

    Dark avalanches arrive at ``dark_rate`` per ns from ``lead`` ns before
    the record start to its end. Pulse ``i`` draws from the stream of block
    ``i // block``, so output depends only on ``seed`` and the inputs.
    """
    template = template or PulseTemplate()
    if dark_rate < 0:
        raise ValueError("dark_rate must be non-negative")
    clicks = np.asarray(clicks, dtype=np.int64)
    if lead is None:
        lead = 4.0 * template.fall
    t0 = -template.pre_trigger - lead
    t1 = template.times()[-1] + template.sample_period
    records = []
    for b0 in range(0, clicks.size, block):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b0 // block,)))
        for c in clicks[b0:b0 + block]:
            darks = _dark_times(rng, dark_rate, t0, t1) if dark_rate > 0 else ()
            records.append(synthesize_waveform(int(c), [(t, 1) for t in darks], template,
                                               noise_sigma, rng))
    return records


def single_dark_windows(template: PulseTemplate | None = None,
                        cfg: AcquisitionConfig | None = None,
                        lead: float | None = None, step: float = 0.01) -> dict:
    """Onset-time widths (ns) over which one dark avalanche reads as one click.

    ``raw`` uses the naive peak readout over the post-trigger record, and
    ``selected`` the post-selected readout.
    """
    template = template or PulseTemplate()
    cfg = cfg or AcquisitionConfig.for_amplitude(template.amplitude)
    if lead is None:
        lead = 4.0 * template.fall
    gain = template.read_gain(cfg)
    start = -template.pre_trigger - lead
    stop = template.times()[-1] + template.sample_period
    raw = sel = 0
    onsets = np.arange(start, stop, step)
    for t in onsets:
        rec = synthesize_waveform(0, [(t, 1)], template)
        if round(raw_peak_height(rec) / gain) == 1:
            raw += 1
        out = post_select(rec, cfg)
        if isinstance(out, Accepted) and round(out.height / gain) == 1:
            sel += 1
    return {"raw": raw * step, "selected": sel * step, "span": stop - start}


def dark_rate_for_raw_probability(p_raw: float, template: PulseTemplate | None = None,
                                  cfg: AcquisitionConfig | None = None) -> float:
    """Dark rate per ns whose naive one-click probability is ``p_raw``.

    Uses ``p = R W exp(-R W)`` for a raw sensitivity window ``W``.
    """
    if not 0 < p_raw < 1 / math.e:
        raise ValueError("p_raw must lie in (0, 1/e)")
    width = single_dark_windows(template, cfg)["raw"]
    x = -float(np.real(lambertw(-p_raw)))
    return x / width


def height_histogram(heights, bins: int = 256, range_=None) -> tuple[np.ndarray, np.ndarray]:
    return np.histogram(np.asarray(heights, dtype=float), bins=bins, range=range_)


# --- file formats -------------------------------------------------------------

def write_binary(records: Iterable[WaveformRecord], fh) -> int:
    """Append records to a binary stream; each record carries its own header."""
    n = 0
    for rec in records:
        fh.write(_HEADER.pack(MAGIC, VERSION, float(rec.sample_period), rec.trigger_index,
                              rec.samples.size))
        fh.write(rec.samples.astype("<f4").tobytes())
        n += 1
    return n


def read_binary(fh) -> Iterator[WaveformRecord]:
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return
        if len(head) != _HEADER.size:
            raise ValueError("truncated waveform header")
        magic, version, period, trig, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported waveform format version {version}")
        body = fh.read(4 * count)
        if len(body) != 4 * count:
            raise ValueError("truncated waveform samples")
        samples = np.frombuffer(body, dtype="<f4").astype(float)
        yield WaveformRecord(samples, period, trig)


def write_json(records: Iterable[WaveformRecord], fh) -> None:
    json.dump({"format": "MPXW-json", "version": VERSION,
               "records": [r.to_dict() for r in records]}, fh)


def read_json(fh) -> list[WaveformRecord]:
    data = json.load(fh)
    if isinstance(data, dict) and "records" in data:
        items = data["records"]
    elif isinstance(data, list):
        items = data
    else:
        items = [data]
    return [WaveformRecord.from_dict(item) for item in items]


def read_records(path) -> list[WaveformRecord]:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        fh.seek(0)
        if head == MAGIC:
            return list(read_binary(fh))
        return read_json(io.TextIOWrapper(fh, encoding="utf-8"))
