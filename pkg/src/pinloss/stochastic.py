"""Time-domain Monte-Carlo of the photocurrent.

Photons arrive as a (possibly intensity-modulated) Poisson process, each is
absorbed at an exponentially distributed depth or transmitted, and every
absorbed photon adds its two-rectangle impulse response to a sampled trace.
Spectra estimated from the trace give an independent check of the
quadrature results: the shot-noise PSD must follow A^2 + B^2 and a
modulation tone must follow A^2.

Rectangles are deposited exactly as bin averages: each edge is a kink in the
cumulative charge, split between two neighbouring samples by linear
interpolation, and a single cumulative sum recovers the bin-averaged current.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal

from .materials import MaterialModel
from .spectra import gain_integrals
from .transport import DeviceGeometry, carrier_velocities

TRACE_MAGIC = b"PDTRACE1"
_HEADER = struct.Struct("<8sdQQ")  # magic, sample rate, seed, sample count


class SimulationError(ValueError):
    pass


class ToneNotResolvable(ValueError):
    def __init__(self, snr):
        super().__init__(f"tone not resolvable above shot background (SNR {snr:.3g})")
        self.snr = snr


@dataclass(frozen=True)
class PhotonStream:
    rate: float  # mean photon arrival rate, 1/s
    duration: float  # s
    seed: int = 0
    modulation_freq: Optional[float] = None  # Hz
    modulation_depth: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise SimulationError("photon rate must be positive")
        if not self.duration > 0:
            raise SimulationError("stream duration must be positive")
        if not 0.0 <= self.modulation_depth <= 1.0:
            raise SimulationError("modulation depth must lie in [0, 1]")
        if self.modulation_depth > 0 and not (self.modulation_freq and self.modulation_freq > 0):
            raise SimulationError("modulation depth given without a positive modulation frequency")
        if not 0 <= self.seed < 2**64:
            raise SimulationError("seed must be a 64-bit unsigned integer")


@dataclass
class CurrentTrace:
    sample_rate: float
    samples: np.ndarray  # A, mean current over [j, j + 1) / sample_rate
    provenance: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def seed(self) -> int:
        return int(self.provenance.get("seed", 0))

    def time(self) -> np.ndarray:
        return np.arange(len(self.samples)) / self.sample_rate


def _photons(stream, alpha, thickness, t_start, t_stop, seed_seq):
    rng = np.random.default_rng(seed_seq)
    peak = stream.rate * (1.0 + stream.modulation_depth)
    n = rng.poisson(peak * (t_stop - t_start))
    t = t_start + (t_stop - t_start) * rng.random(n)
    t.sort()
    x = rng.exponential(1.0 / alpha, n)
    if stream.modulation_depth > 0:
        # thinning to the rate(t) = rate * (1 + m cos(2 pi f t))
        accept = rng.random(n) * (1.0 + stream.modulation_depth) < 1.0 + stream.modulation_depth * np.cos(
            2 * math.pi * stream.modulation_freq * t
        )
        t, x = t[accept], x[accept]
    arrived = len(t)
    keep = x <= thickness
    return t[keep], x[keep], arrived


def simulate_photocurrent(
    g: DeviceGeometry,
    m: MaterialModel,
    stream: PhotonStream,
    *,
    sample_rate: float = 16e9,
    analysis_band: float = 1e9,
    max_events: float = 5e7,
    chunk_events: float = 2e5,
    threads: int = 1,
) -> CurrentTrace:
    """Synthesise the photocurrent of ``stream`` on a uniform time grid.

    Photons are generated in fixed time chunks, each from its own child of
    ``SeedSequence(stream.seed)``; the chunking does not depend on
    ``threads``, so traces are bit-identical for any thread count.
    """
    if sample_rate <= 2 * analysis_band:
        raise SimulationError(
            f"sample rate {sample_rate:g} Hz too low for analysis band {analysis_band:g} Hz"
        )
    expected = stream.rate * (1.0 + stream.modulation_depth) * stream.duration
    if expected > max_events:
        raise SimulationError(f"expected {expected:.3g} events exceeds cap {max_events:.3g}")
    n_samples = int(round(stream.duration * sample_rate))
    if n_samples < 1:
        raise SimulationError("stream shorter than one sample")

    v = carrier_velocities(g, m)
    tau_max = g.thickness / min(v.electron, v.hole)
    # photons arriving up to one transit time before t = 0 keep the trace stationary
    t_begin = -tau_max
    n_chunks = max(1, math.ceil(expected / chunk_events))
    edges = np.linspace(t_begin, stream.duration, n_chunks + 1)
    children = np.random.SeedSequence(stream.seed).spawn(n_chunks)
    jobs = [(edges[i], edges[i + 1], children[i]) for i in range(n_chunks)]

    def run(job):
        return _photons(stream, m.alpha, g.thickness, *job)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    t0 = np.concatenate([p[0] for p in parts])
    x = np.concatenate([p[1] for p in parts])
    arrived = sum(p[2] for p in parts)

    q_over_l = g.charge / g.thickness
    a_h = q_over_l * v.hole
    a_e = q_over_l * v.electron
    times = np.concatenate((t0, t0 + x / v.hole, t0 + (g.thickness - x) / v.electron))
    steps = np.concatenate(
        (np.full(t0.size, a_h + a_e), np.full(t0.size, -a_h), np.full(t0.size, -a_e))
    )

    pad = int(math.ceil(tau_max * sample_rate)) + 2
    size = n_samples + pad + 2
    u = times * sample_rate + pad
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    ok = base < size - 1
    slope = np.bincount(base[ok], weights=steps[ok] * (1.0 - frac[ok]), minlength=size)
    slope += np.bincount(base[ok] + 1, weights=steps[ok] * frac[ok], minlength=size)
    current = np.cumsum(slope)[pad : pad + n_samples]

    return CurrentTrace(
        sample_rate=float(sample_rate),
        samples=current,
        provenance={
            "seed": int(stream.seed),
            "rate": stream.rate,
            "duration": stream.duration,
            "modulation_freq": stream.modulation_freq,
            "modulation_depth": stream.modulation_depth,
            "arrived": int(arrived),
            "absorbed": int(t0.size),
            "in_window": int(np.count_nonzero((t0 >= 0) & (t0 < stream.duration))),
            "material": m.name,
            "thickness_m": g.thickness,
            "bias_v": g.bias,
            "chunks": n_chunks,
        },
    )


@dataclass
class PSDEstimate:
    freq_hz: np.ndarray
    psd: np.ndarray  # one-sided, A^2/Hz
    nperseg: int
    segments: int


def shot_noise_psd(trace: CurrentTrace, *, resolution_hz: float = 1e6, min_segments: int = 32) -> PSDEstimate:
    """One-sided Welch PSD: Hann window, 50 % overlap, mean removed per segment."""
    n = len(trace.samples)
    nperseg = 2 ** int(math.floor(math.log2(max(trace.sample_rate / resolution_hz, 2))))
    while nperseg > 64 and (n - nperseg) // (nperseg // 2) + 1 < min_segments:
        nperseg //= 2
    segments = (n - nperseg) // (nperseg // 2) + 1 if n >= nperseg else 0
    if segments < 16:
        raise SimulationError(f"trace of {n} samples too short for 16 Welch segments")
    f, p = signal.welch(
        trace.samples,
        fs=trace.sample_rate,
        window="hann",
        nperseg=nperseg,
        noverlap=nperseg // 2,
        detrend="constant",
        scaling="density",
    )
    return PSDEstimate(f, p, nperseg, segments)


def band_average(freq, values, edges):
    """Mean of ``values`` inside each ``[edges[i], edges[i+1])`` band."""
    freq = np.asarray(freq)
    values = np.asarray(values)
    idx = np.digitize(freq, edges) - 1
    out = np.full(len(edges) - 1, np.nan)
    counts = np.zeros(len(edges) - 1, dtype=int)
    for i in range(len(edges) - 1):
        sel = idx == i
        counts[i] = np.count_nonzero(sel)
        if counts[i]:
            out[i] = values[sel].mean()
    return out, counts


def sample_response(freq_hz, sample_rate):
    """Power response of bin averaging over one sample period."""
    return np.sinc(np.asarray(freq_hz) / sample_rate) ** 2


def theoretical_shot_psd(g, m, rate, freq_hz, *, sample_rate=None, transfer=None):
    """One-sided shot-noise PSD 2 rate alpha^2 (A^2 + B^2), optionally bin-averaged."""
    freqs = np.atleast_1d(np.asarray(freq_hz, dtype=float))
    out = np.array(
        [gain_integrals(g, m, 2 * math.pi * f, transfer=transfer).shot for f in freqs]
    )
    out *= 2.0 * rate * m.alpha**2
    if sample_rate:
        out *= sample_response(freqs, sample_rate)
    return out


def psd_shape_ratio(est: PSDEstimate, g, m, rate, edges, *, sample_rate=None, transfer=None):
    """Band-averaged measured/theoretical PSD, normalised to the first band.

    Theory is evaluated on the same Welch bins as the estimate, so the
    comparison carries no bin-centering bias.  Returns ``(band_centres,
    ratio, absolute_ratio)`` where ``absolute_ratio`` is the unnormalised
    measured/theory quotient.
    """
    edges = np.asarray(edges, dtype=float)
    sel = (est.freq_hz >= edges[0]) & (est.freq_hz < edges[-1])
    freqs = est.freq_hz[sel]
    theory = theoretical_shot_psd(g, m, rate, freqs, sample_rate=sample_rate, transfer=transfer)
    meas, counts = band_average(freqs, est.psd[sel], edges)
    theo, _ = band_average(freqs, theory, edges)
    if np.any(counts == 0):
        raise SimulationError("PSD resolution too coarse for the requested bands")
    absolute = meas / theo
    return 0.5 * (edges[:-1] + edges[1:]), absolute / absolute[0], absolute


@dataclass
class ToneEstimate:
    freq_hz: float
    amplitude: complex  # A, peak current of the tone
    noise_psd: float  # one-sided local background, A^2/Hz
    snr: float

    @property
    def power(self) -> float:
        return abs(self.amplitude) ** 2 / 2.0


def _lockin(samples, sample_rate, freq, block=1 << 20):
    # Hann-windowed single-bin DFT, evaluated blockwise to bound memory
    n = len(samples)
    acc = 0.0 + 0.0j
    wsum = 0.0
    w2 = 0.0
    for start in range(0, n, block):
        idx = np.arange(start, min(n, start + block))
        w = 0.5 - 0.5 * np.cos(2 * math.pi * idx / (n - 1))
        acc += np.sum(w * samples[idx] * np.exp(-2j * math.pi * freq * idx / sample_rate))
        wsum += w.sum()
        w2 += np.sum(w * w)
    return 2.0 * acc / wsum, w2 / wsum**2


def _remove_tone(samples, sample_rate, freq, amp, block=1 << 20):
    out = np.array(samples, dtype=float)
    for start in range(0, out.size, block):
        idx = np.arange(start, min(out.size, start + block))
        out[idx] -= (amp * np.exp(2j * math.pi * freq * idx / sample_rate)).real
    return out


def _background_level(psd: PSDEstimate, tone_hz, exclusion_hz, band_hz) -> float:
    """Shot floor at the tone from the PSD bins around it.

    A plain band mean would carry the curvature of A^2 + B^2 into the
    estimate, so a two-sided band is fitted with a quadratic evaluated at the
    tone.  Near DC the band is one-sided; the PSD is even in f and flat to
    second order there, so the mean over half the band is used instead.
    Bins at the tone and the DC bins (suppressed by mean removal and window
    leakage) are excluded.
    """
    df = psd.freq_hz[1] - psd.freq_hz[0]
    dist = np.abs(psd.freq_hz - tone_hz)
    two_sided = tone_hz > band_hz
    reach = band_hz if two_sided else 0.5 * band_hz
    sel = (dist > exclusion_hz) & (dist < reach) & (psd.freq_hz > 3 * df)
    if np.count_nonzero(sel) < 6:
        raise SimulationError(f"too few PSD bins for the background near {tone_hz:g} Hz")
    if not two_sided:
        return float(psd.psd[sel].mean())
    u = (psd.freq_hz[sel] - tone_hz) / band_hz
    return float(np.polynomial.polynomial.polyfit(u, psd.psd[sel], 2)[0])


def modulation_gain_psd(
    trace: CurrentTrace,
    modulation_freq: Optional[float] = None,
    *,
    exclusion_hz: float = 5e6,
    band_hz: float = 50e6,
    min_snr: float = 100.0,
    psd: Optional[PSDEstimate] = None,
) -> ToneEstimate:
    """Coherently demodulate the modulation tone and estimate its SNR.

    The local noise floor comes from the Welch PSD of the trace with the
    demodulated tone subtracted: a quadratic fit over the bins within
    ``band_hz`` of the tone, excluding ``exclusion_hz`` around it.  ``ToneNotResolvable`` is raised if
    the tone power is below ``min_snr`` times the variance of the demodulated
    amplitude.
    """
    if modulation_freq is None:
        modulation_freq = trace.provenance.get("modulation_freq")
    if not modulation_freq:
        raise ToneNotResolvable(0.0)
    x = trace.samples - trace.samples.mean()
    amp, wfactor = _lockin(x, trace.sample_rate, modulation_freq)
    if psd is None:
        # Welch segments can be shorter than the tone period; subtract the
        # coherent tone so it cannot leak into the background bins
        residual = CurrentTrace(trace.sample_rate, _remove_tone(x, trace.sample_rate, modulation_freq, amp))
        psd = shot_noise_psd(residual)
    noise = _background_level(psd, modulation_freq, exclusion_hz, band_hz)
    # variance of the demodulated complex amplitude for a white background
    var = 4.0 * (noise / 2.0) * trace.sample_rate * wfactor
    snr = abs(amp) ** 2 / var
    if not snr >= min_snr:
        raise ToneNotResolvable(snr)
    return ToneEstimate(float(modulation_freq), complex(amp), noise, float(snr))


def modulation_shot_ratio(
    modulated: CurrentTrace,
    shot: Optional[CurrentTrace] = None,
    *,
    exclusion_hz: float = 5e6,
    band_hz: float = 50e6,
) -> float:
    """Tone gain over shot-noise gain, normalised so the result estimates 1 - loss.

    With rate(t) = rate (1 + m cos wt) the tone amplitude is
    rate m alpha |A| and the shot PSD is 2 rate alpha^2 (A^2 + B^2), so
    2 |tone|^2 / (rate m^2 PSD) = A^2 / (A^2 + B^2).  The PSD is taken from
    ``shot`` (an unmodulated trace with the same rate) when given, using the
    same background fit as the tone estimate.
    """
    prov = modulated.provenance
    rate, depth = prov["rate"], prov["modulation_depth"]
    tone = modulation_gain_psd(modulated, exclusion_hz=exclusion_hz, band_hz=band_hz)
    if shot is None:
        background = tone.noise_psd
    else:
        if not math.isclose(shot.provenance["rate"], rate, rel_tol=1e-12):
            raise SimulationError("shot trace must use the same photon rate")
        est = shot_noise_psd(shot)
        background = _background_level(est, tone.freq_hz, exclusion_hz, band_hz)
    return 2.0 * abs(tone.amplitude) ** 2 / (rate * depth**2 * background)


def write_trace_binary(trace: CurrentTrace, path) -> None:
    """Header (magic, rate, seed, count) followed by little-endian float64 samples."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRACE_MAGIC, trace.sample_rate, trace.seed, len(trace.samples)))
        fh.write(np.asarray(trace.samples, dtype="<f8").tobytes())


def read_trace_binary(path) -> CurrentTrace:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, rate, seed, count = _HEADER.unpack(head)
        if magic != TRACE_MAGIC:
            raise ValueError(f"{path}: not a trace file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != count:
        raise ValueError(f"{path}: expected {count} samples, found {data.size}")
    return CurrentTrace(rate, data.astype(float), {"seed": seed})


def write_trace_csv(trace: CurrentTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time_s", "current_a"))
        for t, i in zip(trace.time(), trace.samples):
            w.writerow((f"{t:.17g}", f"{i:.17g}"))


def write_psd_csv(est: PSDEstimate, path, theory=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("freq_hz", "psd_a2_per_hz") + (("theory_a2_per_hz",) if theory is not None else ()))
        for i, (f, p) in enumerate(zip(est.freq_hz, est.psd)):
            row = [f"{f:.17g}", f"{p:.17g}"]
            if theory is not None:
                row.append(f"{theory[i]:.17g}")
            w.writerow(row)
