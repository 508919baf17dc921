"""Signal gain, vacuum gain and equivalent loss of a distributed absorber.

For a transfer function H(omega; x) and absorption coefficient alpha,

    A   = | int_0^L e^{-alpha x} H dx |
    B^2 = (1/alpha) int_0^L e^{-alpha x} | H - alpha e^{alpha x} G(x) |^2 dx,
          G(x) = int_x^L e^{-alpha x'} H(x') dx'
    loss = B^2 / (A^2 + B^2)

The double integral is evaluated in one pass: G on every quadrature node is the
sum of a within-panel tail (spectral integration matrix on Gauss-Legendre
nodes) and the integrals of all later panels.  Panels are uniform in x, fine
enough to follow the oscillation of H, merged with equal-absorption panels so
the steep e^{-alpha x} near the surface is resolved.  The panel set is
doubled until successive results agree; their difference is the reported
error estimate.

A and B carry the units of the integrals above (C m); only ratios are
physically meaningful.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate

from .materials import MaterialModel
from .transport import DeviceGeometry, carrier_velocities, transfer_callable

Transfer = Callable[[float, np.ndarray], np.ndarray]

CSV_COLUMNS = ("freq_hz", "A2", "B2", "shot", "loss", "loss_excess_dc", "theta_rad")


class QuadratureError(RuntimeError):
    def __init__(self, message, error_estimate=None, freq_hz=None):
        super().__init__(message)
        self.error_estimate = error_estimate
        self.freq_hz = freq_hz


@lru_cache(maxsize=8)
def _gauss_rule(n: int):
    """Nodes, weights and the tail matrix S[i, j] = int_{t_i}^{1} l_j(s) ds."""
    t, w = legendre.leggauss(n)
    coeffs = np.linalg.inv(legendre.legvander(t, n - 1))  # column j: Legendre coefficients of l_j
    p = legendre.legvander(t, n)
    tail = np.empty((n, n))
    tail[:, 0] = 1.0 - t
    for k in range(1, n):
        # int_t^1 P_k = -(P_{k+1}(t) - P_{k-1}(t)) / (2k + 1)
        tail[:, k] = -(p[:, k + 1] - p[:, k - 1]) / (2 * k + 1)
    return t, w, tail @ coeffs


def _base_edges(alpha: float, length: float, omega: float, v_min: Optional[float]) -> np.ndarray:
    if v_min is not None and omega != 0.0:
        n_uniform = max(4, math.ceil(abs(omega) * length / v_min / 2.0))
    else:
        n_uniform = 4
    uniform = np.linspace(0.0, length, n_uniform + 1)
    n_abs = min(24, max(2, math.ceil(alpha * length)))
    s = np.linspace(0.0, 1.0, n_abs + 1)[:-1]
    graded = np.append(-np.log1p(-s * -np.expm1(-alpha * length)) / alpha, length)
    edges = np.union1d(uniform, graded)
    edges[0], edges[-1] = 0.0, length
    keep = np.concatenate(([True], np.diff(edges) > 1e-12 * length))
    edges = edges[keep]
    edges[-1] = length
    return edges


def _refine(edges: np.ndarray, level: int) -> np.ndarray:
    if level == 0:
        return edges
    k = 2**level
    frac = np.arange(k) / k
    inner = edges[:-1, None] + np.diff(edges)[:, None] * frac[None, :]
    return np.concatenate((inner.ravel(), edges[-1:]))


def _integrals_on(edges, alpha, omega, transfer, nodes):
    t, w, tail = _gauss_rule(nodes)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = mid[:, None] + half[:, None] * t[None, :]
    h = np.asarray(transfer(omega, x.ravel()), dtype=complex).reshape(x.shape)
    decay = np.exp(-alpha * x)
    f = decay * h
    panel = half * (f @ w)
    later = np.concatenate((np.cumsum(panel[::-1])[::-1][1:], [0.0]))
    g = half[:, None] * (f @ tail.T) + later[:, None]
    signal = panel.sum()
    resid = h - alpha * g / decay
    b2 = float(np.sum(half * ((decay * np.abs(resid) ** 2) @ w))) / alpha
    return signal, b2


@dataclass(frozen=True)
class GainPoint:
    """Gains at one angular frequency."""

    omega: float
    signal: complex  # int_0^L e^{-alpha x} H dx
    B2: float
    signal_error: float
    B2_error: float

    @property
    def A(self) -> float:
        return abs(self.signal)

    @property
    def A2(self) -> float:
        return abs(self.signal) ** 2

    @property
    def B(self) -> float:
        return math.sqrt(max(self.B2, 0.0))

    @property
    def theta(self) -> float:
        return float(np.angle(self.signal))

    @property
    def shot(self) -> float:
        return self.A2 + self.B2

    @property
    def loss(self) -> float:
        return min(max(self.B2 / self.shot, 0.0), 1.0)


def gain_integrals(
    g: DeviceGeometry,
    m: MaterialModel,
    omega: float,
    *,
    transfer: Optional[Transfer] = None,
    rtol: float = 1e-11,
    nodes: int = 16,
    max_level: int = 9,
    min_level: int = 1,
) -> GainPoint:
    """Evaluate A e^{i theta} and B^2 at ``omega`` with an error estimate.

    ``transfer`` replaces the drift-model H(omega, x); it must be vectorised
    over ``x``.  Raises ``QuadratureError`` if ``max_level`` doublings do not
    reach ``rtol``.
    """
    if not math.isfinite(omega):
        raise ValueError("omega must be finite")
    alpha, length = m.alpha, g.thickness
    if alpha * length > 600:
        raise ValueError("alpha * L too large for the unscaled nested integral")
    v_min = None
    if transfer is None:
        transfer = transfer_callable(g, m)
        v = carrier_velocities(g, m)
        v_min = min(v.electron, v.hole)
    base = _base_edges(alpha, length, omega, v_min)

    prev = _integrals_on(base, alpha, omega, transfer, nodes)
    for level in range(1, max_level + 1):
        cur = _integrals_on(_refine(base, level), alpha, omega, transfer, nodes)
        d_sig = abs(cur[0] - prev[0])
        d_b2 = abs(cur[1] - prev[1])
        scale = math.sqrt(abs(cur[0]) ** 2 + cur[1])
        atol = 1e-14 * scale
        ok = d_sig <= rtol * abs(cur[0]) + atol and d_b2 <= rtol * cur[1] + atol**2
        prev_pt = prev
        prev = cur
        if ok and level >= min_level:
            return GainPoint(float(omega), complex(cur[0]), float(cur[1]), d_sig, d_b2)
    raise QuadratureError(
        f"gain integrals did not converge at omega={omega:g} rad/s "
        f"(signal error {abs(prev[0] - prev_pt[0]):.3g}, B^2 error {abs(prev[1] - prev_pt[1]):.3g})",
        error_estimate=(abs(prev[0] - prev_pt[0]), abs(prev[1] - prev_pt[1])),
        freq_hz=omega / (2 * math.pi),
    )


def signal_gain(g, m, omega, *, transfer=None, rtol=1e-11):
    """Return ``(A, theta)``: magnitude and phase of the weighted transfer integral."""
    p = gain_integrals(g, m, omega, transfer=transfer, rtol=rtol)
    return p.A, p.theta


def vacuum_gain(g, m, omega, *, transfer=None, rtol=1e-11) -> float:
    return gain_integrals(g, m, omega, transfer=transfer, rtol=rtol).B


def excess_loss(g, m, omega, *, transfer=None, rtol=1e-11) -> float:
    """Equivalent optical loss B^2 / (A^2 + B^2) at ``omega``."""
    return gain_integrals(g, m, omega, transfer=transfer, rtol=rtol).loss


def shot_noise_integral(g, m, omega, *, transfer=None) -> float:
    """(1/alpha) int_0^L e^{-alpha x} |H|^2 dx by adaptive quadrature.

    Deliberately independent of ``gain_integrals``; A^2 + B^2 must equal it.
    """
    if transfer is None:
        transfer = transfer_callable(g, m)
    alpha, length = m.alpha, g.thickness

    def integrand(x):
        return math.exp(-alpha * x) * abs(complex(transfer(omega, np.array([x]))[0])) ** 2

    pieces = np.linspace(0.0, length, 17)
    total = 0.0
    for a, b in zip(pieces[:-1], pieces[1:]):
        val, _ = integrate.quad(integrand, a, b, epsabs=0.0, epsrel=1e-13, limit=400)
        total += val
    return total / alpha


def dc_normalized_excess(loss, anchor=None):
    """Excess over an anchor loss: 1 - (1 - loss) / (1 - anchor).

    ``loss`` may be a :class:`GainSpectrum`; then its zero-frequency loss is the
    anchor unless one is given.  For plain arrays without an anchor the first
    (lowest-frequency) entry is used.
    """
    if isinstance(loss, GainSpectrum):
        if anchor is None:
            anchor = loss.anchor_loss
        loss = loss.loss
    arr = np.asarray(loss, dtype=float)
    if anchor is None:
        anchor = arr.ravel()[0]
    if anchor >= 1.0:
        raise ValueError("anchor loss of 1 cannot be normalised")
    out = 1.0 - (1.0 - arr) / (1.0 - anchor)
    return float(out) if out.ndim == 0 else out


def default_frequency_grid(fmin=10e6, fmax=3e9, points=200) -> np.ndarray:
    return np.logspace(math.log10(fmin), math.log10(fmax), points)


@dataclass
class GainSpectrum:
    freq_hz: np.ndarray
    A2: np.ndarray
    B2: np.ndarray
    theta: np.ndarray
    anchor_loss: float  # loss at omega = 0
    A_error: np.ndarray = field(repr=False, default=None)
    B2_error: np.ndarray = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    @property
    def shot(self) -> np.ndarray:
        return self.A2 + self.B2

    @property
    def loss(self) -> np.ndarray:
        return np.clip(self.B2 / self.shot, 0.0, 1.0)

    @property
    def loss_excess_dc(self) -> np.ndarray:
        return dc_normalized_excess(self.loss, self.anchor_loss)

    def rows(self):
        cols = (self.freq_hz, self.A2, self.B2, self.shot, self.loss, self.loss_excess_dc, self.theta)
        return [tuple(float(c[i]) for c in cols) for i in range(len(self.freq_hz))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow([f"{v:.17g}" for v in row])

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "anchor_loss": self.anchor_loss,
            "columns": list(CSV_COLUMNS),
            "rows": [list(r) for r in self.rows()],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def read_spectrum_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def loss_spectrum(
    g: DeviceGeometry,
    m: MaterialModel,
    freq_hz,
    *,
    transfer: Optional[Transfer] = None,
    rtol: float = 1e-11,
    threads: int = 1,
) -> GainSpectrum:
    """Evaluate the gains over a frequency grid in Hz.

    Points are independent; ``threads`` only changes wall time, never results.
    """
    freqs = np.atleast_1d(np.asarray(freq_hz, dtype=float))
    if freqs.size == 0:
        raise ValueError("empty frequency grid")

    def one(f):
        try:
            return gain_integrals(g, m, 2 * math.pi * f, transfer=transfer, rtol=rtol)
        except QuadratureError as exc:
            exc.freq_hz = f
            raise QuadratureError(f"at {f:g} Hz: {exc}", exc.error_estimate, f) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(one, freqs))
    else:
        points = [one(f) for f in freqs]
    anchor = gain_integrals(g, m, 0.0, transfer=transfer, rtol=rtol).loss

    return GainSpectrum(
        freq_hz=freqs,
        A2=np.array([p.A2 for p in points]),
        B2=np.array([p.B2 for p in points]),
        theta=np.array([p.theta for p in points]),
        anchor_loss=anchor,
        A_error=np.array([p.signal_error for p in points]),
        B2_error=np.array([p.B2_error for p in points]),
        meta={
            "material": m.name,
            "thickness_m": g.thickness,
            "bias_v": g.bias,
            "alpha_per_m": m.alpha,
        },
    )
