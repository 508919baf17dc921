"""Measurement-side analysis: squeezing phase scans, loss budgets and the
shot-noise / modulation-gain loss estimator.

Conventions
-----------
* Losses are fractions in [0, 1], never percent.
* ``R`` is the linear variance of the squeezed quadrature relative to shot
  noise (``R <= 1``); it multiplies ``cos^2`` in the variance model and is
  quoted in dB as ``-10 log10 R``.
* Spectral powers are linear; subtraction never happens in dB.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.ndimage import median_filter


class MeasurementError(ValueError):
    pass


# --------------------------------------------------------------------------
# squeezing phase scans


def quadrature_variance(theta, loss: float, squeezing: float):
    """Shot-noise-normalised variance after a loss, squeezed quadrature at theta = 0."""
    if not squeezing > 0:
        raise MeasurementError("squeezing ratio R must be positive")
    if not 0.0 <= loss <= 1.0:
        raise MeasurementError("loss must lie in [0, 1]")
    theta = np.asarray(theta, dtype=float)
    c2 = np.cos(theta) ** 2
    v = loss + (1.0 - loss) * (c2 * squeezing + (1.0 - c2) / squeezing)
    return float(v) if v.ndim == 0 else v


def ratio_from_db(db: float) -> float:
    return 10.0 ** (-db / 10.0)


def ratio_to_db(ratio: float) -> float:
    return -10.0 * math.log10(ratio)


@dataclass
class PhaseScan:
    theta: np.ndarray
    variance: np.ndarray
    weight: Optional[np.ndarray] = None
    freq_hz: Optional[float] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.variance = np.asarray(self.variance, dtype=float)
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=float)
        if self.theta.shape != self.variance.shape or self.theta.ndim != 1:
            raise MeasurementError("theta and variance must be 1-D arrays of equal length")
        if self.weight is not None and self.weight.shape != self.theta.shape:
            raise MeasurementError("weight length differs from theta")
        if np.any(~np.isfinite(self.variance)) or np.any(self.variance <= 0):
            raise MeasurementError("variances must be positive")


def synthetic_scan(loss, squeezing, theta0=0.0, points=100, span=2 * math.pi, *, noise=0.0, rng=None, freq_hz=None):
    """Scan generated from the variance model, with optional multiplicative Gaussian noise."""
    theta = np.linspace(0.0, span, points, endpoint=False)
    v = quadrature_variance(theta - theta0, loss, squeezing)
    if noise:
        rng = np.random.default_rng(rng)
        v = v * (1.0 + noise * rng.standard_normal(points))
    return PhaseScan(theta, v, freq_hz=freq_hz)


REFERENCE_SCANS = {
    # fitted values reported for the two sideband frequencies
    "0hz": {"loss": 0.166, "squeezing_db": 9.06, "freq_hz": 0.0},
    "500mhz": {"loss": 0.274, "squeezing_db": 9.47, "freq_hz": 500.6e6},
}


def reference_scan(name: str, *, theta0=0.3, points=100) -> PhaseScan:
    p = REFERENCE_SCANS[name]
    return synthetic_scan(p["loss"], ratio_from_db(p["squeezing_db"]), theta0, points, freq_hz=p["freq_hz"])


@dataclass
class FitResult:
    loss: float
    squeezing: float  # R, linear, <= 1
    theta0: float  # rad, in [-pi/2, pi/2)
    loss_stderr: float
    squeezing_stderr: float
    theta0_stderr: float
    residual_norm: float
    covariance: list
    loss_identifiable: bool = True
    freq_hz: Optional[float] = None

    @property
    def squeezing_db(self) -> float:
        return ratio_to_db(self.squeezing)

    @property
    def antisqueezing_db(self) -> float:
        return 10.0 * math.log10(self.loss + (1 - self.loss) / self.squeezing)

    @property
    def loss_percent(self) -> float:
        return 100.0 * self.loss

    def min_variance(self) -> float:
        return self.loss + (1.0 - self.loss) * min(self.squeezing, 1.0 / self.squeezing)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["squeezing_db"] = self.squeezing_db
        d["loss_percent"] = self.loss_percent
        return d


def _linear_harmonic_fit(theta, v, w):
    # V = c0 + c1 cos 2theta + c2 sin 2theta is exact for the variance model
    x = np.column_stack((np.ones_like(theta), np.cos(2 * theta), np.sin(2 * theta)))
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(x * sw[:, None], v * sw, rcond=None)
    return coef


def _params_from_harmonics(c0, c1, c2):
    amp = math.hypot(c1, c2)
    vmin, vmax = c0 - amp, c0 + amp
    theta0 = 0.5 * math.atan2(-c2, -c1)  # minimum of the cos 2(theta - theta0) term
    if vmin >= 1.0 or vmax <= 1.0 or amp == 0.0:
        return None
    r = (1.0 - vmin) / (vmax - 1.0)
    loss = 1.0 - (1.0 - vmin) / (1.0 - r)
    return min(max(loss, 0.0), 1.0 - 1e-12), r, theta0


def _wrap_half(theta):
    return (theta + math.pi / 2) % math.pi - math.pi / 2


def fit_phase_scan(
    scan: PhaseScan,
    *,
    starts: Sequence[float] = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4),
    flat_tol: float = 1e-12,
) -> FitResult:
    """Weighted least squares for (loss, R, theta0) with relative residuals.

    Starting points: the closed-form inversion of the exact harmonic content
    of the model, plus a multi-start over ``theta0`` against min/max swaps.
    The reported solution has ``R <= 1`` (relabelled by a quarter-period
    shift if needed).
    """
    theta, v = scan.theta, scan.variance
    if theta.size < 8:
        raise MeasurementError("need at least 8 scan points")
    if np.ptp(theta) < math.pi - 1e-9:
        raise MeasurementError("scan must span at least pi")
    w = np.ones_like(v) if scan.weight is None else scan.weight

    if np.ptp(v) <= flat_tol * np.max(v):
        # vacuum: R = 1 makes the loss unidentifiable
        return FitResult(
            loss=0.0, squeezing=1.0, theta0=0.0,
            loss_stderr=math.inf, squeezing_stderr=0.0, theta0_stderr=math.inf,
            residual_norm=float(np.linalg.norm(v - 1.0)), covariance=[],
            loss_identifiable=False, freq_hz=scan.freq_hz,
        )

    sw = np.sqrt(w)

    def residual(p):
        loss, log_r, th0 = p
        return sw * (quadrature_variance(theta - th0, loss, math.exp(log_r)) - v) / v

    guesses = []
    closed = _params_from_harmonics(*_linear_harmonic_fit(theta, v, w))
    if closed is not None:
        guesses.append((closed[0], math.log(closed[1]), closed[2]))
    vmin = float(v.min())
    vmax = float(v.max())
    r_guess = min(max(vmin, 1e-3), 0.999)
    for th in starts:
        guesses.append((0.5 * max(0.0, min(vmin, 1.0)), math.log(r_guess) if vmax > 1 else 0.0, th))

    best = None
    for g0 in guesses:
        x0 = np.array([min(max(g0[0], 0.0), 1.0 - 1e-9), g0[1], g0[2]])
        sol = optimize.least_squares(
            residual, x0, bounds=([0.0, -30.0, -np.inf], [1.0, 30.0, np.inf]),
            method="trf", x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
        )
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or not best.success:
        raise MeasurementError(f"phase-scan fit did not converge: {best.message if best else ''}")

    loss, log_r, th0 = best.x
    if log_r > 0:
        log_r = -log_r
        th0 += math.pi / 2
    th0 = _wrap_half(th0)
    r = math.exp(log_r)

    dof = max(theta.size - 3, 1)
    s2 = 2.0 * best.cost / dof
    jac = best.jac
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.inf)
    # log R -> R
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(
        loss=float(loss), squeezing=r, theta0=th0,
        loss_stderr=float(se[0]), squeezing_stderr=float(r * se[1]), theta0_stderr=float(se[2]),
        residual_norm=float(np.linalg.norm(best.fun)), covariance=cov.tolist(),
        freq_hz=scan.freq_hz,
    )


def read_phase_scan(path) -> PhaseScan:
    """CSV with columns ``theta_rad, variance[, weight]``; ``# freq_hz=...`` header optional."""
    freq = None
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key.strip() == "freq_hz":
                    freq = float(val)
                continue
            lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"theta_rad", "variance"} <= set(reader.fieldnames):
        raise MeasurementError(f"{path}: expected columns theta_rad, variance")
    has_w = "weight" in reader.fieldnames
    try:
        for r in reader:
            rows.append((float(r["theta_rad"]), float(r["variance"]), float(r["weight"]) if has_w else 1.0))
    except (TypeError, ValueError) as exc:
        raise MeasurementError(f"{path}: malformed row ({exc})") from None
    if not rows:
        raise MeasurementError(f"{path}: no data rows")
    arr = np.array(rows)
    return PhaseScan(arr[:, 0], arr[:, 1], arr[:, 2] if has_w else None, freq)


def write_phase_scan(scan: PhaseScan, path) -> None:
    with open(path, "w", newline="") as fh:
        if scan.freq_hz is not None:
            fh.write(f"# freq_hz={scan.freq_hz!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("theta_rad", "variance") + (("weight",) if scan.weight is not None else ()))
        for i in range(scan.theta.size):
            row = [f"{scan.theta[i]:.17g}", f"{scan.variance[i]:.17g}"]
            if scan.weight is not None:
                row.append(f"{scan.weight[i]:.17g}")
            w.writerow(row)


# --------------------------------------------------------------------------
# loss budgets


@dataclass
class LossBudget:
    factors: dict[str, float]
    total: float
    label: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "factors": dict(self.factors), "total": self.total}


def _check_factor(name, value):
    if not (0.0 <= value < 1.0) or not math.isfinite(value):
        raise MeasurementError(f"loss factor {name!r} = {value} outside [0, 1)")


def compose_losses(factors: Mapping[str, float] | Sequence[float], label: str = "") -> LossBudget:
    """Total loss of independent stages, 1 - prod(1 - L_k)."""
    if not isinstance(factors, Mapping):
        factors = {f"factor_{i}": float(v) for i, v in enumerate(factors)}
    for name, value in factors.items():
        _check_factor(name, value)
    transmission = math.prod(1.0 - v for v in factors.values())
    return LossBudget(dict(factors), 1.0 - transmission, label)


def residual_excess(measured_total: float, budget_total: float) -> float:
    """Loss left unexplained by a budget: 1 - (1 - measured) / (1 - budget).

    Negative results are returned as-is (with a warning) so calibration errors
    stay visible.
    """
    if budget_total >= 1.0:
        raise MeasurementError("budget total of 1 leaves nothing to attribute")
    for name, v in (("measured_total", measured_total), ("budget_total", budget_total)):
        if not 0.0 <= v < 1.0:
            raise MeasurementError(f"{name} = {v} outside [0, 1)")
    excess = 1.0 - (1.0 - measured_total) / (1.0 - budget_total)
    if excess < 0:
        warnings.warn(f"measured loss {measured_total} below budget {budget_total}; negative excess", stacklevel=2)
    return excess


def infer_qe_from_budget(measured_total: float, other_factors: Mapping[str, float] | Sequence[float]) -> float:
    """Photodiode loss that closes the budget: 1 - measured = (1 - L_pd) prod(1 - L_k)."""
    others = compose_losses(other_factors)
    pd = 1.0 - (1.0 - measured_total) / (1.0 - others.total)
    if pd < 0:
        raise MeasurementError(
            f"infeasible: other factors already total {others.total:.4f} > measured {measured_total:.4f}"
        )
    return pd


def load_budget(path) -> tuple[LossBudget, Optional[float]]:
    """Budget JSON: ``{"label": str, "factors": {name: fraction}, "measured_total": fraction?}``."""
    try:
        data = json.loads(Path(path).read_text())
        factors = {str(k): float(v) for k, v in data["factors"].items()}
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise MeasurementError(f"{path}: malformed budget file ({exc})") from None
    measured = data.get("measured_total")
    return compose_losses(factors, data.get("label", "")), (None if measured is None else float(measured))


# --------------------------------------------------------------------------
# shot-noise versus modulation-gain estimator


@dataclass
class MeasuredSpectra:
    """Linear power spectra on a common frequency grid.

    ``averages`` is the number of independent power averages behind every
    PSD point; it sets the statistical error of the noise spectra.
    ``gain_rel_sigma`` is the relative 1-sigma error of the gain traces.
    """

    freq_hz: np.ndarray
    dut_shot: np.ndarray
    ref_shot: np.ndarray
    circuit: np.ndarray
    dut_gain: np.ndarray
    ref_gain: np.ndarray
    averages: float = math.inf
    gain_rel_sigma: float = 0.0
    ref_circuit: Optional[np.ndarray] = None

    COLUMNS = ("freq_hz", "dut_shot", "ref_shot", "circuit", "dut_gain", "ref_gain")

    def __post_init__(self):
        for name in self.COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.ref_circuit is not None:
            self.ref_circuit = np.asarray(self.ref_circuit, dtype=float)
        n = self.freq_hz.shape
        arrays = [getattr(self, c) for c in self.COLUMNS] + ([self.ref_circuit] if self.ref_circuit is not None else [])
        if any(a.shape != n for a in arrays):
            raise MeasurementError("all spectra must share the frequency grid")
        for name in self.COLUMNS[1:]:
            if np.any(getattr(self, name) <= 0):
                raise MeasurementError(f"{name} must be positive")


@dataclass
class LossEstimate:
    freq_hz: np.ndarray
    loss: np.ndarray
    sigma: np.ndarray
    shot_snr_db: np.ndarray
    flags: list = field(default_factory=list)  # per point: "", "low_snr", "negative_power", "spike"

    def to_rows(self):
        return [
            (float(f), float(l), float(s), float(snr), flag)
            for f, l, s, snr, flag in zip(self.freq_hz, self.loss, self.sigma, self.shot_snr_db, self.flags)
        ]


def estimate_loss_from_spectra(
    data: MeasuredSpectra,
    *,
    anchor_band: tuple[float, float] = (5e6, 20e6),
    snr_threshold_db: float = 5.0,
    spike_window: int = 0,
    spike_sigma: float = 5.0,
) -> LossEstimate:
    """Loss spectrum from device/reference shot-noise and modulation-gain spectra.

    1. subtract circuit noise from both shot spectra (linear power);
    2. divide device by reference, separately for shot noise and gain;
    3. form gain_ratio / shot_ratio and normalise it to unit mean over
       ``anchor_band``;
    4. loss = 1 - normalised quotient;
    5. propagate the averaging noise of the PSDs and the gain error;
    6. optionally reject narrow spikes against a running median of width
       ``spike_window`` points.

    The result is the loss in excess of the anchor band:
    ``1 - (1 - L(f)) / mean_anchor(1 - L)``.
    """
    f = data.freq_hz
    ref_circ = data.circuit if data.ref_circuit is None else data.ref_circuit
    dut_net = data.dut_shot - data.circuit
    ref_net = data.ref_shot - ref_circ
    flags = [""] * f.size
    bad = (dut_net <= 0) | (ref_net <= 0)
    for i in np.flatnonzero(bad):
        flags[i] = "negative_power"

    with np.errstate(divide="ignore", invalid="ignore"):
        shot_ratio = np.where(bad, np.nan, dut_net / ref_net)
        gain_ratio = data.dut_gain / data.ref_gain
        snr_db = 10.0 * np.log10(data.dut_shot / data.circuit - 1.0)

    anchor = (f >= anchor_band[0]) & (f <= anchor_band[1]) & ~bad
    if not np.any(anchor):
        raise MeasurementError(f"cannot normalize: no valid points in anchor band {anchor_band}")
    # normalising the gain-to-shot quotient keeps the reference response
    # cancelled pointwise, also inside the anchor band
    quotient = gain_ratio / shot_ratio
    loss = 1.0 - quotient / quotient[anchor].mean()

    # relative 1-sigma of each averaged PSD is P / sqrt(averages)
    k = 1.0 / math.sqrt(data.averages) if math.isfinite(data.averages) else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_dut = k * np.hypot(data.dut_shot, data.circuit) / dut_net
        rel_ref = k * np.hypot(data.ref_shot, ref_circ) / ref_net
    rel_shot = np.hypot(rel_dut, rel_ref)
    n_anchor = np.count_nonzero(anchor)
    rel_anchor = math.sqrt(np.nanmean(rel_shot[anchor] ** 2) / n_anchor) if n_anchor else 0.0
    rel_gain = data.gain_rel_sigma * math.sqrt(2.0)
    rel = np.sqrt(rel_shot**2 + rel_gain**2 + rel_anchor**2 + rel_gain**2 / max(n_anchor, 1))
    sigma = np.abs(1.0 - loss) * rel

    for i in np.flatnonzero(~bad & (snr_db < snr_threshold_db)):
        flags[i] = "low_snr"

    if spike_window and spike_window > 1:
        med = median_filter(np.nan_to_num(loss, nan=np.nanmedian(loss)), size=spike_window, mode="nearest")
        spikes = np.abs(loss - med) > spike_sigma * np.maximum(sigma, 1e-12)
        for i in np.flatnonzero(spikes & ~bad):
            flags[i] = "spike"
        loss = np.where(spikes, np.nan, loss)

    loss = np.where(bad, np.nan, loss)
    sigma = np.where(bad, np.nan, sigma)
    return LossEstimate(f, loss, sigma, snr_db, flags)


def synthesize_measured_spectra(
    freq_hz,
    signal_gain2,
    shot_gain2,
    *,
    electronics=None,
    reference=None,
    modulator=None,
    shot_to_circuit_db: float = math.inf,
    averages: float = math.inf,
    gain_rel_sigma: float = 0.0,
    rng=None,
) -> MeasuredSpectra:
    """Forward model of the two-detector calibration experiment.

    ``signal_gain2`` and ``shot_gain2`` are the device's A^2 and A^2 + B^2.
    ``electronics``, ``reference`` (reference-detector power response) and
    ``modulator`` are arbitrary positive responses that the estimator must
    cancel; defaults are smooth roll-offs.  The circuit noise sits
    ``shot_to_circuit_db`` below the device shot noise at the lowest
    frequency.  Finite ``averages`` adds Gaussian noise of relative size
    ``1/sqrt(averages)`` to every PSD.
    """
    f = np.asarray(freq_hz, dtype=float)
    if electronics is None:
        electronics = 1.0 / (1.0 + (f / 1.5e9) ** 2) * (1.0 + 0.1 * np.sin(f / 1.7e8))
    if reference is None:
        reference = 1.0 / (1.0 + (f / 5e9) ** 2)
    if modulator is None:
        modulator = 1.0 / (1.0 + (f / 3e9) ** 2)
    a2 = np.asarray(signal_gain2, dtype=float) / signal_gain2[0]
    s2 = np.asarray(shot_gain2, dtype=float) / shot_gain2[0]
    dut_shot_clean = electronics * s2
    ref_shot_clean = electronics * reference
    if math.isfinite(shot_to_circuit_db):
        circuit = dut_shot_clean[0] * 10 ** (-shot_to_circuit_db / 10) * electronics / electronics[0]
    else:
        circuit = np.full_like(f, 1e-300)
    dut_shot = dut_shot_clean + circuit
    ref_shot = ref_shot_clean + circuit
    dut_gain = electronics * modulator * a2
    ref_gain = electronics * modulator * reference

    if math.isfinite(averages) or gain_rel_sigma:
        rng = np.random.default_rng(rng)
        k = 1.0 / math.sqrt(averages) if math.isfinite(averages) else 0.0
        dut_shot = dut_shot * (1 + k * rng.standard_normal(f.size))
        ref_shot = ref_shot * (1 + k * rng.standard_normal(f.size))
        circuit_meas = circuit * (1 + k * rng.standard_normal(f.size))
        dut_gain = dut_gain * (1 + gain_rel_sigma * rng.standard_normal(f.size))
        ref_gain = ref_gain * (1 + gain_rel_sigma * rng.standard_normal(f.size))
    else:
        circuit_meas = circuit
    return MeasuredSpectra(f, dut_shot, ref_shot, circuit_meas, dut_gain, ref_gain, averages, gain_rel_sigma)


def read_measured_spectra(path, *, averages=math.inf, gain_rel_sigma=0.0) -> MeasuredSpectra:
    """CSV bundle with columns ``freq_hz, dut_shot, ref_shot, circuit, dut_gain, ref_gain``
    (optional ``ref_circuit``)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = set(MeasuredSpectra.COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise MeasurementError(f"{path}: missing columns {sorted(missing)}")
        try:
            rows = list(reader)
            cols = {c: np.array([float(r[c]) for r in rows]) for c in reader.fieldnames}
        except (TypeError, ValueError) as exc:
            raise MeasurementError(f"{path}: malformed row ({exc})") from None
    return MeasuredSpectra(
        *(cols[c] for c in MeasuredSpectra.COLUMNS),
        averages=averages, gain_rel_sigma=gain_rel_sigma, ref_circuit=cols.get("ref_circuit"),
    )


def write_measured_spectra(data: MeasuredSpectra, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MeasuredSpectra.COLUMNS)
        for row in zip(*(getattr(data, c) for c in MeasuredSpectra.COLUMNS)):
            w.writerow([f"{v:.17g}" for v in row])
