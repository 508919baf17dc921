"""Discrete beamsplitter model of distributed absorption.

The absorber is cut into ``M`` slices of width ``xi``.  Slice ``k`` is a
beamsplitter of power reflectance ``r = 1 - exp(-alpha xi)`` that taps the
travelling field ``T_k`` onto an ideal detector with response ``H_k =
H(omega; k xi)``; vacuum ``v_k`` enters through its back port:

    D_k     = sqrt(r) T_k + sqrt(1 - r) v_k        (detected)
    T_{k+1} = sqrt(1 - r) T_k - sqrt(r) v_k        (transmitted)
    T_1     = a_in

Linearising the photocurrent around a strong mean field gives a current
coefficient for every input mode (``a_in`` and each ``v_k``).  Those are
obtained here by back-propagating the detector sensitivities through the
recursion above, which is exactly the adjoint of composing the slice
transformations; nothing is copied from a closed-form sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .materials import MaterialModel
from .transport import DeviceGeometry, transfer_callable


@dataclass(frozen=True)
class BeamsplitterChain:
    alpha: float
    thickness: float
    slice_count: int
    omega: float
    samples: np.ndarray  # H_k, k = 1..M

    def __post_init__(self):
        if self.slice_count < 1:
            raise ValueError("slice_count must be >= 1")
        if len(self.samples) != self.slice_count:
            raise ValueError("need one transfer sample per slice")

    @property
    def slice_width(self) -> float:
        return self.thickness / self.slice_count

    @property
    def reflectance(self) -> float:
        return -math.expm1(-self.alpha * self.slice_width)

    def absorption_probabilities(self) -> tuple[np.ndarray, float]:
        """Per-slice absorption probabilities and the transmitted remainder."""
        r = self.reflectance
        k = np.arange(self.slice_count)
        return r * (1.0 - r) ** k, (1.0 - r) ** self.slice_count


def build_chain(
    g: DeviceGeometry,
    m: MaterialModel,
    omega: float,
    slice_count: int,
    *,
    transfer=None,
    samples: Optional[np.ndarray] = None,
    sample_position: str = "right",
) -> BeamsplitterChain:
    """Sample H for every slice unless ``samples`` is given.

    ``sample_position="right"`` uses the far edge ``k xi`` of slice ``k`` (the
    detector layout of the beamsplitter picture, first order in ``xi``);
    ``"mid"`` uses ``(k - 1/2) xi`` and converges at second order.
    """
    if samples is None:
        if transfer is None:
            transfer = transfer_callable(g, m)
        k = np.arange(1, slice_count + 1, dtype=float)
        if sample_position == "mid":
            k -= 0.5
        elif sample_position != "right":
            raise ValueError(f"unknown sample_position {sample_position!r}")
        xs = g.thickness * k / slice_count
        xs[-1] = min(xs[-1], g.thickness)
        samples = np.asarray(transfer(omega, xs), dtype=complex)
    return BeamsplitterChain(m.alpha, g.thickness, slice_count, float(omega), np.asarray(samples, dtype=complex))


@dataclass(frozen=True)
class ModeCoefficients:
    c_in: complex
    c_vac: np.ndarray  # one per back-port vacuum, k = 1..M
    lo_amplitudes: np.ndarray  # mean-field amplitude at each detector

    def norm2(self) -> float:
        return abs(self.c_in) ** 2 + float(np.sum(np.abs(self.c_vac) ** 2))


def lo_amplitudes(r: float, slice_count: int) -> np.ndarray:
    """Mean field reaching each detector for unit input amplitude (forward pass)."""
    amp = np.empty(slice_count)
    travelling = 1.0
    for k in range(slice_count):
        amp[k] = math.sqrt(r) * travelling
        travelling *= math.sqrt(1.0 - r)
    return amp


def mode_coefficients(chain: BeamsplitterChain) -> ModeCoefficients:
    """Photocurrent coefficients of ``a_in`` and of every vacuum input.

    Backward pass: ``s_k`` is the current sensitivity to the travelling field
    entering slice ``k``; the transmitted port after the last slice is not
    detected, so ``s_{M+1} = 0``.
    """
    r = chain.reflectance
    t = math.sqrt(1.0 - r)
    sr = math.sqrt(r)
    lo = lo_amplitudes(r, chain.slice_count)
    weight = lo * chain.samples  # sensitivity of the current to D_k
    c_vac = np.empty(chain.slice_count, dtype=complex)
    downstream = 0.0 + 0.0j
    for k in range(chain.slice_count - 1, -1, -1):
        c_vac[k] = t * weight[k] - sr * downstream
        downstream = sr * weight[k] + t * downstream
    return ModeCoefficients(c_in=complex(downstream), c_vac=c_vac, lo_amplitudes=lo)


def mode_matrix(r: float, slice_count: int) -> np.ndarray:
    """Orthogonal map from inputs (a_in, v_1..v_M) to outputs (D_1..D_M, T_{M+1}).

    Built by composing the 2x2 slice rotations one at a time; intended for
    small ``slice_count`` (cost O(M^3) memory-time for the products).
    """
    n = slice_count + 1
    # rows: current expression of each output in terms of inputs
    travelling = np.zeros(n)
    travelling[0] = 1.0
    rows = []
    for k in range(slice_count):
        vac = np.zeros(n)
        vac[k + 1] = 1.0
        rows.append(math.sqrt(r) * travelling + math.sqrt(1.0 - r) * vac)
        travelling = math.sqrt(1.0 - r) * travelling - math.sqrt(r) * vac
    rows.append(travelling)
    return np.array(rows)


def mode_coefficients_dense(chain: BeamsplitterChain) -> ModeCoefficients:
    """Same as :func:`mode_coefficients` via the explicit mode matrix (small M only)."""
    r = chain.reflectance
    mat = mode_matrix(r, chain.slice_count)
    lo = lo_amplitudes(r, chain.slice_count)
    weight = lo * chain.samples
    coeffs = weight @ mat[:-1, :]
    return ModeCoefficients(c_in=complex(coeffs[0]), c_vac=coeffs[1:], lo_amplitudes=lo)


def discrete_gains(chain: BeamsplitterChain) -> tuple[float, float]:
    """``(A_M, B_M)`` in the units of the continuum integrals.

    Absorption probabilities are ``alpha xi e^{-alpha x}`` to first order, so the
    current coefficients carry one extra factor alpha relative to A and B.
    """
    c = mode_coefficients(chain)
    a = abs(c.c_in) / chain.alpha
    b = math.sqrt(float(np.sum(np.abs(c.c_vac) ** 2))) / chain.alpha
    return a, b


def discrete_loss(chain: BeamsplitterChain) -> float:
    a, b = discrete_gains(chain)
    return b * b / (a * a + b * b)


def signal_phase(chain: BeamsplitterChain) -> float:
    return float(np.angle(mode_coefficients(chain).c_in))


@dataclass(frozen=True)
class QuadratureGains:
    component: str  # "I" or "Q"
    A: float
    B: float
    signal_phase: float
    vacuum_label: str


def _sideband_vectors(coef: np.ndarray, component: str) -> np.ndarray:
    # Coefficients on (a(w), a^dag(w), a(-w), a^dag(-w)) for each mode, for the
    # current I(w) = sum_m C_m [a_m(w) + a_m^dag(-w)] and its Hermitian partner.
    plus = np.stack([coef, np.zeros_like(coef), np.zeros_like(coef), coef], axis=-1)
    minus = np.stack([np.zeros_like(coef), coef.conj(), coef.conj(), np.zeros_like(coef)], axis=-1)
    if component == "I":
        return 0.5 * (plus + minus)
    if component == "Q":
        return (plus - minus) / 2j
    raise ValueError(component)


def sideband_components(chain: BeamsplitterChain, component: str) -> QuadratureGains:
    """Gains of the in-phase (``"I"``) or quadrature (``"Q"``) sideband component.

    Each mode's contribution is a quadrature whose amplitude is the norm of its
    coefficient vector over the four sideband operators.
    """
    c = mode_coefficients(chain)
    sig = _sideband_vectors(np.array([c.c_in]), component)[0]
    vac = _sideband_vectors(c.c_vac, component)
    a = float(np.linalg.norm(sig)) / chain.alpha
    b = float(np.linalg.norm(vac)) / chain.alpha
    phase = float(np.angle(c.c_in))
    if component == "Q":
        phase = math.remainder(phase + math.pi / 2, 2 * math.pi)
    return QuadratureGains(component, a, b, phase, f"x_vac_{component}")


def quadrature_phase_gains(chain: BeamsplitterChain) -> QuadratureGains:
    """Gains of the quadrature-phase component; must equal those of the in-phase one."""
    q = sideband_components(chain, "Q")
    i = sideband_components(chain, "I")
    if not (math.isclose(q.A, i.A, rel_tol=1e-12) and math.isclose(q.B, i.B, rel_tol=1e-12, abs_tol=1e-300)):
        raise AssertionError("I and Q sideband gains differ")
    return q


def iq_vacuum_overlap(chain: BeamsplitterChain) -> float:
    """Normalised inner product of the aggregated I and Q vacuum operators.

    Zero means the two vacuum terms are independent.
    """
    c = mode_coefficients(chain)
    vi = _sideband_vectors(c.c_vac, "I").ravel()
    vq = _sideband_vectors(c.c_vac, "Q").ravel()
    denom = np.linalg.norm(vi) * np.linalg.norm(vq)
    return float(abs(np.vdot(vi, vq)) / denom) if denom else 0.0


def convergence_table(g, m, omega, slice_counts, reference_loss, *, transfer=None, sample_position="right"):
    """Rows ``(M, xi, loss_M, |loss_M - reference|, observed order)`` for M-doubling runs."""
    rows = []
    prev_err = None
    for mcount in slice_counts:
        ch = build_chain(g, m, omega, mcount, transfer=transfer, sample_position=sample_position)
        lm = discrete_loss(ch)
        err = abs(lm - reference_loss)
        order = math.log2(prev_err / err) if prev_err and err > 0 else float("nan")
        rows.append((mcount, ch.slice_width, lm, err, order))
        prev_err = err
    return rows
