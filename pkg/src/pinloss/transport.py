"""Photocurrent of a single electron-hole pair in a uniform-field PIN layer.

Light enters at ``x = 0``.  A pair created at depth ``x`` splits: the hole
drifts back over ``x`` to the p contact, the electron forward over ``L - x``
to the n contact.  By Shockley-Ramo each carrier induces ``q v / L`` while it
moves, so the impulse response is the sum of two rectangles and its Fourier
transform is a sum of two phase-shifted sinc terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.constants import e as ELEMENTARY_CHARGE

from .materials import MaterialModel, drift_velocity


@dataclass(frozen=True)
class DeviceGeometry:
    """Intrinsic layer of thickness ``thickness`` (m) under reverse bias ``bias`` (V)."""

    thickness: float
    bias: float
    charge: float = ELEMENTARY_CHARGE

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError(f"thickness must be positive, got {self.thickness}")
        if not self.bias > 0:
            raise ValueError(f"bias must be positive, got {self.bias}")

    @property
    def field(self) -> float:
        return self.bias / self.thickness


@dataclass(frozen=True)
class CarrierVelocities:
    electron: float
    hole: float


def carrier_velocities(g: DeviceGeometry, m: MaterialModel) -> CarrierVelocities:
    return CarrierVelocities(
        electron=drift_velocity(m, "electron", g.field),
        hole=drift_velocity(m, "hole", g.field),
    )


def _check_depth(g: DeviceGeometry, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > g.thickness)) or np.any(~np.isfinite(x)):
        raise ValueError(f"absorption depth outside [0, {g.thickness}] m")
    return x


def transit_times(g: DeviceGeometry, m: MaterialModel, x):
    """Return ``(hole, electron)`` drift times in seconds for a pair created at ``x``."""
    x = _check_depth(g, x)
    v = carrier_velocities(g, m)
    hole = x / v.hole
    electron = (g.thickness - x) / v.electron
    if hole.ndim == 0:
        return float(hole), float(electron)
    return hole, electron


def impulse_response(g: DeviceGeometry, m: MaterialModel, t, x):
    """Current in amperes at time ``t`` after a pair is created at depth ``x``.

    The unit step is taken with Theta(0) = 1 on both edges of each rectangle.
    ``t`` and ``x`` broadcast against each other.
    """
    x = _check_depth(g, x)
    t = np.asarray(t, dtype=float)
    v = carrier_velocities(g, m)
    tau_h = x / v.hole
    tau_e = (g.thickness - x) / v.electron
    started = t >= 0
    h = (g.charge / g.thickness) * (
        v.hole * (started & (tau_h - t >= 0)) + v.electron * (started & (tau_e - t >= 0))
    )
    return float(h) if h.ndim == 0 else h


def _box_spectrum(omega: float, tau):
    # (1 - exp(-i w tau)) / (i w) written as tau * exp(-i w tau / 2) * sinc(w tau / 2);
    # no cancellation for small w tau, exact tau at w = 0.
    half = 0.5 * omega * tau
    return tau * np.exp(-1j * half) * np.sinc(half / np.pi)


def transfer_function(g: DeviceGeometry, m: MaterialModel, omega: float, x):
    """Fourier transform H(omega; x) = integral h(t; x) exp(-i omega t) dt, in C.

    Vectorised over ``x``; ``omega`` is a scalar angular frequency.
    """
    x = _check_depth(g, x)
    omega = float(omega)
    if omega == 0.0:
        h = np.full(x.shape, complex(g.charge))
        return complex(h) if h.ndim == 0 else h
    v = carrier_velocities(g, m)
    tau_h = x / v.hole
    tau_e = (g.thickness - x) / v.electron
    h = (g.charge / g.thickness) * (
        v.hole * _box_spectrum(omega, tau_h) + v.electron * _box_spectrum(omega, tau_e)
    )
    return complex(h) if h.ndim == 0 else h


def transfer_callable(g: DeviceGeometry, m: MaterialModel):
    """Bind geometry and material into ``H(omega, x)`` for the gain integrals."""

    def transfer(omega, x):
        return transfer_function(g, m, omega, x)

    return transfer


def max_transit_time(g: DeviceGeometry, m: MaterialModel) -> float:
    v = carrier_velocities(g, m)
    return g.thickness / min(v.electron, v.hole)
