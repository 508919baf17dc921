"""Excess optical loss of PIN photodiodes in CW homodyne detection.

Distributed absorption spreads photocarrier creation over the depletion
layer, so different depths reach the contacts with different delays.  At
high sideband frequencies the partial currents no longer add coherently and
part of the detected noise behaves like vacuum admitted by an optical loss.
This package computes that loss from carrier transport, checks it with a
discrete beamsplitter model and a Monte-Carlo photocurrent, and provides the
measurement-side analysis (squeezing fits, loss budgets, spectra ratios).
"""

from importlib.metadata import PackageNotFoundError, version

from .materials import MaterialError, MaterialModel, load_material
from .transport import DeviceGeometry, impulse_response, transfer_function
from .spectra import GainSpectrum, excess_loss, gain_integrals, loss_spectrum
from .measurement import compose_losses, fit_phase_scan, quadrature_variance, residual_excess

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source tree without install
    __version__ = "0.1.0"

__all__ = [
    "DeviceGeometry",
    "GainSpectrum",
    "MaterialError",
    "MaterialModel",
    "compose_losses",
    "excess_loss",
    "fit_phase_scan",
    "gain_integrals",
    "impulse_response",
    "load_material",
    "loss_spectrum",
    "quadrature_variance",
    "residual_excess",
    "transfer_function",
]
