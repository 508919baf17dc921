"""Absorption and drift-velocity data for photodiode semiconductors.

Material parameters live in small ``key = value`` text files so that they can
be edited without touching code.  Two defaults ship with the package:

* ``si_860nm``      silicon at 860 nm
* ``ingaas_1550nm`` lattice-matched In0.53Ga0.47As at 1550 nm

Carrier velocities follow the saturating law

    v(E) = mu E / (1 + (mu E / v_sat)**beta)**(1 / beta)

which is monotone, starts linearly with slope ``mu`` and approaches
``v_sat`` from below.  Electron velocity overshoot (relevant for InGaAs) is
not represented.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np

Carrier = Literal["electron", "hole"]

BUILTIN_MATERIALS = ("si_860nm", "ingaas_1550nm")

_NUMERIC_KEYS = (
    "wavelength_m",
    "alpha_per_m",
    "e_mobility",
    "e_vsat",
    "e_beta",
    "h_mobility",
    "h_vsat",
    "h_beta",
)
_REQUIRED_KEYS = ("name",) + _NUMERIC_KEYS


class MaterialError(ValueError):
    """Raised for unreadable or nonphysical material parameter files."""


@dataclass(frozen=True)
class VelocityLaw:
    """Saturating velocity-field law for one carrier species."""

    mobility: float  # m^2 / (V s)
    vsat: float  # m / s
    beta: float = 1.0

    def __call__(self, field):
        e = np.asarray(field, dtype=float)
        if np.any(e < 0):
            raise ValueError("electric field must be nonnegative")
        y = self.mobility * e / self.vsat
        # divide through by the larger of 1 and y so the power cannot overflow
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            small = y <= 1.0
            low = y / (1.0 + y**self.beta) ** (1.0 / self.beta)
            high = 1.0 / (1.0 + np.where(small, 1.0, y) ** -self.beta) ** (1.0 / self.beta)
        v = self.vsat * np.where(small, low, high)
        return float(v) if v.ndim == 0 else v


@dataclass(frozen=True)
class MaterialModel:
    name: str
    wavelength: float  # m
    alpha: float  # 1/m
    electron: VelocityLaw
    hole: VelocityLaw
    source_comment: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = {
            "wavelength_m": self.wavelength,
            "alpha_per_m": self.alpha,
            "e_mobility": self.electron.mobility,
            "e_vsat": self.electron.vsat,
            "e_beta": self.electron.beta,
            "h_mobility": self.hole.mobility,
            "h_vsat": self.hole.vsat,
            "h_beta": self.hole.beta,
        }
        for key, value in checks.items():
            if not math.isfinite(value) or value <= 0:
                raise MaterialError(f"nonpositive parameter: {_short(key)}")
        for key in ("e_beta", "h_beta"):
            if checks[key] < 1:
                raise MaterialError(f"shape exponent below 1: {key}")

    def velocity_law(self, carrier: Carrier) -> VelocityLaw:
        if carrier == "electron":
            return self.electron
        if carrier == "hole":
            return self.hole
        raise ValueError(f"unknown carrier {carrier!r}")

    def to_params(self) -> dict:
        return {
            "name": self.name,
            "wavelength_m": self.wavelength,
            "alpha_per_m": self.alpha,
            "e_mobility": self.electron.mobility,
            "e_vsat": self.electron.vsat,
            "e_beta": self.electron.beta,
            "h_mobility": self.hole.mobility,
            "h_vsat": self.hole.vsat,
            "h_beta": self.hole.beta,
            "source_comment": self.source_comment,
        }


def _short(key: str) -> str:
    # error messages name the physical quantity, e.g. "alpha"
    return "alpha" if key == "alpha_per_m" else key


def drift_velocity(material: MaterialModel, carrier: Carrier, field):
    """Drift velocity in m/s of ``carrier`` at field strength ``field`` (V/m)."""
    return material.velocity_law(carrier)(field)


def parse_material(text: str, origin: str = "<text>") -> MaterialModel:
    """Parse the ``key = value`` material format.

    Blank lines and lines starting with ``#`` are ignored.  Every key listed in
    ``_REQUIRED_KEYS`` must be present; ``source_comment`` is optional.
    """
    params: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MaterialError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise MaterialError(f"{origin}:{lineno}: empty key")
        params[key] = value

    missing = [k for k in _REQUIRED_KEYS if k not in params]
    if missing:
        raise MaterialError(f"missing field: {', '.join(missing)}")

    values: dict[str, float] = {}
    for key in _NUMERIC_KEYS:
        try:
            values[key] = float(params[key])
        except ValueError:
            raise MaterialError(f"parse failure in field {key}: {params[key]!r}") from None

    return MaterialModel(
        name=params["name"],
        wavelength=values["wavelength_m"],
        alpha=values["alpha_per_m"],
        electron=VelocityLaw(values["e_mobility"], values["e_vsat"], values["e_beta"]),
        hole=VelocityLaw(values["h_mobility"], values["h_vsat"], values["h_beta"]),
        source_comment=params.get("source_comment", ""),
    )


def load_material(source: str | Path) -> MaterialModel:
    """Load a material from a file path or the name of a shipped default.

    Inline parameter text (anything containing a newline) is parsed directly.
    """
    if isinstance(source, str) and "\n" in source:
        return parse_material(source)
    if isinstance(source, str) and source in BUILTIN_MATERIALS:
        text = resources.files("pinloss.data").joinpath(f"{source}.txt").read_text()
        return parse_material(text, origin=source)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"material file not found: {path}")
    return parse_material(path.read_text(), origin=str(path))


def serialize_material(material: MaterialModel) -> str:
    lines = [f"# {material.name}"]
    for key, value in material.to_params().items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def material_summary(material: MaterialModel, field: float) -> dict:
    """Velocities and penetration depth at ``field``, for reports."""
    return {
        **asdict(material),
        "field_v_per_m": field,
        "electron_velocity": drift_velocity(material, "electron", field),
        "hole_velocity": drift_velocity(material, "hole", field),
        "penetration_depth_m": 1.0 / material.alpha,
    }
