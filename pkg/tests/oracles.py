"""Independent reference values for the gain integrals.

Nothing here imports the package: the drift velocities, the transfer
function (exponential form, no sinc rewrite) and the nested integral for
the vacuum gain are written out directly and integrated with adaptive
``scipy.integrate.quad``.  Running the module regenerates
``data/oracle_values.json``; the test suite compares against the frozen file
and, in one slow test, against a fresh evaluation.
"""

import json
import math
import warnings
from pathlib import Path

import numpy as np
from scipy import integrate

Q = 1.602176634e-19

SI = dict(alpha=48000.0, mu_e=0.135, vs_e=1e5, b_e=2.0, mu_h=0.048, vs_h=1e5, b_h=1.0)
INGAAS = dict(alpha=7e5, mu_e=1.2, vs_e=7e4, b_e=2.0, mu_h=0.03, vs_h=5e4, b_h=1.0)

CASES = [
    # (label, material, thickness, bias, frequency)
    ("si_100um_100V_0Hz", SI, 100e-6, 100.0, 0.0),
    ("si_100um_100V_10MHz", SI, 100e-6, 100.0, 10e6),
    ("si_100um_100V_200MHz", SI, 100e-6, 100.0, 200e6),
    ("si_100um_100V_500MHz", SI, 100e-6, 100.0, 500e6),
    ("si_100um_100V_930MHz", SI, 100e-6, 100.0, 930e6),
    ("si_100um_20V_500MHz", SI, 100e-6, 20.0, 500e6),
    ("si_100um_200V_1GHz", SI, 100e-6, 200.0, 1e9),
    ("ingaas_10um_20V_1GHz", INGAAS, 10e-6, 20.0, 1e9),
]


def velocity(mu, vs, beta, field):
    ve = mu * field
    return ve / (1.0 + (ve / vs) ** beta) ** (1.0 / beta)


def make_h(mat, length, bias, omega):
    e = bias / length
    vh = velocity(mat["mu_h"], mat["vs_h"], mat["b_h"], e)
    ve = velocity(mat["mu_e"], mat["vs_e"], mat["b_e"], e)

    def box(v, tau):
        if omega == 0.0:
            return v * tau
        return v * (1.0 - np.exp(-1j * omega * tau)) / (1j * omega)

    def h(x):
        return (Q / length) * (box(vh, x / vh) + box(ve, (length - x) / ve))

    return h, max(length / vh, length / ve)


def _cquad(f, a, b, points=None):
    # tail integrals over tiny ranges trip quad's roundoff heuristic harmlessly
    warnings.simplefilter("ignore", integrate.IntegrationWarning)
    kw = dict(epsabs=0.0, epsrel=1e-12, limit=400)
    if points is not None:
        kw["points"] = points
    re = integrate.quad(lambda x: f(x).real, a, b, **kw)[0]
    im = integrate.quad(lambda x: f(x).imag, a, b, **kw)[0]
    return re + 1j * im


def gains(mat, length, bias, freq):
    alpha = mat["alpha"]
    omega = 2 * math.pi * freq
    h, _ = make_h(mat, length, bias, omega)
    brk = list(np.linspace(0, length, 41)[1:-1])
    signal = _cquad(lambda x: np.exp(-alpha * x) * h(x), 0.0, length, brk)

    def tail(x):
        pts = [p for p in brk if p > x]
        return _cquad(lambda y: np.exp(-alpha * y) * h(y), x, length, pts or None)

    def b_integrand(x):
        d = h(x) - alpha * math.exp(alpha * x) * tail(x)
        return math.exp(-alpha * x) * abs(d) ** 2

    b2 = integrate.quad(b_integrand, 0.0, length, points=brk, epsabs=0.0, epsrel=1e-10, limit=400)[0] / alpha
    shot = integrate.quad(
        lambda x: math.exp(-alpha * x) * abs(h(x)) ** 2, 0.0, length, points=brk, epsabs=0.0, epsrel=1e-12, limit=400
    )[0] / alpha
    a2 = abs(signal) ** 2
    return {"A2": a2, "B2": b2, "shot": shot, "theta": math.atan2(signal.imag, signal.real), "loss": b2 / (a2 + b2)}


def compute_all():
    out = {}
    for label, mat, length, bias, freq in CASES:
        out[label] = {"thickness": length, "bias": bias, "freq_hz": freq, **gains(mat, length, bias, freq)}
    return out


if __name__ == "__main__":
    values = compute_all()
    path = Path(__file__).with_name("data") / "oracle_values.json"
    path.write_text(json.dumps(values, indent=1, sort_keys=True) + "\n")
    for k, v in values.items():
        print(f"{k:28s} loss={v['loss']:.12f}  shot/(A2+B2)-1={v['shot'] / (v['A2'] + v['B2']) - 1:.2e}")
