"""Command-line front end.

Every subcommand resolves its inputs into validated objects before any
computation, writes plot-ready CSV/JSON into ``--out`` and finishes with a
``manifest_<command>.json`` recording the resolved configuration, its hash,
seeds, output checksums and wall time.  Numeric outputs depend only on the
configuration, so reruns reproduce them byte for byte for any ``--threads``.

Exit codes: 0 success, 1 computation or invariant failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .chain import build_chain, convergence_table, discrete_loss
from .materials import MaterialError, MaterialModel, load_material, serialize_material
from .measurement import (
    REFERENCE_SCANS,
    MeasurementError,
    estimate_loss_from_spectra,
    fit_phase_scan,
    load_budget,
    ratio_from_db,
    read_measured_spectra,
    read_phase_scan,
    residual_excess,
    synthetic_scan,
    write_phase_scan,
)
from .spectra import QuadratureError, default_frequency_grid, gain_integrals, loss_spectrum, shot_noise_integral
from .stochastic import (
    PhotonStream,
    SimulationError,
    ToneNotResolvable,
    modulation_shot_ratio,
    psd_shape_ratio,
    shot_noise_psd,
    simulate_photocurrent,
    theoretical_shot_psd,
    write_psd_csv,
    write_trace_binary,
    write_trace_csv,
)
from .transport import DeviceGeometry, impulse_response, max_transit_time, transfer_function

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


class CheckFailure(Exception):
    """A computed invariant did not hold; maps to exit code 1."""


# --------------------------------------------------------------------------
# helpers


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolve_material(source: str) -> MaterialModel:
    path = Path(source)
    if "\n" not in source and (path.suffix or "/" in source) and not path.exists():
        raise InputError(f"material file not found: {source}")
    return load_material(source)


def _resolve_device(args, bias=None) -> tuple[DeviceGeometry, MaterialModel]:
    material = _resolve_material(args.material)
    geometry = DeviceGeometry(args.thickness, args.bias if bias is None else bias)
    return geometry, material


def _frequency_grid(args) -> np.ndarray:
    if args.freqs:
        grid = np.array(args.freqs, dtype=float)
    elif args.scale == "log":
        grid = default_frequency_grid(args.fmin, args.fmax, args.points)
    else:
        grid = np.linspace(args.fmin, args.fmax, args.points)
    if grid.size == 0 or np.any(grid < 0) or np.any(~np.isfinite(grid)):
        raise InputError("frequency grid must be non-empty, finite and non-negative")
    return grid


@dataclass
class RunContext:
    command: str
    out: Path
    config: dict
    seeds: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def config_hash(self) -> str:
        canon = json.dumps(self.config, sort_keys=True, default=_json_default)
        return hashlib.sha256(canon.encode()).hexdigest()

    def write_manifest(self, status: str, summary: Optional[dict] = None) -> Path:
        manifest = {
            "tool": "pinloss",
            "version": __version__,
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash(),
            "seeds": self.seeds,
            "status": status,
            "outputs": {p.name: _sha256(p) for p in self.outputs if p.exists()},
            "summary": summary or {},
            "wall_time_s": time.perf_counter() - self.started,
        }
        p = self.out / f"manifest_{self.command}.json"
        _dump_json(manifest, p)
        return p


def _device_config(g: DeviceGeometry, m: MaterialModel) -> dict:
    return {
        "material": m.to_params(),
        "material_text": serialize_material(m),
        "thickness_m": g.thickness,
        "bias_v": g.bias,
        "field_v_per_m": g.field,
    }


# --------------------------------------------------------------------------
# verify (also used as a library function)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class VerifyReport:
    checks: list[Check]
    convergence: list[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [c.__dict__ for c in self.checks],
            "convergence": [
                dict(zip(("slices", "slice_width_m", "loss", "abs_error", "order"), row))
                for row in self.convergence
            ],
        }


def _guarded(name: str, fn: Callable[[], Check]) -> Check:
    try:
        return fn()
    except (QuadratureError, SimulationError, ValueError, ArithmeticError) as exc:
        return Check(name, False, f"raised {type(exc).__name__}: {exc}")


def run_verify(
    g: DeviceGeometry,
    m: MaterialModel,
    *,
    montecarlo: bool = True,
    seed: int = 20240501,
    convergence_freq: float = 500e6,
    threads: int = 1,
) -> VerifyReport:
    """Invariant suite for one device: sum rule, closed form, DC anchor,
    chain convergence and (optionally) a Monte-Carlo PSD shape check.

    A material that fails validation is reported as a failed check and the
    remaining checks are skipped.
    """
    try:
        m.validate()
    except MaterialError as exc:
        return VerifyReport([Check("material validation", False, str(exc))])
    checks = [Check("material validation", True, f"{m.name} ok")]
    alpha, length = m.alpha, g.thickness

    def sum_rule():
        worst = 0.0
        for f in np.geomspace(1e6, 3e9, 9):
            w = 2 * math.pi * f
            p = gain_integrals(g, m, w)
            ref = shot_noise_integral(g, m, w)
            worst = max(worst, abs(p.shot - ref) / ref)
        return Check("sum rule A^2+B^2 = (1/alpha) int e^-ax |H|^2", worst < 1e-8, f"max rel err {worst:.2e}")

    def closed_form():
        worst = 0.0
        for al in (0.1, 1.0, 6.0, 12.0):
            gg = DeviceGeometry(al / alpha, g.bias)
            p = gain_integrals(gg, m, 2 * math.pi * 1e8, transfer=lambda w, x: np.full(np.shape(x), 1.0 + 0j))
            worst = max(worst, abs(p.loss - math.exp(-al)) / math.exp(-al))
        return Check("constant-H loss = exp(-alpha L)", worst < 1e-10, f"max rel err {worst:.2e}")

    def dc_anchor():
        base = math.exp(-alpha * length)
        dev = max(gain_integrals(g, m, 2 * math.pi * f).loss - base for f in (0.0, 1e6, 5e6, 10e6))
        return Check("DC anchor loss - exp(-alpha L) below 1e-3 up to 10 MHz", dev < 1e-3, f"max excess {dev:.2e}")

    convergence: list[tuple] = []

    def chain_order():
        w = 2 * math.pi * convergence_freq
        ref = gain_integrals(g, m, w).loss
        rows = convergence_table(g, m, w, [256, 512, 1024, 2048, 4096], ref)
        convergence.extend(rows)
        order = rows[-1][4]
        return Check(
            f"chain first-order convergence at {convergence_freq / 1e6:g} MHz",
            0.9 <= order <= 1.1 and rows[-1][3] < rows[0][3],
            f"observed order {order:.3f}, |err| at M=4096 {rows[-1][3]:.2e}",
        )

    def chain_limit():
        worst = 0.0
        for f in (10e6, 300e6, 1e9):
            w = 2 * math.pi * f
            ref = gain_integrals(g, m, w).loss
            l1 = discrete_loss(build_chain(g, m, w, 2048))
            l2 = discrete_loss(build_chain(g, m, w, 4096))
            worst = max(worst, abs(2 * l2 - l1 - ref))
        return Check("chain extrapolated to xi -> 0 matches continuum", worst < 1e-5, f"max abs err {worst:.2e}")

    def mc_shape():
        rate, duration = 1e9, 3e-4
        trace = simulate_photocurrent(g, m, PhotonStream(rate, duration, seed=seed), threads=threads)
        est = shot_noise_psd(trace)
        _, ratio, _ = psd_shape_ratio(
            est, g, m, rate, np.arange(10e6, 1010e6 + 1, 50e6), sample_rate=trace.sample_rate
        )
        dev = float(np.max(np.abs(ratio - 1)))
        return Check("Monte-Carlo PSD shape vs A^2+B^2", dev < 0.05, f"max band deviation {dev:.3f} (seed {seed})")

    tests = [
        ("sum rule", sum_rule),
        ("closed form", closed_form),
        ("DC anchor", dc_anchor),
        ("chain order", chain_order),
        ("chain limit", chain_limit),
    ]
    if montecarlo:
        tests.append(("Monte-Carlo shape", mc_shape))
    for name, fn in tests:
        checks.append(_guarded(name, fn))
    return VerifyReport(checks, convergence)


# --------------------------------------------------------------------------
# subcommands


def cmd_loss_spectrum(args, ctx: RunContext) -> dict:
    freqs = _frequency_grid(args)
    biases = args.bias_sweep or [args.bias]
    summary = {"series": []}
    for bias in biases:
        g, m = _resolve_device(args, bias)
        spec = loss_spectrum(g, m, freqs, threads=args.threads)
        spec.meta = _device_config(g, m)
        stem = "loss_spectrum" if not args.bias_sweep else f"loss_spectrum_V{bias:g}"
        spec.to_csv(ctx.path(stem + ".csv"))
        spec.to_json(ctx.path(stem + ".json"))
        low = freqs <= 10e6
        series = {
            "bias_v": bias,
            "anchor_loss": spec.anchor_loss,
            "max_loss_below_10mhz": float(spec.loss[low].max()) if np.any(low) else None,
            "max_loss": float(spec.loss.max()),
        }
        summary["series"].append(series)
        print(
            f"V = {bias:g} V: loss(0) = {spec.anchor_loss:.6f}, "
            f"max loss = {series['max_loss']:.4f} on {freqs.size} points -> {stem}.csv"
        )
    ctx.config.update({"freq_hz": freqs.tolist(), "biases_v": biases})
    return summary


def cmd_verify(args, ctx: RunContext) -> dict:
    g, m = _resolve_device(args)
    ctx.seeds.append(args.seed)
    ctx.config.update(_device_config(g, m))
    report = run_verify(g, m, montecarlo=not args.no_montecarlo, seed=args.seed, threads=args.threads)
    if report.convergence:
        print("slices  xi [m]        loss_M              |loss_M - loss|  order")
        for mcount, xi, lm, err, order in report.convergence:
            print(f"{mcount:6d}  {xi:.6e}  {lm:.15f}  {err:.3e}        {order:.3f}")
    for c in report.checks:
        print(c.line())
    _dump_json(report.to_dict(), ctx.path("verify.json"))
    if not report.passed:
        raise CheckFailure("verification failed")
    return {"passed": True}


def cmd_montecarlo(args, ctx: RunContext) -> dict:
    g, m = _resolve_device(args)
    stream = PhotonStream(
        args.rate, args.duration, seed=args.seed,
        modulation_freq=args.modulation_freq, modulation_depth=args.modulation_depth,
    )
    ctx.seeds.append(args.seed)
    ctx.config.update(_device_config(g, m))
    trace = simulate_photocurrent(g, m, stream, sample_rate=args.sample_rate, threads=args.threads)
    est = shot_noise_psd(trace, resolution_hz=args.resolution)
    band = (est.freq_hz > 0) & (est.freq_hz <= args.fmax)
    theory = np.full(est.freq_hz.shape, np.nan)
    theory[band] = theoretical_shot_psd(g, m, args.rate, est.freq_hz[band], sample_rate=trace.sample_rate)
    write_psd_csv(est, ctx.path("psd.csv"), theory)
    if args.save_trace:
        write_trace_binary(trace, ctx.path("trace.bin"))
    if args.trace_csv:
        write_trace_csv(trace, ctx.path("trace.csv"))
    absorbed_fraction = -math.expm1(-m.alpha * g.thickness)
    expected_mean = g.charge * args.rate * absorbed_fraction
    summary = {
        "provenance": trace.provenance,
        "mean_current_a": float(trace.samples.mean()),
        "expected_mean_current_a": expected_mean,
        "welch_nperseg": est.nperseg,
        "welch_segments": est.segments,
    }
    if args.fmax > 20e6:
        edges = np.arange(10e6, args.fmax + 1, 20e6)
        _, ratio, _ = psd_shape_ratio(est, g, m, args.rate, edges, sample_rate=trace.sample_rate)
        keep = np.ones(ratio.size, dtype=bool)
        if args.modulation_freq:
            # the tone band is not shot noise
            keep &= ~((edges[:-1] <= args.modulation_freq) & (edges[1:] > args.modulation_freq))
        summary["psd_shape_max_deviation"] = float(np.max(np.abs(ratio[keep] - 1)))
    if args.modulation_freq:
        ratio = modulation_shot_ratio(trace)
        expected = 1.0 - gain_integrals(g, m, 2 * math.pi * args.modulation_freq).loss
        summary.update({"modulation_shot_ratio": ratio, "expected_one_minus_loss": expected})
    _dump_json(summary, ctx.path("montecarlo.json"))
    print(f"mean current {summary['mean_current_a']:.6e} A (expected {expected_mean:.6e} A)")
    if "psd_shape_max_deviation" in summary:
        print(f"PSD shape max deviation {summary['psd_shape_max_deviation']:.4f}")
    if args.modulation_freq:
        print(f"modulation/shot ratio {summary['modulation_shot_ratio']:.4f} "
              f"(1 - loss = {summary['expected_one_minus_loss']:.4f})")
    return {k: v for k, v in summary.items() if k != "provenance"}


def cmd_fit_scan(args, ctx: RunContext) -> dict:
    scan = read_phase_scan(args.scan)
    ctx.config["scan_sha256"] = _sha256(Path(args.scan))
    fit = fit_phase_scan(scan)
    report = fit.to_dict()
    _dump_json(report, ctx.path(args.output))
    flag = "" if fit.loss_identifiable else " (loss unidentifiable)"
    print(
        f"loss = {fit.loss:.6f} +/- {fit.loss_stderr:.2g}, "
        f"R = {fit.squeezing:.6f} ({fit.squeezing_db:.3f} dB), theta0 = {fit.theta0:.4f} rad{flag}"
    )
    return {"loss": fit.loss, "squeezing_db": fit.squeezing_db}


def cmd_make_scan(args, ctx: RunContext) -> dict:
    if args.preset:
        p = REFERENCE_SCANS[args.preset]
        loss, db, freq = p["loss"], p["squeezing_db"], p["freq_hz"]
    else:
        if args.loss is None or args.squeezing_db is None:
            raise InputError("give --preset or both --loss and --squeezing-db")
        loss, db, freq = args.loss, args.squeezing_db, args.freq
    ctx.seeds.append(args.seed)
    scan = synthetic_scan(
        loss, ratio_from_db(db), args.theta0, args.points, noise=args.noise, rng=args.seed, freq_hz=freq
    )
    write_phase_scan(scan, ctx.path(args.output))
    print(f"wrote {args.points} points (loss {loss}, {db} dB) to {args.output}")
    return {"loss": loss, "squeezing_db": db}


def _load_budget_source(source: str):
    builtin = {"setup_0hz", "setup_500mhz"}
    if source in builtin:
        ref = resources.files("pinloss.data").joinpath(source + ".json")
        with resources.as_file(ref) as p:
            return load_budget(p)
    if not Path(source).exists():
        raise InputError(f"budget file not found: {source}")
    return load_budget(source)


def cmd_budget(args, ctx: RunContext) -> dict:
    budget, measured_in_file = _load_budget_source(args.budget)
    measured = args.measured if args.measured is not None else measured_in_file
    report = budget.to_dict()
    print(f"{budget.label or 'budget'}")
    for name, v in budget.factors.items():
        print(f"  {name:<40s} {100 * v:6.2f} %")
    print(f"  {'total':<40s} {100 * budget.total:6.2f} %")
    if measured is not None:
        excess = residual_excess(measured, budget.total)
        report.update({"measured_total": measured, "residual_excess": excess})
        print(f"  {'measured':<40s} {100 * measured:6.2f} %")
        print(f"  {'residual excess':<40s} {100 * excess:6.2f} %")
    _dump_json(report, ctx.path(args.output))
    return report


def cmd_estimate_loss(args, ctx: RunContext) -> dict:
    data = read_measured_spectra(args.spectra, averages=args.averages, gain_rel_sigma=args.gain_sigma)
    ctx.config["spectra_sha256"] = _sha256(Path(args.spectra))
    est = estimate_loss_from_spectra(
        data, anchor_band=tuple(args.anchor), snr_threshold_db=args.snr_threshold, spike_window=args.spike_window
    )
    out = ctx.path(args.output)
    with open(out, "w") as fh:
        fh.write("freq_hz,loss,sigma,shot_snr_db,flag\n")
        for f, l, s, snr, flag in est.to_rows():
            fh.write(f"{f:.17g},{l:.17g},{s:.17g},{snr:.17g},{flag}\n")
    flagged = sum(1 for fl in est.flags if fl)
    print(f"{len(est.flags)} points, {flagged} flagged -> {args.output}")
    return {"points": len(est.flags), "flagged": flagged}


def cmd_impulse(args, ctx: RunContext) -> dict:
    g, m = _resolve_device(args)
    ctx.config.update(_device_config(g, m))
    depth = g.thickness * args.depth_fraction
    t_max = 1.1 * max_transit_time(g, m)
    t = np.linspace(-0.05 * t_max, t_max, args.time_points)
    h = impulse_response(g, m, t, depth)
    out = ctx.path("impulse.csv")
    with open(out, "w") as fh:
        fh.write("time_s,current_a\n")
        for ti, hi in zip(t, h):
            fh.write(f"{ti:.17g},{hi:.17g}\n")
    freqs = _frequency_grid(args)
    hf = np.array([transfer_function(g, m, 2 * math.pi * f, depth) for f in freqs])
    out = ctx.path("transfer.csv")
    with open(out, "w") as fh:
        fh.write("freq_hz,re_H_c,im_H_c,abs_H_c\n")
        for f, v in zip(freqs, hf):
            fh.write(f"{f:.17g},{v.real:.17g},{v.imag:.17g},{abs(v):.17g}\n")
    print(f"depth {depth:.3e} m: impulse.csv ({t.size} samples), transfer.csv ({freqs.size} points)")
    return {"depth_m": depth}


def cmd_chain(args, ctx: RunContext) -> dict:
    g, m = _resolve_device(args)
    ctx.config.update(_device_config(g, m))
    w = 2 * math.pi * args.freq
    ref = gain_integrals(g, m, w).loss
    rows = convergence_table(g, m, w, args.slices, ref, sample_position=args.sample_position)
    out = ctx.path("chain_convergence.csv")
    with open(out, "w") as fh:
        fh.write("slices,slice_width_m,loss_chain,abs_error,observed_order\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.17g},{r[2]:.17g},{r[3]:.17g},{r[4]:.17g}\n")
    print(f"continuum loss at {args.freq:g} Hz: {ref:.12f}")
    for r in rows:
        print(f"M = {r[0]:6d}  loss = {r[2]:.12f}  err = {r[3]:.3e}  order = {r[4]:.3f}")
    return {"continuum_loss": ref, "final_error": rows[-1][3]}


# --------------------------------------------------------------------------
# parser


def _add_device(p: argparse.ArgumentParser) -> None:
    p.add_argument("--material", default="si_860nm", help="builtin name (si_860nm, ingaas_1550nm) or file path")
    p.add_argument("--thickness", type=float, default=100e-6, help="intrinsic layer thickness [m]")
    p.add_argument("--bias", type=float, default=100.0, help="reverse bias [V]")


def _add_grid(p: argparse.ArgumentParser, fmin=10e6, fmax=3e9, points=200) -> None:
    p.add_argument("--fmin", type=float, default=fmin, help="lowest frequency [Hz]")
    p.add_argument("--fmax", type=float, default=fmax, help="highest frequency [Hz]")
    p.add_argument("--points", type=int, default=points)
    p.add_argument("--scale", choices=("log", "linear"), default="log")
    p.add_argument("--freqs", type=_floats, default=None, help="explicit comma-separated grid [Hz]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pinloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loss-spectrum", parents=[common], help="excess-loss spectrum A^2, B^2, loss vs frequency")
    _add_device(p)
    _add_grid(p)
    p.add_argument("--bias-sweep", type=_floats, default=None, help="comma-separated biases [V]; one series each")
    p.set_defaults(func=cmd_loss_spectrum)

    p = sub.add_parser("verify", parents=[common], help="run the invariant checks for one device")
    _add_device(p)
    p.add_argument("--seed", type=int, default=20240501)
    p.add_argument("--no-montecarlo", action="store_true", help="skip the Monte-Carlo shape check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("montecarlo", parents=[common], help="simulate a photocurrent trace and its PSD")
    _add_device(p)
    p.add_argument("--rate", type=float, default=1e9, help="photon rate [1/s]")
    p.add_argument("--duration", type=float, default=2e-4, help="trace length [s]")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--sample-rate", type=float, default=16e9)
    p.add_argument("--resolution", type=float, default=1e6, help="Welch resolution [Hz]")
    p.add_argument("--fmax", type=float, default=1.01e9, help="highest frequency with theory column [Hz]")
    p.add_argument("--modulation-freq", type=float, default=None)
    p.add_argument("--modulation-depth", type=float, default=0.0)
    p.add_argument("--save-trace", action="store_true", help="write trace.bin")
    p.add_argument("--trace-csv", action="store_true", help="write trace.csv")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("fit-scan", parents=[common], help="fit a squeezing phase scan")
    p.add_argument("scan", help="CSV with theta_rad, variance[, weight]")
    p.add_argument("--output", default="fit.json")
    p.set_defaults(func=cmd_fit_scan)

    p = sub.add_parser("make-scan", parents=[common], help="generate a synthetic phase scan")
    p.add_argument("--preset", choices=sorted(REFERENCE_SCANS))
    p.add_argument("--loss", type=float)
    p.add_argument("--squeezing-db", type=float)
    p.add_argument("--freq", type=float, default=None)
    p.add_argument("--theta0", type=float, default=0.3)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.0, help="relative Gaussian noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="scan.csv")
    p.set_defaults(func=cmd_make_scan)

    p = sub.add_parser("budget", parents=[common], help="compose a loss budget and residual excess")
    p.add_argument("budget", help="budget JSON, or setup_0hz / setup_500mhz")
    p.add_argument("--measured", type=float, default=None, help="measured total loss (fraction)")
    p.add_argument("--output", default="budget.json")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("estimate-loss", parents=[common], help="loss spectrum from measured shot/gain spectra")
    p.add_argument("spectra", help="CSV bundle: freq_hz, dut_shot, ref_shot, circuit, dut_gain, ref_gain")
    p.add_argument("--averages", type=float, default=math.inf, help="power averages per PSD point")
    p.add_argument("--gain-sigma", type=float, default=0.0, help="relative 1-sigma error of gain traces")
    p.add_argument("--anchor", type=float, nargs=2, default=(5e6, 20e6), metavar=("F_LO", "F_HI"))
    p.add_argument("--snr-threshold", type=float, default=5.0, help="flag points below this shot/circuit SNR [dB]")
    p.add_argument("--spike-window", type=int, default=0, help="running-median width for spike rejection")
    p.add_argument("--output", default="loss_estimate.csv")
    p.set_defaults(func=cmd_estimate_loss)

    p = sub.add_parser("impulse", parents=[common], help="impulse response and transfer function at one depth")
    _add_device(p)
    _add_grid(p, points=100)
    p.add_argument("--depth-fraction", type=float, default=0.5, help="absorption depth / thickness")
    p.add_argument("--time-points", type=int, default=2000)
    p.set_defaults(func=cmd_impulse)

    p = sub.add_parser("chain", parents=[common], help="beamsplitter-chain convergence table")
    _add_device(p)
    p.add_argument("--freq", type=float, default=500e6, help="sideband frequency [Hz]")
    p.add_argument("--slices", type=_ints, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--sample-position", choices=("right", "mid"), default="right")
    p.set_defaults(func=cmd_chain)
    return parser


def _config_from_args(args) -> dict:
    skip = {"func", "out", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {args.out}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    ctx = RunContext(args.command, args.out, _config_from_args(args))
    status, code, summary = "ok", EXIT_OK, None
    try:
        summary = args.func(args, ctx)
    except CheckFailure as exc:
        status, code = f"failed: {exc}", EXIT_FAILURE
    except (QuadratureError, ToneNotResolvable) as exc:
        status, code = f"computation error: {exc}", EXIT_FAILURE
    except FileNotFoundError as exc:
        status, code = f"input error: {exc.args[0] if exc.args else exc}", EXIT_INPUT
    except (InputError, MaterialError, MeasurementError, SimulationError, ValueError, OSError) as exc:
        status, code = f"input error: {exc}", EXIT_INPUT
    if code != EXIT_OK:
        print(f"error: {status}", file=sys.stderr)
    ctx.write_manifest(status, summary)
    return code


if __name__ == "__main__":
    sys.exit(main())
