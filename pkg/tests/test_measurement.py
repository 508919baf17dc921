import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pinloss.measurement import (
    MeasuredSpectra,
    MeasurementError,
    PhaseScan,
    compose_losses,
    estimate_loss_from_spectra,
    fit_phase_scan,
    infer_qe_from_budget,
    load_budget,
    reference_scan,
    quadrature_variance,
    ratio_from_db,
    read_measured_spectra,
    read_phase_scan,
    residual_excess,
    synthesize_measured_spectra,
    synthetic_scan,
    write_measured_spectra,
    write_phase_scan,
)
from pinloss.spectra import loss_spectrum

TABLE_0HZ = [0.035, 0.027, 0.068, 0.0, 0.030, 0.017]
TABLE_500MHZ = [0.035, 0.028, 0.065, 0.0, 0.017, 0.017]


# ---------------------------------------------------------------- variance model


def test_vacuum_in_vacuum_out():
    th = np.linspace(0, 2 * np.pi, 17)
    np.testing.assert_allclose(quadrature_variance(th, 0.37, 1.0), 1.0, rtol=1e-15)
    np.testing.assert_allclose(quadrature_variance(th, 1.0, 0.2), 1.0, rtol=1e-15)


def test_reference_0hz_evaluation():
    v = quadrature_variance(0.0, 0.166, 10 ** -0.906)
    assert v == pytest.approx(0.26955, abs=1e-4)
    assert 10 * math.log10(v) == pytest.approx(-5.69, abs=0.005)


def test_variance_rejects_bad_inputs():
    with pytest.raises(MeasurementError):
        quadrature_variance(0.0, 0.1, 0.0)
    with pytest.raises(MeasurementError):
        quadrature_variance(0.0, 0.1, -0.5)
    with pytest.raises(MeasurementError):
        quadrature_variance(0.0, 1.2, 0.5)


# ---------------------------------------------------------------- fitting


@pytest.mark.parametrize("loss", [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("r", [0.05, 0.2, 0.5, 0.8, 0.95])
def test_round_trip_grid(loss, r):
    fit = fit_phase_scan(synthetic_scan(loss, r, theta0=0.7))
    assert fit.loss == pytest.approx(loss, abs=1e-9)
    assert fit.squeezing == pytest.approx(r, abs=1e-9)
    assert math.remainder(fit.theta0 - 0.7, math.pi) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("name,loss,db", [("0hz", 0.166, 9.06), ("500mhz", 0.274, 9.47)])
def test_reference_parameter_scans(name, loss, db):
    fit = fit_phase_scan(reference_scan(name))
    assert fit.loss == pytest.approx(loss, abs=1e-9)
    assert fit.squeezing_db == pytest.approx(db, abs=1e-8)


def test_min_max_swap_relabelled():
    # start from the antisqueezed quadrature: theta0 shifted by pi/2, R > 1 internally
    fit = fit_phase_scan(synthetic_scan(0.2, 0.1, theta0=0.3 + math.pi / 2))
    assert fit.squeezing <= 1.0
    assert math.remainder(fit.theta0 - (0.3 + math.pi / 2), math.pi) == pytest.approx(0.0, abs=1e-8)


def test_fitted_minimum_matches_model():
    fit = fit_phase_scan(synthetic_scan(0.274, ratio_from_db(9.47), 0.3))
    th = np.linspace(-np.pi, np.pi, 20001)
    direct = quadrature_variance(th, fit.loss, fit.squeezing).min()
    assert fit.min_variance() == pytest.approx(direct, rel=1e-8)
    assert direct >= fit.loss


def test_noisy_fit_calibration():
    hits = 0
    for seed in range(200):
        scan = synthetic_scan(0.274, ratio_from_db(9.47), 0.3, points=100, noise=0.01, rng=seed)
        hits += abs(fit_phase_scan(scan).loss - 0.274) <= 0.01
    assert hits / 200 >= 0.95


def test_noisy_fit_stderr_reasonable():
    fits = [fit_phase_scan(synthetic_scan(0.3, 0.15, 0.2, noise=0.01, rng=s)) for s in range(60)]
    spread = np.std([f.loss for f in fits])
    typical = np.median([f.loss_stderr for f in fits])
    assert 0.6 < typical / spread < 1.6


def test_vacuum_degeneracy():
    fit = fit_phase_scan(PhaseScan(np.linspace(0, 2 * np.pi, 40), np.ones(40)))
    assert fit.squeezing == 1.0
    assert not fit.loss_identifiable
    assert math.isinf(fit.loss_stderr)


def test_scan_validation():
    with pytest.raises(MeasurementError, match="8"):
        fit_phase_scan(PhaseScan(np.linspace(0, 4, 5), np.ones(5)))
    with pytest.raises(MeasurementError, match="pi"):
        fit_phase_scan(PhaseScan(np.linspace(0, 2, 20), np.ones(20)))
    with pytest.raises(MeasurementError):
        PhaseScan(np.linspace(0, 4, 20), -np.ones(20))


def test_weights_accepted():
    s = synthetic_scan(0.2, 0.3, 0.1)
    s.weight = np.linspace(0.5, 2.0, s.theta.size)
    assert fit_phase_scan(s).loss == pytest.approx(0.2, abs=1e-9)


def test_scan_csv_round_trip(tmp_path):
    s = synthetic_scan(0.274, 0.11, 0.3, freq_hz=500.6e6)
    s.weight = np.ones_like(s.theta)
    write_phase_scan(s, tmp_path / "s.csv")
    back = read_phase_scan(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.variance, s.variance)
    np.testing.assert_array_equal(back.weight, s.weight)
    assert back.freq_hz == 500.6e6


def test_scan_csv_malformed(tmp_path):
    (tmp_path / "a.csv").write_text("theta_rad,variance\n0.1,abc\n")
    with pytest.raises(MeasurementError):
        read_phase_scan(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("angle,v\n0.1,1\n")
    with pytest.raises(MeasurementError, match="columns"):
        read_phase_scan(tmp_path / "b.csv")


# ---------------------------------------------------------------- budgets


def test_table_one_totals():
    assert compose_losses(TABLE_0HZ).total == pytest.approx(0.166, abs=5e-4)
    assert compose_losses(TABLE_500MHZ).total == pytest.approx(0.153, abs=5e-4)
    assert compose_losses({}).total == 0.0


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 0.99), min_size=1, max_size=8), st.randoms())
def test_composition_properties(factors, rnd):
    shuffled = factors[:]
    rnd.shuffle(shuffled)
    a, b = compose_losses(factors).total, compose_losses(shuffled).total
    assert a == pytest.approx(b, abs=1e-15)
    assert a >= max(factors) - 1e-15


def test_factor_of_one_rejected():
    with pytest.raises(MeasurementError):
        compose_losses([0.1, 1.0])


def test_residual_excess_examples():
    assert residual_excess(0.274, 0.153) == pytest.approx(0.1429, abs=1e-4)
    assert residual_excess(0.2, 0.2) == 0.0
    total0 = compose_losses(TABLE_0HZ[:5] + [infer_qe_from_budget(0.166, TABLE_0HZ[:5])]).total
    assert residual_excess(0.166, total0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(MeasurementError):
        residual_excess(0.3, 1.0)


def test_negative_excess_reported():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        v = residual_excess(0.1, 0.15)
    assert v < 0 and rec


def test_infer_qe():
    assert infer_qe_from_budget(0.166, TABLE_0HZ[:5]) == pytest.approx(0.017, abs=5e-4)
    assert infer_qe_from_budget(0.2, []) == pytest.approx(0.2)
    with pytest.raises(MeasurementError, match="infeasible"):
        infer_qe_from_budget(0.1, [0.08, 0.05])


def test_builtin_budget_files():
    from importlib import resources

    with resources.as_file(resources.files("pinloss.data") / "setup_500mhz.json") as p:
        budget, measured = load_budget(p)
    assert budget.total == pytest.approx(0.153, abs=5e-4)
    assert measured == 0.274


def test_budget_file_malformed(tmp_path):
    (tmp_path / "b.json").write_text(json.dumps({"factors": {"a": "x"}}))
    with pytest.raises(MeasurementError):
        load_budget(tmp_path / "b.json")


# ---------------------------------------------------------------- spectra estimator


@pytest.fixture(scope="module")
def model_spectrum(si_device):
    g, m = si_device
    f = np.concatenate([np.linspace(5e6, 20e6, 4), np.linspace(30e6, 1e9, 40)])
    s = loss_spectrum(g, m, f)
    return f, s.A2, s.A2 + s.B2


def _truth(f, a2, shot, band=(5e6, 20e6)):
    sel = (f >= band[0]) & (f <= band[1])
    q = a2 / shot
    return 1 - q / q[sel].mean()


def test_estimator_identity(model_spectrum):
    f, a2, shot = model_spectrum
    est = estimate_loss_from_spectra(synthesize_measured_spectra(f, a2, shot))
    np.testing.assert_allclose(est.loss, _truth(f, a2, shot), atol=1e-10, rtol=0)
    assert not any(est.flags)


def test_estimator_uncertainty_calibration(model_spectrum):
    f, a2, shot = model_spectrum
    truth = _truth(f, a2, shot)
    covered = []
    for seed in range(100):
        data = synthesize_measured_spectra(
            f, a2, shot, shot_to_circuit_db=9.0, averages=1000, gain_rel_sigma=0.003, rng=seed
        )
        est = estimate_loss_from_spectra(data)
        covered.append(np.abs(est.loss - truth) <= 2 * est.sigma)
    assert np.mean(covered) >= 0.90


def test_estimator_anchor_missing(model_spectrum):
    f, a2, shot = model_spectrum
    data = synthesize_measured_spectra(f, a2, shot)
    with pytest.raises(MeasurementError, match="cannot normalize"):
        estimate_loss_from_spectra(data, anchor_band=(1e3, 2e3))


def test_estimator_negative_power_and_low_snr(model_spectrum):
    f, a2, shot = model_spectrum
    data = synthesize_measured_spectra(f, a2, shot, shot_to_circuit_db=9.0)
    data.circuit[-1] = data.dut_shot[-1] * 1.1
    data.circuit[-2] = data.dut_shot[-2] * 0.8
    est = estimate_loss_from_spectra(data)
    assert est.flags[-1] == "negative_power" and math.isnan(est.loss[-1])
    assert est.flags[-2] == "low_snr"


def test_estimator_spike_rejection(model_spectrum):
    f, a2, shot = model_spectrum
    data = synthesize_measured_spectra(f, a2, shot, averages=1e4, rng=1)
    data.dut_gain[20] *= 0.5
    est = estimate_loss_from_spectra(data, spike_window=5)
    assert est.flags[20] == "spike" and math.isnan(est.loss[20])
    assert sum(fl == "spike" for fl in est.flags) == 1


def test_measured_spectra_validation():
    with pytest.raises(MeasurementError, match="grid"):
        MeasuredSpectra(np.arange(3.0), np.ones(3), np.ones(3), np.ones(2), np.ones(3), np.ones(3))
    with pytest.raises(MeasurementError, match="positive"):
        MeasuredSpectra(np.arange(3.0), np.ones(3), -np.ones(3), np.ones(3), np.ones(3), np.ones(3))


def test_spectra_csv_round_trip(model_spectrum, tmp_path):
    f, a2, shot = model_spectrum
    data = synthesize_measured_spectra(f, a2, shot, shot_to_circuit_db=12.0)
    write_measured_spectra(data, tmp_path / "m.csv")
    back = read_measured_spectra(tmp_path / "m.csv")
    for c in MeasuredSpectra.COLUMNS:
        np.testing.assert_array_equal(getattr(back, c), getattr(data, c))
    (tmp_path / "bad.csv").write_text("freq_hz,dut_shot\n1,2\n")
    with pytest.raises(MeasurementError, match="missing columns"):
        read_measured_spectra(tmp_path / "bad.csv")
