import math

import numpy as np
import pytest

from pinloss.chain import (
    BeamsplitterChain,
    build_chain,
    convergence_table,
    discrete_gains,
    discrete_loss,
    iq_vacuum_overlap,
    mode_coefficients,
    mode_coefficients_dense,
    mode_matrix,
    quadrature_phase_gains,
    sideband_components,
    signal_phase,
)
from pinloss.spectra import gain_integrals
from pinloss.transport import DeviceGeometry


def w(f):
    return 2 * math.pi * f


def chain_with(samples, alpha=5e4, length=100e-6):
    samples = np.asarray(samples, dtype=complex)
    return BeamsplitterChain(alpha, length, samples.size, 0.0, samples)


@pytest.mark.parametrize("h1", [1.0, 0.3 - 2j, 1e-19j])
def test_single_slice_is_single_beamsplitter(h1):
    ch = chain_with([h1])
    c = mode_coefficients(ch)
    r = ch.reflectance
    assert abs(c.c_in) ** 2 / c.norm2() == pytest.approx(r, rel=1e-14)
    assert discrete_loss(ch) == pytest.approx(math.exp(-ch.alpha * ch.thickness), rel=1e-13)


def test_single_slice_closed_forms():
    ch = chain_with([1.0])
    al = ch.alpha * ch.thickness
    a, b = discrete_gains(ch)
    assert a == pytest.approx(-math.expm1(-al) / ch.alpha, rel=1e-14)
    assert b == pytest.approx(math.sqrt(math.exp(-al) * -math.expm1(-al)) / ch.alpha, rel=1e-14)


@pytest.mark.parametrize("m", [1, 2, 7, 64, 1000])
def test_constant_h_any_m(m):
    ch = chain_with(np.full(m, 2.5 - 1j))
    assert discrete_loss(ch) == pytest.approx(math.exp(-ch.alpha * ch.thickness), rel=1e-11)


def test_norm_preservation_random():
    rng = np.random.default_rng(7)
    h = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    ch = chain_with(h)
    probs, _ = ch.absorption_probabilities()
    assert mode_coefficients(ch).norm2() == pytest.approx(float(np.sum(probs * np.abs(h) ** 2)), rel=1e-13)


def test_mode_matrix_orthogonal():
    mat = mode_matrix(0.13, 9)
    np.testing.assert_allclose(mat @ mat.T, np.eye(10), atol=1e-15)


def test_dense_matches_recursion():
    rng = np.random.default_rng(11)
    h = rng.standard_normal(33) + 1j * rng.standard_normal(33)
    ch = chain_with(h)
    a, b = mode_coefficients(ch), mode_coefficients_dense(ch)
    assert a.c_in == pytest.approx(b.c_in, rel=1e-13)
    np.testing.assert_allclose(a.c_vac, b.c_vac, rtol=1e-12, atol=1e-15)


def test_absorption_probabilities_sum_to_one():
    ch = chain_with(np.ones(50))
    probs, rest = ch.absorption_probabilities()
    assert probs.sum() + rest == pytest.approx(1.0, rel=1e-14)
    assert rest == pytest.approx(math.exp(-ch.alpha * ch.thickness), rel=1e-12)


def test_signal_gain_first_order(si_device):
    g, m = si_device
    ref = gain_integrals(g, m, w(500e6)).A
    errs = [abs(discrete_gains(build_chain(g, m, w(500e6), n))[0] - ref) for n in (8, 16, 32, 64)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(1.6 < q < 2.5 for q in ratios)


def test_4096_at_500mhz(si_device):
    g, m = si_device
    ref = gain_integrals(g, m, w(500e6)).loss
    assert abs(discrete_loss(build_chain(g, m, w(500e6), 4096)) - ref) < 1e-4


def test_convergence_table_order(si_device):
    g, m = si_device
    ref = gain_integrals(g, m, w(500e6)).loss
    rows = convergence_table(g, m, w(500e6), [512, 1024, 2048], ref)
    assert [r[0] for r in rows] == [512, 1024, 2048]
    assert math.isnan(rows[0][4])
    assert rows[-1][4] == pytest.approx(1.0, abs=0.05)


def test_midpoint_sampling_second_order(si_device):
    g, m = si_device
    ref = gain_integrals(g, m, w(1e9)).loss
    rows = convergence_table(g, m, w(1e9), [256, 512, 1024], ref, sample_position="mid")
    assert rows[-1][4] == pytest.approx(2.0, abs=0.1)


def test_phase_matches_continuum(si_device):
    g, m = si_device
    ref = gain_integrals(g, m, w(400e6)).theta
    assert signal_phase(build_chain(g, m, w(400e6), 4096, sample_position="mid")) == pytest.approx(ref, abs=1e-5)


def test_quadrature_gains_equal_in_phase(si_device):
    g, m = si_device
    ch = build_chain(g, m, w(700e6), 128)
    a, b = discrete_gains(ch)
    q = quadrature_phase_gains(ch)
    i = sideband_components(ch, "I")
    assert q.A == pytest.approx(a, rel=1e-13) and q.B == pytest.approx(b, rel=1e-13)
    assert i.A == pytest.approx(a, rel=1e-13) and i.B == pytest.approx(b, rel=1e-13)
    assert q.vacuum_label != i.vacuum_label
    assert iq_vacuum_overlap(ch) < 1e-14
    assert math.remainder(q.signal_phase - i.signal_phase - math.pi / 2, 2 * math.pi) == pytest.approx(0, abs=1e-14)


def test_quadrature_single_slice():
    ch = chain_with([1.0])
    q = quadrature_phase_gains(ch)
    assert (q.A, q.B) == pytest.approx(discrete_gains(ch), rel=1e-14)


def test_chain_validation():
    with pytest.raises(ValueError):
        BeamsplitterChain(1.0, 1.0, 0, 0.0, np.array([]))
    with pytest.raises(ValueError):
        BeamsplitterChain(1.0, 1.0, 3, 0.0, np.ones(2))
    with pytest.raises(ValueError):
        build_chain(DeviceGeometry(1e-5, 1.0), None, 0.0, 4, samples=None, sample_position="left", transfer=lambda o, x: x)
