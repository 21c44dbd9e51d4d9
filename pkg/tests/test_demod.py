import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escdemod.demod import (
    AmplitudeMatrix,
    ExistenceError,
    appendix_matrices,
    check_existence,
    closed_form_sinusoidal_h,
    sine_power_coefficients,
    sinusoidal_rules_h,
    synthesize,
    verify_appendix_equivalence,
)
from escdemod.multiindex import ParameterError, enumerate_basis, monomials
from escdemod.signals import ExtendedDither, SinusoidalDither, TriangleArmDither, TrigSignal

PI = math.pi
ARM_R = TrigSignal([[(-1.0, "cos", 2 * PI)], [(-1.0, "cos", PI)]])


def arm(lo, hi):
    return ExtendedDither(TriangleArmDither(), enumerate_basis(2, lo, hi))


def test_amplitude_matrix():
    A = AmplitudeMatrix(enumerate_basis(2, 0, 2), 0.5)
    np.testing.assert_allclose(A.diagonal, [1, 0.5, 0.5, 0.125, 0.25, 0.125])
    np.testing.assert_allclose(A.diagonal * A.inverse_diagonal, 1.0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ParameterError):
            AmplitudeMatrix(enumerate_basis(1, 0, 1), bad)


def test_arm_verdicts():
    grad = check_existence(arm(1, 1))
    full = check_existence(arm(1, 2))
    assert grad.estimable and str(grad) == "estimable, rank 2/2"
    assert not full.estimable and str(full) == "singular, rank 4/5"
    # cos^2 + sin^2 is constant, so the centered pair is dependent
    np.testing.assert_allclose(full.null_basis[0], [0, 0, 1 / math.sqrt(2), 0, 1 / math.sqrt(2)], atol=1e-10)


def test_uncentered_arm_with_constant_is_singular():
    # with order 0 present, 1 = cos^2 + sin^2 is a dependency of the raw monomials
    v = check_existence(arm(0, 2), centered=False)
    assert not v.estimable and v.rank == 5


def test_singular_synthesis_raises_with_verdict():
    with pytest.raises(ExistenceError) as info:
        synthesize(arm(1, 2), 0.154)
    assert info.value.verdict.rank == 4


def test_arm_zero_mean_demodulator_closed_form():
    a = 0.154
    spec = synthesize(arm(1, 1), a, "zero-mean")
    tau = np.linspace(0, 2, 41)
    phi = np.array([math.pi * (s % 2) - math.pi / 2 if s % 2 < 1 else math.pi / 2 - math.pi * ((s - 1) % 2) for s in tau])
    expected = np.stack([(np.cos(phi) - 2 / PI) / (a * (0.5 - 4 / PI**2)), 2 * np.sin(phi) / a], axis=1)
    np.testing.assert_allclose(spec.h(tau), expected, rtol=1e-10, atol=1e-10)
    assert np.max(np.abs(spec.defining_residual())) < 1e-8


def test_arm_verbatim_demodulator():
    a = 0.154
    spec = synthesize(arm(1, 1), a, "paper-verbatim")
    # cos(phi) / (a (1/2 - 4/pi^2)) equals 2 cos(phi) / (a (1 - 8/pi^2))
    assert spec.h(0.5)[0] == pytest.approx(2 / (a * (1 - 8 / PI**2)), rel=1e-10)
    assert spec.h(0.5)[1] == pytest.approx(0.0, abs=1e-10)


def test_arm_crossvariance_demodulator():
    a = 0.154
    spec = synthesize(arm(1, 1), a, "crossvariance", r=ARM_R)
    np.testing.assert_allclose(spec.matrix, np.diag([2 / (3 * PI), 0.5]), atol=1e-12)
    tau = np.linspace(0, 2, 17)
    expected = np.stack([-3 * PI / (2 * a) * np.cos(2 * PI * tau), -2 / a * np.cos(PI * tau)], axis=1)
    np.testing.assert_allclose(spec.h(tau), expected, rtol=1e-10, atol=1e-9)
    assert np.max(np.abs(spec.defining_residual())) < 1e-8


def test_crossvariance_rejects_unsuitable_aux():
    bad = TrigSignal([[(1.0, "cos", 2 * PI)], [(2.0, "cos", 2 * PI)]])
    with pytest.raises(ExistenceError):
        synthesize(arm(1, 1), 0.1, "crossvariance", r=bad)


def test_variant_dispatch_errors():
    ext = ExtendedDither(SinusoidalDither([1.0], [1.0]), enumerate_basis(1, 0, 2))
    with pytest.raises(ParameterError):
        synthesize(ext, 0.1, "zero-mean")
    with pytest.raises(ParameterError):
        synthesize(ext, 0.1, "crossvariance")
    with pytest.raises(ParameterError):
        synthesize(ext, 0.1, "nonsense")
    assert synthesize(ext, 0.1).variant == "covariance"


def test_with_amplitude_rescales():
    ext = ExtendedDither(SinusoidalDither([1.0], [1.0]), enumerate_basis(1, 1, 2))
    spec = synthesize(ext, 0.1)
    t = np.array([0.3, 1.1])
    np.testing.assert_allclose(spec.with_amplitude(0.2).h(t), spec.h(t, 0.2))
    np.testing.assert_allclose(spec.h(t, 0.2)[:, 0] * 0.2, spec.h(t)[:, 0] * 0.1)
    np.testing.assert_allclose(spec.h(t, 0.2)[:, 1] * 0.04, spec.h(t)[:, 1] * 0.01)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_closed_form_matches_numerical_synthesis(m):
    a = 0.1
    ext = ExtendedDither(SinusoidalDither([1.0], [1.0]), enumerate_basis(1, 0, m))
    spec = synthesize(ext, a, "covariance")
    tau = np.linspace(0, 2 * PI, 257)
    np.testing.assert_allclose(spec.h(tau)[:, -1], closed_form_sinusoidal_h(m, a)(tau), rtol=1e-6, atol=1e-6 * 2**m * math.factorial(m) / a**m)


def test_sine_power_identities():
    C = sine_power_coefficients(3)
    # sin^2 = 1/2 - cos(2t)/2, sin^3 = 3/4 sin t - sin(3t)/4, with rho_perp = (1, sin, cos2, sin3)
    assert C[2] == [Fraction(1, 2), 0, Fraction(-1, 2), 0]
    assert C[3] == [0, Fraction(3, 4), 0, Fraction(-1, 4)]


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_G_orthogonalizes_sine_powers(m):
    G, Qp = appendix_matrices(m)
    assert np.allclose(np.triu(G, 1), 0)
    t = np.linspace(0, 2 * PI, 512, endpoint=False)
    rho = np.sin(t)[:, None] ** np.arange(m + 1)
    perp = rho @ G.T
    # uniform sampling averages trigonometric polynomials exactly
    np.testing.assert_allclose(perp.T @ perp / len(t), Qp, atol=1e-10)


def test_appendix_equivalence_report():
    rep = verify_appendix_equivalence(4, 0.1)
    assert rep.passed
    assert rep.worst < 1e-6
    assert rep.g_residual < 1e-8
    with pytest.raises(ParameterError):
        verify_appendix_equivalence(9)


def test_sinusoidal_rules_match_numerical_zero_mean():
    d = SinusoidalDither([1.0, 1.0], [4.0, 7.0])
    ext = ExtendedDither(d, enumerate_basis(2, 1, 2))
    rules = sinusoidal_rules_h(d, ext.basis, 0.2)
    numeric = synthesize(ext, 0.2, "zero-mean")
    t = np.linspace(0, 2 * PI, 101)
    np.testing.assert_allclose(rules.h(t), numeric.h(t), rtol=1e-8, atol=1e-8)
    assert rules.h(0.3).shape == (5,)


def test_sinusoidal_rules_validation():
    d = SinusoidalDither([1.0], [1.0])
    with pytest.raises(ParameterError):
        sinusoidal_rules_h(d, enumerate_basis(1, 0, 2), 0.1)
    with pytest.raises(ParameterError):
        sinusoidal_rules_h(TriangleArmDither(), enumerate_basis(2, 1, 1), 0.1)


@settings(max_examples=10, deadline=None)
@given(
    st.lists(st.floats(0.3, 2.0), min_size=2, max_size=2),
    st.sampled_from([(1.0, 2.0), (2.0, 5.0), (3.0, 4.0)]),
    st.floats(0.05, 0.5),
)
def test_defining_property_holds_for_valid_dithers(amps, rates, a):
    ext = ExtendedDither(SinusoidalDither(amps, list(rates)), enumerate_basis(2, 1, 1))
    spec = synthesize(ext, a)
    # mean(h rho~^T) = A^-1
    assert np.max(np.abs(spec.defining_residual())) < 1e-6 / a


def test_export_table_round_trip(tmp_path):
    spec = synthesize(arm(1, 1), 0.154, "crossvariance", r=ARM_R)
    path = tmp_path / "h.csv"
    spec.export_table(path)
    from escdemod.signals import read_waveform_csv

    t, v, d = read_waveform_csv(path)
    np.testing.assert_allclose(v, spec.h(t), atol=1e-12)
    assert t[0] == 0.0 and t[-1] == pytest.approx(2.0)
