"""Random coefficient models: mode ordering, transforms, decay, assumptions."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxqmc import (ModelInvalidError, build_mode_ordering, check_assumptions,
                     compute_decay, eval_field, make_field_model,
                     model_from_config, xi_eval)
from fluxqmc.field import field_from_psi, partial_from_psi, psi_values


def brute_force_modes(s):
    """Independent enumeration of the first s modes over a generous box."""
    K = 4 * math.isqrt(s) + 8
    all_modes = sorted(((k * k + l * l, k, l)
                        for k in range(1, K) for l in range(1, K)))
    return all_modes[:s]


# ---------------------------------------------------------------------------
# mode ordering
# ---------------------------------------------------------------------------

def test_mode_ordering_head():
    k, l, amp = build_mode_ordering(6, 1.3)
    assert (k[0], l[0]) == (1, 1)
    assert amp[0] == pytest.approx(2 ** -1.3)
    assert (k[1], l[1]) == (1, 2) and (k[2], l[2]) == (2, 1)
    assert (k[3], l[3]) == (2, 2)          # 8 < 10 of (1,3)
    assert (k[4], l[4]) == (1, 3) and (k[5], l[5]) == (3, 1)


def test_mode_ordering_amplitudes_non_increasing():
    _, _, amp = build_mode_ordering(200, 1.3)
    assert np.all(np.diff(amp) <= 0)


def test_mode_ordering_bijection_to_500():
    k, l, _ = build_mode_ordering(500, 1.3)
    got = list(zip(k.tolist(), l.tolist()))
    want = [(kk, ll) for _, kk, ll in brute_force_modes(500)]
    assert got == want
    assert len(set(got)) == 500


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def test_xi_identity():
    assert xi_eval("identity", 0.3, 0) == 0.3
    assert xi_eval("identity", 0.3, 1) == 1.0
    assert xi_eval("identity", 0.3, 2) == 0.0


def test_xi_gevrey_affine_values():
    # omega = 4 corresponds to order sigma = 1.25
    assert float(xi_eval("gevrey-affine", 0.5, 0, 4.0)) == pytest.approx(math.exp(-1))
    assert float(xi_eval("gevrey-affine", 0.5, 1, 4.0)) == pytest.approx(
        math.exp(-1) * 4.0, rel=1e-12)
    assert float(xi_eval("gevrey-affine", -0.5, 0, 4.0)) == 0.0
    assert float(xi_eval("gevrey-affine", -0.5, 1, 4.0)) == 0.0
    assert float(xi_eval("gevrey-affine", -0.5 + 1e-12, 0, 4.0)) == 0.0  # underflow


def test_xi_gevrey_sign_values():
    assert float(xi_eval("gevrey-sign", 0.0, 0, 4.0)) == 0.0
    assert float(xi_eval("gevrey-sign", 0.0, 1, 4.0)) == 0.0
    assert float(xi_eval("gevrey-sign", 0.0, 2, 4.0)) == 0.0
    v = float(xi_eval("gevrey-sign", 1.0, 0, 4.0))
    assert v == pytest.approx(math.exp(-1))
    assert float(xi_eval("gevrey-sign", -1.0, 0, 4.0)) == pytest.approx(-v)
    # odd function, even first derivative
    assert float(xi_eval("gevrey-sign", -0.7, 1, 4.0)) == pytest.approx(
        float(xi_eval("gevrey-sign", 0.7, 1, 4.0)))


@pytest.mark.parametrize("xi,omega,grid", [
    ("gevrey-affine", 4.0, np.linspace(-0.3, 0.5, 41)),
    ("gevrey-affine", 2.0, np.linspace(-0.2, 0.5, 31)),
    ("gevrey-sign", 4.0, np.concatenate([np.linspace(-2, -0.3, 20),
                                         np.linspace(0.3, 2, 20)])),
])
def test_xi_derivatives_match_finite_differences(xi, omega, grid):
    h = 1e-6
    for t in grid:
        d1 = (float(xi_eval(xi, t + h, 0, omega))
              - float(xi_eval(xi, t - h, 0, omega))) / (2 * h)
        a1 = float(xi_eval(xi, t, 1, omega))
        assert a1 == pytest.approx(d1, rel=1e-5, abs=1e-12)
        d2 = (float(xi_eval(xi, t + h, 1, omega))
              - float(xi_eval(xi, t - h, 1, omega))) / (2 * h)
        a2 = float(xi_eval(xi, t, 2, omega))
        assert a2 == pytest.approx(d2, rel=1e-5, abs=1e-10)


def test_xi_order_capacity():
    from fluxqmc import CapacityError
    with pytest.raises(CapacityError):
        xi_eval("identity", 0.1, 3)


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------

def test_affine_at_zero_parameters():
    m = make_field_model("affine", "identity", s=10)
    x = np.array([[0.3, 0.4], [0.9, 0.1]])
    assert np.allclose(eval_field(m, x, np.zeros(10)), 5.0)


def test_lognormal_at_zero_parameters():
    m = make_field_model("lognormal", "identity", s=10)
    assert np.allclose(eval_field(m, np.array([0.3, 0.4]), np.zeros(10)), 1.0)


def test_affine_single_mode_value():
    m = make_field_model("affine", "identity", s=1)
    got = eval_field(m, np.array([0.5, 0.5]), np.array([0.5]))
    assert got == pytest.approx(5 + 0.5 * 2 ** -1.3, rel=1e-12)
    assert got == pytest.approx(5.203063, abs=1e-6)


def test_field_positivity_random_samples():
    rng = np.random.default_rng(0)
    for kind, xi in (("affine", "identity"), ("affine", "gevrey-affine"),
                     ("lognormal", "identity"), ("lognormal", "gevrey-sign")):
        m = make_field_model(kind, xi, s=30)
        x = rng.random((2000, 2))
        y = (rng.random((50, 30)) - 0.5 if kind == "affine"
             else rng.normal(size=(50, 30)))
        psi = psi_values(m, x)
        vals = field_from_psi(m, psi, y)
        assert np.all(vals > 0.0), (kind, xi)


def test_truncation_consistency_zero_padding():
    # transforms with xi(0) = 0 make extra zero-padded coordinates inert
    rng = np.random.default_rng(1)
    x = rng.random((20, 2))
    for kind, xi in (("affine", "identity"), ("lognormal", "identity"),
                     ("lognormal", "gevrey-sign")):
        small = make_field_model(kind, xi, s=12)
        large = make_field_model(kind, xi, s=20)
        y = (rng.random(12) - 0.5) if kind == "affine" else rng.normal(size=12)
        pad = np.concatenate([y, np.zeros(8)])
        assert np.array_equal(eval_field(small, x, y), eval_field(large, x, pad))


def test_affine_offset_must_dominate():
    with pytest.raises(ModelInvalidError):
        make_field_model("affine", "identity", s=100, offset=0.5)


def test_model_from_config_roundtrip():
    cfg = {"kind": "lognormal", "xi": "gevrey-sign", "sigma": 1.25, "s": 7,
           "theta": 1.3, "seed": 3}
    m = model_from_config(cfg)
    assert m.kind == "lognormal" and m.s == 7 and m.omega == pytest.approx(4.0)


def test_parameter_length_mismatch():
    m = make_field_model("affine", "identity", s=4)
    with pytest.raises(ValueError):
        eval_field(m, np.array([0.5, 0.5]), np.zeros(5))


# ---------------------------------------------------------------------------
# decay sequence
# ---------------------------------------------------------------------------

def test_decay_lognormal_leading_term():
    d = compute_decay(make_field_model("lognormal", "identity", s=100))
    assert d.b[0] == pytest.approx(2 ** -1.3, rel=1e-12)
    assert np.all(np.diff(d.b) <= 0)


def test_decay_affine_bound_via_direct_sum():
    # direct 100-term amplitude sum oracle
    amps = [(k * k + l * l) ** -1.3 for _, k, l in brute_force_modes(100)]
    total = sum(amps)
    assert total == pytest.approx(1.404678609675234, rel=1e-12)
    d = compute_decay(make_field_model("affine", "identity", s=100))
    assert d.a_min_bound == pytest.approx(5.0 - 0.5 * total, rel=1e-12)
    assert d.b[0] == pytest.approx(amps[0] / (5.0 - 0.5 * total), rel=1e-12)


def test_decay_summability_estimate():
    d = compute_decay(make_field_model("lognormal", "identity", s=100))
    assert d.p_estimate == pytest.approx(1 / 1.3, abs=0.05)


# ---------------------------------------------------------------------------
# analytic parameter derivatives of the coefficient
# ---------------------------------------------------------------------------

def test_partial_lognormal_identity_is_psi_times_a():
    m = make_field_model("lognormal", "identity", s=5)
    rng = np.random.default_rng(2)
    x = rng.random((50, 2))
    y = rng.normal(size=5)
    psi = psi_values(m, x)
    a = field_from_psi(m, psi, y)
    d1 = partial_from_psi(m, psi, a, y, (2,))
    assert np.allclose(d1, psi[2] * a)
    d2 = partial_from_psi(m, psi, a, y, (1, 3))
    assert np.allclose(d2, psi[1] * psi[3] * a)


def test_partial_affine_identity():
    m = make_field_model("affine", "identity", s=5)
    rng = np.random.default_rng(3)
    x = rng.random((50, 2))
    y = rng.random(5) - 0.5
    psi = psi_values(m, x)
    a = field_from_psi(m, psi, y)
    assert np.allclose(partial_from_psi(m, psi, a, y, (2,)), psi[2])
    assert np.allclose(partial_from_psi(m, psi, a, y, (0, 1)), 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_partial_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    m = make_field_model("lognormal", "gevrey-sign", s=4)
    x = rng.random((10, 2))
    y = rng.normal(size=4)
    psi = psi_values(m, x)
    a = field_from_psi(m, psi, y)
    h = 1e-6
    j = int(rng.integers(0, 4))
    yp, ym = y.copy(), y.copy()
    yp[j] += h
    ym[j] -= h
    fd = (field_from_psi(m, psi, yp) - field_from_psi(m, psi, ym)) / (2 * h)
    got = partial_from_psi(m, psi, a, y, (j,))
    assert np.allclose(got, fd, rtol=1e-4, atol=1e-9)


# ---------------------------------------------------------------------------
# assumption probes
# ---------------------------------------------------------------------------

def test_check_assumptions_lognormal_identity():
    m = make_field_model("lognormal", "identity", s=8)
    rng = np.random.default_rng(5)
    ys = rng.normal(size=(10, 8))
    rep = check_assumptions(m, ys)
    # first derivative ratio equals psi_j exactly, so the implied constant
    # is 1 for single indices and stays at 1 for products
    assert rep["implied_C_G"] == pytest.approx(1.0, abs=1e-9)
    assert rep["implied_C_Q"] <= 1.0 + 1e-9


def test_check_assumptions_affine_bounded_by_one():
    m = make_field_model("affine", "identity", s=8)
    rng = np.random.default_rng(6)
    ys = rng.random((10, 8)) - 0.5
    rep = check_assumptions(m, ys)
    # |psi_j / a| <= amp_j / a_min = b_j pointwise
    assert rep["implied_C_G"] <= 1.0 + 1e-9
    assert rep["implied_C_Q"] is None


def test_check_assumptions_gevrey_sign_bounded_by_xi_slope():
    m = make_field_model("lognormal", "gevrey-sign", s=6)
    rng = np.random.default_rng(7)
    ys = rng.normal(size=(100, 6))
    rep = check_assumptions(m, ys)
    ts = np.linspace(-8, 8, 20001)
    sup_slope = float(np.max(np.abs(xi_eval("gevrey-sign", ts, 1, 4.0))))
    assert rep["implied_C_G"] <= sup_slope ** 2 + 1e-9
