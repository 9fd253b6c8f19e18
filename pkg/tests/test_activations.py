import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mergeguard import activations as A
from mergeguard.activations import Kind

GRID = np.linspace(-10, 10, 2001)
KINDS = list(Kind)


def _scalar_reference(kind, x, alpha, beta=1.0):
    # pointwise definitions using only the math module
    if kind is Kind.PRELU:
        return x if x > 0 else alpha * x
    if kind is Kind.ELU:
        return x if x > 0 else alpha * x + (1 - alpha) * beta * (math.exp(x) - 1)
    if kind is Kind.GELU:
        phi = 0.5 * (1 + math.erf(x / math.sqrt(2)))
        return x * (phi + alpha * (1 - phi))
    s = 1 / (1 + math.exp(-x))
    return x * (s + alpha * (1 - s))


@pytest.mark.parametrize("kind", KINDS)
def test_alpha_one_is_identity(kind):
    assert np.max(np.abs(A.evaluate(kind, GRID, 1.0) - GRID)) <= 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_alpha_zero_is_base(kind):
    assert np.max(np.abs(A.evaluate(kind, GRID, 0.0) - A.base_activation(kind, GRID))) <= 1e-6


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7, 1.0])
def test_matches_scalar_reference(kind, alpha):
    xs = np.linspace(-6, 6, 97)
    expected = np.array([_scalar_reference(kind, float(x), alpha) for x in xs])
    np.testing.assert_allclose(A.evaluate(kind, xs, alpha), expected, atol=1e-12)


def test_base_reference_values():
    assert A.base_activation(Kind.PRELU, -2.0) == 0.0
    assert A.base_activation(Kind.ELU, -1.0) == pytest.approx(math.exp(-1) - 1)
    assert A.base_activation(Kind.GELU, 1.0) == pytest.approx(0.8413447460685429)
    assert A.base_activation(Kind.SILU, 1.0) == pytest.approx(0.7310585786300049)


def test_elu_beta_scales_negative_branch():
    x = np.array([-2.0, 3.0])
    np.testing.assert_allclose(A.elu_linearized(x, 0.0, beta=2.0), [2 * (math.exp(-2) - 1), 3.0])
    with pytest.raises(ValueError):
        A.elu_linearized(x, 0.5, beta=0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_derivatives_match_finite_differences(kind):
    x = np.linspace(-4, 4, 41) + 0.013  # keep off the PReLU kink
    alpha, h = 0.37, 1e-6
    y, dx, da = A.derivatives(kind, x, alpha)
    np.testing.assert_allclose(y, A.evaluate(kind, x, alpha))
    fd_x = (A.evaluate(kind, x + h, alpha) - A.evaluate(kind, x - h, alpha)) / (2 * h)
    fd_a = (A.evaluate(kind, x, alpha + h) - A.evaluate(kind, x, alpha - h)) / (2 * h)
    np.testing.assert_allclose(dx, fd_x, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(da, fd_a, rtol=1e-6, atol=1e-8)


@given(st.floats(-700, 700))
def test_clamp_alpha_stays_in_unit_interval(raw):
    a = A.clamp_alpha(raw)
    assert 0.0 <= a <= 1.0
    assert math.isfinite(a)


@given(st.floats(1e-6, 1 - 1e-6))
def test_inverse_clamp_round_trip(alpha):
    assert A.clamp_alpha(A.inverse_clamp_alpha(alpha)) == pytest.approx(alpha, rel=1e-9)


def test_inverse_clamp_rejects_endpoints():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            A.inverse_clamp_alpha(bad)


def test_logistic_extremes_do_not_overflow():
    with np.errstate(over="raise"):
        out = A.logistic(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


@given(st.sampled_from(KINDS), st.floats(0, 1), st.floats(-50, 50))
def test_blend_is_affine_in_alpha(kind, alpha, x):
    # f_alpha = (1 - alpha) * base + alpha * x for every family
    expected = (1 - alpha) * float(A.base_activation(kind, x)) + alpha * x
    assert float(A.evaluate(kind, np.float64(x), alpha)) == pytest.approx(expected, rel=1e-9, abs=1e-9)
