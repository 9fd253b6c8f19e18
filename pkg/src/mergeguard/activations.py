"""Parametric activations blending a base nonlinearity with the identity.

Each activation takes a linearity coefficient ``alpha``: at ``alpha=0`` it is
the base function (ReLU, ELU, GeLU, SiLU) and at ``alpha=1`` it is exactly
the identity. These are plain numpy functions; the differentiable wrapper
lives in :mod:`mergeguard.autodiff`.
"""
from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import erf

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Kind(str, enum.Enum):
    PRELU = "prelu"
    ELU = "elu"
    GELU = "gelu"
    SILU = "silu"


def logistic(z):
    z = np.asarray(z)
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_alpha(raw_alpha):
    """Map an unconstrained parameter to alpha in (0, 1) via the logistic."""
    if np.ndim(raw_alpha) == 0:
        r = float(raw_alpha)
        if r >= 0:
            return 1.0 / (1.0 + math.exp(-r))
        e = math.exp(r)
        return e / (1.0 + e)
    return logistic(raw_alpha)


def inverse_clamp_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    return math.log(alpha / (1.0 - alpha))


def gaussian_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x) / SQRT2))


def prelu(x, alpha):
    x = np.asarray(x)
    return np.maximum(x, 0) + alpha * np.minimum(x, 0)


def elu_linearized(x, alpha, beta=1.0):
    if beta <= 0:
        raise ValueError(f"ELU beta must be positive, got {beta}")
    x = np.asarray(x)
    neg = np.minimum(x, 0)
    return np.where(x > 0, x, alpha * x + (1 - alpha) * beta * np.expm1(neg))


def gelu_linearized(x, alpha):
    x = np.asarray(x)
    phi = gaussian_cdf(x)
    return x * (phi + alpha * (1 - phi))


def silu_linearized(x, alpha):
    x = np.asarray(x)
    s = logistic(x)
    return x * (s + alpha * (1 - s))


def base_activation(kind, x, beta=1.0):
    """The ``alpha=0`` reference function, written independently of the blends."""
    kind = Kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is Kind.PRELU:
        return np.maximum(x, 0.0)
    if kind is Kind.ELU:
        return np.where(x > 0, x, beta * np.expm1(np.minimum(x, 0.0)))
    if kind is Kind.GELU:
        return 0.5 * x * (1.0 + erf(x / SQRT2))
    return x / (1.0 + np.exp(-x))


def evaluate(kind, x, alpha, beta=1.0):
    kind = Kind(kind)
    if kind is Kind.PRELU:
        return prelu(x, alpha)
    if kind is Kind.ELU:
        return elu_linearized(x, alpha, beta)
    if kind is Kind.GELU:
        return gelu_linearized(x, alpha)
    return silu_linearized(x, alpha)


def derivatives(kind, x, alpha, beta=1.0):
    """Return ``(f(x), df/dx, df/dalpha)`` elementwise."""
    kind = Kind(kind)
    x = np.asarray(x)
    if kind is Kind.PRELU:
        neg = np.minimum(x, 0)
        y = np.maximum(x, 0) + alpha * neg
        dx = np.where(x > 0, 1.0, alpha).astype(x.dtype)
        return y, dx, neg
    if kind is Kind.ELU:
        em1 = np.expm1(np.minimum(x, 0))
        pos = x > 0
        y = np.where(pos, x, alpha * x + (1 - alpha) * beta * em1)
        dx = np.where(pos, 1.0, alpha + (1 - alpha) * beta * (em1 + 1)).astype(x.dtype)
        da = np.where(pos, 0.0, x - beta * em1).astype(x.dtype)
        return y, dx, da
    if kind is Kind.GELU:
        h = gaussian_cdf(x).astype(x.dtype)
        dh = (INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(x.dtype)
    else:
        h = logistic(x)
        dh = h * (1 - h)
    y = x * (h + alpha * (1 - h))
    dx = (1 - alpha) * (h + x * dh) + alpha
    da = x * (1 - h)
    return y, dx, da
