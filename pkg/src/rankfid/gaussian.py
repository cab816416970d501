"""Standard normal CDF built on the Abramowitz-Stegun 7.1.26 erf approximation.

The approximation has |error| < 1.5e-7 on erf, hence < 7.5e-8 on the CDF.
Both the value and its exact derivative (of the approximation, not of the true
CDF) are exposed so that analytic gradients agree with finite differences.
"""

import math

import numpy as np

_P = 0.3275911
_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)
_SQRT2 = math.sqrt(2.0)


def _poly(t):
    a1, a2, a3, a4, a5 = _A
    return t * (a1 + t * (a2 + t * (a3 + t * (a4 + t * a5))))


def _dpoly(t):
    a1, a2, a3, a4, a5 = _A
    return a1 + t * (2 * a2 + t * (3 * a3 + t * (4 * a4 + t * 5 * a5)))


def erf_positive(x):
    """Approximate erf on x >= 0 (elementwise). erf(0) is pinned to exactly 0."""
    x = np.asarray(x)
    t = 1.0 / (1.0 + _P * x)
    val = 1.0 - _poly(t) * np.exp(-x * x)
    return np.where(x == 0, np.zeros_like(val), val)


def _erf_positive_grad(x):
    t = 1.0 / (1.0 + _P * x)
    return np.exp(-x * x) * (_P * t * t * _dpoly(t) + 2.0 * x * _poly(t))


def normal_cdf(t):
    """Phi(t), elementwise. Exactly antisymmetric: Phi(-t) = 1 - Phi(t).

    Accepts scalars or arrays; returns a Python float for scalar input.
    """
    if isinstance(t, (float, int)):
        return _normal_cdf_scalar(float(t))
    arr = np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise ValueError("normal_cdf requires finite input")
    half_erf = 0.5 * erf_positive(np.abs(arr) / _SQRT2)
    out = np.where(arr >= 0, 0.5 + half_erf, 0.5 - half_erf)
    if out.ndim == 0:
        return float(out)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64, copy=False)


def _normal_cdf_scalar(t):
    # same formula as the array path, without numpy's per-call overhead
    if not math.isfinite(t):
        raise ValueError("normal_cdf requires finite input")
    x = abs(t) / _SQRT2
    if x == 0:
        return 0.5
    u = 1.0 / (1.0 + _P * x)
    half_erf = 0.5 * (1.0 - _poly(u) * math.exp(-x * x))
    return 0.5 + half_erf if t >= 0 else 0.5 - half_erf


def normal_cdf_grad(t):
    """Derivative of :func:`normal_cdf` as implemented (symmetric in t)."""
    arr = np.asarray(t)
    return 0.5 * _erf_positive_grad(np.abs(arr) / _SQRT2) / _SQRT2
