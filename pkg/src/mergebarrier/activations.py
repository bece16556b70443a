"""GELU / SiLU and their exact higher-order derivatives.

GELU derivatives use the Gaussian-density recursion

    h_0(x) = exp(-x^2/2) / sqrt(2 pi)
    h_n(x) = -x h_{n-1}(x) - (n-1) h_{n-2}(x)
    gelu^(n)(x) = x h_{n-1}(x) + n h_{n-2}(x),   with h_{-1} := Phi

SiLU derivatives are written as polynomials in the logistic sigmoid s using
d/dx s^m = m (s^m - s^(m+1)), and then

    silu^(n)(x) = x s^(n)(x) + n s^(n-1)(x).

All functions broadcast over numpy arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, ndtr

from .errors import ParameterError

MAX_ORDER = 16
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ActivationKind(str, enum.Enum):
    GELU = "gelu"
    SILU = "silu"


def _kind(kind) -> ActivationKind:
    try:
        return ActivationKind(kind.value if isinstance(kind, ActivationKind) else str(kind).lower())
    except ValueError:
        raise ParameterError(f"unknown activation {kind!r}") from None


def _check_order(n):
    if n < 0 or n > MAX_ORDER:
        raise ParameterError(f"derivative order must lie in [0, {MAX_ORDER}], got {n}")


def act_eval(kind, x):
    kind = _kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.GELU:
        return x * ndtr(x)
    return x * expit(x)


def gaussian_h(n: int, x):
    """n-th derivative of the standard normal density at ``x``."""
    if n < 0:
        raise ParameterError(f"order must be >= 0, got {n}")
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.zeros_like(x)
    h = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    for k in range(1, n + 1):
        h, h_prev = -x * h - (k - 1) * h_prev, h
    return h


def _gaussian_h_table(n: int, x):
    """[Phi, h_0, ..., h_n] evaluated at x."""
    out = [ndtr(x), np.exp(-0.5 * x * x) * _INV_SQRT_2PI]
    for k in range(1, n + 1):
        prev2 = out[-2] if k >= 2 else 0.0
        out.append(-x * out[-1] - (k - 1) * prev2)
    return out


def gelu_derivative(n: int, x):
    _check_order(n)
    x = np.asarray(x, dtype=np.float64)
    if n == 0:
        return act_eval(ActivationKind.GELU, x)
    table = _gaussian_h_table(n - 1, x)  # table[j + 1] = h_j, table[0] = h_{-1} = Phi
    h_nm1 = table[n]
    h_nm2 = table[n - 1]
    return x * h_nm1 + n * h_nm2


@dataclass(frozen=True)
class SigmoidPoly:
    """``sigma^(order)(x) = sum_m coeffs[m] * sigma(x)**m``."""

    order: int
    coeffs: tuple

    def __call__(self, x):
        s = expit(np.asarray(x, dtype=np.float64))
        # Horner in s
        acc = np.zeros_like(s)
        for c in reversed(self.coeffs):
            acc = acc * s + c
        return acc


@lru_cache(maxsize=None)
def sigmoid_poly(n: int) -> SigmoidPoly:
    if n < 0:
        raise ParameterError(f"order must be >= 0, got {n}")
    coeffs = [0, 1]
    for _ in range(n):
        nxt = [0] * (len(coeffs) + 1)
        for m, c in enumerate(coeffs):
            if c:
                nxt[m] += m * c
                nxt[m + 1] -= m * c
        coeffs = nxt
    # exact integer recurrence, stored as floats
    return SigmoidPoly(order=n, coeffs=tuple(float(c) for c in coeffs))


def silu_derivative(n: int, x):
    _check_order(n)
    x = np.asarray(x, dtype=np.float64)
    if n == 0:
        return act_eval(ActivationKind.SILU, x)
    return x * sigmoid_poly(n)(x) + n * sigmoid_poly(n - 1)(x)


def derivative(kind, n: int, x):
    """n-th derivative of the chosen activation."""
    if _kind(kind) is ActivationKind.GELU:
        return gelu_derivative(n, x)
    return silu_derivative(n, x)


def taylor_scales(kind, order: int, x) -> np.ndarray:
    """Stack of ``Act^(n)(x) / n!`` for n = 0..order along a new leading axis."""
    _check_order(order)
    return np.stack([derivative(kind, n, x) / math.factorial(n) for n in range(order + 1)])
