"""Convex entropy generators and the associated functionals.

Four built-in families:

* ``variance``            x^2 on R
* ``boltzmann``           x ln x on [0, inf), 0 at 0 by continuity
* ``power`` (1 < p <= 2)  (x^p - x) / (p (p-1)) on [0, inf); p = 1 is x ln x
* ``gauss-isoperimetry``  minus the Gaussian isoperimetric profile on [0, 1]

Every family is strictly convex on the interior of its interval with
-1/phi'' convex, which is the admissibility needed by the entropy
inequalities checked in :mod:`fplab.verify`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, xlogy

from .model import Measure, check_field, integrate


class PhiError(ValueError):
    pass


class IntervalError(PhiError):
    """Field takes values outside the generator's interval."""


@dataclass(frozen=True)
class PhiFunction:
    """Entropy generator with interval, derivatives and admissibility flags."""

    label: str
    interval: tuple  # (lo, hi), may be infinite
    closed: tuple    # whether each finite endpoint is admissible for phi itself
    phi: object
    dphi: object
    d2phi: object
    strictly_convex: bool = True
    neg_inv_d2_convex: bool = True

    def check_values(self, f):
        lo, hi = self.interval
        fmin, fmax = float(np.min(f)), float(np.max(f))
        if fmin < lo or (fmin == lo and not self.closed[0] and lo > -np.inf):
            raise IntervalError(
                f"values reach {fmin}, below the {self.label} interval {self.interval}"
            )
        if fmax > hi or (fmax == hi and not self.closed[1] and hi < np.inf):
            raise IntervalError(
                f"values reach {fmax}, above the {self.label} interval {self.interval}"
            )


def _variance_phi():
    return PhiFunction(
        label="variance",
        interval=(-np.inf, np.inf),
        closed=(False, False),
        phi=lambda x: np.asarray(x, dtype=float) ** 2,
        dphi=lambda x: 2.0 * np.asarray(x, dtype=float),
        d2phi=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
    )


def _boltzmann_phi():
    def phi(x):
        x = np.asarray(x, dtype=float)
        return xlogy(x, x)

    return PhiFunction(
        label="boltzmann",
        interval=(0.0, np.inf),
        closed=(True, False),
        phi=phi,
        dphi=lambda x: np.log(np.asarray(x, dtype=float)) + 1.0,
        d2phi=lambda x: 1.0 / np.asarray(x, dtype=float),
    )


def _power_phi(p):
    c = 1.0 / (p * (p - 1.0))

    def phi(x):
        x = np.asarray(x, dtype=float)
        return (np.power(x, p) - x) * c

    def dphi(x):
        x = np.asarray(x, dtype=float)
        return (p * np.power(x, p - 1.0) - 1.0) * c

    def d2phi(x):
        x = np.asarray(x, dtype=float)
        return np.power(x, p - 2.0)

    return PhiFunction(
        label=f"power-{p:g}",
        interval=(0.0, np.inf),
        closed=(True, False),
        phi=phi,
        dphi=dphi,
        d2phi=d2phi,
    )


# Acklam's rational minimax approximation to the inverse normal CDF
# (relative error below 1.2e-9), polished by one Newton step on the CDF.
_ACK_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACK_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_ACK_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACK_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _acklam(q):
    """Raw rational approximation of the standard normal quantile."""
    q = np.asarray(q, dtype=float)
    z = np.empty_like(q)
    low = q < 0.02425
    high = q > 1.0 - 0.02425
    mid = ~(low | high)

    if mid.any():
        r = q[mid] - 0.5
        s = r * r
        a, b = _ACK_A, _ACK_B
        num = ((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]
        den = ((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1.0
        z[mid] = r * num / den

    for mask, sign in ((low, 1.0), (high, -1.0)):
        if not mask.any():
            continue
        qq = q[mask] if sign > 0 else 1.0 - q[mask]
        r = np.sqrt(-2.0 * np.log(qq))
        c, d = _ACK_C, _ACK_D
        num = ((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]
        den = (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0
        z[mask] = sign * num / den
    return z


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def norm_quantile(q):
    """Inverse standard normal CDF, accurate to about one ulp."""
    q = np.asarray(q, dtype=float)
    z = _acklam(q)
    # one Newton step on the CDF
    return z - (ndtr(z) - q) / _norm_pdf(z)


def gauss_isoperimetry_u(x):
    """Gaussian isoperimetric profile: normal density at the normal quantile.

    Symmetric about 1/2, zero at the ends, and its second derivative equals
    -1 over itself on (0, 1).
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if (x < 0.0).any() or (x > 1.0).any():
        raise PhiError("argument must lie in [0, 1]")
    out = np.zeros_like(x)
    inner = (x > 0.0) & (x < 1.0)
    if inner.any():
        # evaluate on min(x, 1-x) so the symmetry holds bit-for-bit
        q = np.minimum(x[inner], 1.0 - x[inner])
        out[inner] = _norm_pdf(norm_quantile(q))
    return float(out[0]) if scalar else out


def _gauss_iso_phi():
    def phi(x):
        return -gauss_isoperimetry_u(x)

    def dphi(x):
        x = np.asarray(x, dtype=float)
        return norm_quantile(x)

    def d2phi(x):
        return 1.0 / gauss_isoperimetry_u(x)

    return PhiFunction(
        label="gauss-isoperimetry",
        interval=(0.0, 1.0),
        closed=(True, True),
        phi=phi,
        dphi=dphi,
        d2phi=d2phi,
    )


def make_phi(kind: str, p: float | None = None) -> PhiFunction:
    """Build one of the entropy generator families."""
    if kind == "variance":
        return _variance_phi()
    if kind == "boltzmann":
        return _boltzmann_phi()
    if kind == "gauss-isoperimetry":
        return _gauss_iso_phi()
    if kind == "power":
        if p is None or not 1.0 <= p <= 2.0:
            raise PhiError(f"power family needs p in [1, 2], got {p}")
        if p == 1.0:
            return _boltzmann_phi()
        return _power_phi(float(p))
    raise PhiError(f"unknown generator kind {kind!r}")


def phi_entropy(mu: Measure, phi: PhiFunction, f) -> float:
    """mu(phi(f)) - phi(mu(f)); nonnegative by Jensen for convex phi."""
    f = check_field(mu.grid, f)
    phi.check_values(f)
    mean = integrate(mu, f)
    ent = integrate(mu, phi.phi(f)) - float(phi.phi(mean))
    if ent < -1e-12:
        raise ArithmeticError(f"entropy {ent} below Jensen floor")
    return ent


def _check_positive(g):
    if (g <= 0.0).any():
        raise PhiError("test function must be positive")


def beckner_functional(mu: Measure, g, p: float) -> float:
    """(mu(g^2) - mu(g^(2/p))^p) / (p - 1), with the entropy limit near p = 1.

    At p = 2 this is the variance of g; for |p - 1| < 1e-3 the formula is
    replaced by the entropy of g^2, its limit as p -> 1, to avoid the
    0/0 cancellation.
    """
    g = check_field(mu.grid, g)
    _check_positive(g)
    if p <= 0.0:
        raise PhiError(f"p must be positive, got {p}")
    if abs(p - 1.0) < 1e-3:
        g2 = g * g
        m = integrate(mu, g2)
        return integrate(mu, xlogy(g2, g2)) - m * math.log(m)
    a = integrate(mu, g**2)
    b = integrate(mu, np.power(g, 2.0 / p)) ** p
    return (a - b) / (p - 1.0)


def refined_functional(mu: Measure, g, p: float) -> float:
    """Strengthened interpolation functional dominating the plain one.

    (p / (2 (p-1)^2)) * [A - B (A/B)^(2/p - 1)] with A = mu(g^2) and
    B = mu(g^(2/p))^p.  Reduces to the variance at p = 2 and vanishes for
    constant g.  Evaluated through expm1/log1p so the bracket keeps full
    relative precision when A is close to B.
    """
    g = check_field(mu.grid, g)
    _check_positive(g)
    if not 1.0 < p <= 2.0:
        raise PhiError(f"p must lie in (1, 2], got {p}")
    a = integrate(mu, g**2)
    b = integrate(mu, np.power(g, 2.0 / p)) ** p
    diff = a - b  # >= 0 by Jensen
    expo = 2.0 / p - 1.0
    bracket = diff - b * np.expm1(expo * np.log1p(diff / b))
    return (p / (2.0 * (p - 1.0) ** 2)) * float(bracket)


def p_sweep(mu: Measure, g, p_grid):
    """Evaluate both interpolation functionals along a grid of exponents.

    Returns (p, plain, refined) arrays; the refined column holds NaN outside
    its validity range (1, 2].  Both maps are nonincreasing in p for any
    probability measure, which callers may verify.
    """
    ps = np.asarray(p_grid, dtype=float)
    plain = np.array([beckner_functional(mu, g, p) for p in ps])
    refined = np.array([
        refined_functional(mu, g, p) if 1.0 < p <= 2.0 else np.nan for p in ps
    ])
    return ps, plain, refined


def admissibility_check(phi: PhiFunction, num=401, pad=0.02):
    """Sampled admissibility: phi'' > 0 and -1/phi'' convex on the interior.

    Samples an interior window of the interval (a finite slice of infinite
    intervals) and checks second differences of -1/phi''.  Returns the pair
    of booleans (convex, neg_inv_convex).
    """
    lo, hi = phi.interval
    lo = max(lo, -8.0)
    hi = min(hi, 8.0)
    span = hi - lo
    x = np.linspace(lo + pad * span, hi - pad * span, num)
    d2 = np.asarray(phi.d2phi(x), dtype=float)
    convex = bool((d2 > 0.0).all())
    v = -1.0 / d2
    second = v[2:] - 2.0 * v[1:-1] + v[:-2]
    scale = max(1.0, float(np.max(np.abs(v))))
    neg_inv_convex = bool((second >= -1e-8 * scale).all())
    return convex, neg_inv_convex
