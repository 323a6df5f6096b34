"""Discrete generator, carre du champ and iterated form, curvature estimates.

The generator acts on node fields by second-order central differences inside
the box and one-sided second-order stencils on the boundary:

    L f = sum_ij D_ij d2f/dx_i dx_j - sum_i a_i df/dx_i

The bilinear form Gamma(f, g) = <grad f, D grad g> uses the same gradients,
and Gamma2(f) = (L Gamma(f) - 2 Gamma(f, Lf)) / 2 is evaluated by operator
composition, so nested stencils are only trustworthy two nodes away from the
boundary.  All functions are pure; results never depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Grid, Measure, ModelFields, check_field, integrate


class OperatorError(ValueError):
    pass


class NonConstantDiffusionError(OperatorError):
    """Eigenvalue curvature bound needs constant D; use the sampled estimate."""


class InconclusiveError(OperatorError):
    """All test fields had vanishing gradient energy."""


def _axis_view(grid, f):
    return np.asarray(f, dtype=float).reshape(grid.shape)


def diff1(grid: Grid, f, axis) -> np.ndarray:
    """First derivative along an axis: central inside, one-sided at edges."""
    u = _axis_view(grid, f)
    h = grid.spacings[axis]
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2.0 * h)
    out[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h)
    out[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * h)
    return np.moveaxis(out, 0, axis).ravel()


def diff2(grid: Grid, f, axis) -> np.ndarray:
    """Second derivative along an axis, second order up to the boundary."""
    u = _axis_view(grid, f)
    h2 = grid.spacings[axis] ** 2
    u = np.moveaxis(u, axis, 0)
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h2
    out[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / h2
    out[-1] = (2.0 * u[-1] - 5.0 * u[-2] + 4.0 * u[-3] - u[-4]) / h2
    return np.moveaxis(out, 0, axis).ravel()


def gradient(grid: Grid, f) -> np.ndarray:
    """(nn, dim) array of first derivatives."""
    f = check_field(grid, f)
    return np.stack([diff1(grid, f, k) for k in range(grid.dim)], axis=1)


def apply_generator(mf: ModelFields, f) -> np.ndarray:
    """L f = sum_ij D_ij d2_ij f - sum_i a_i d_i f on the grid."""
    grid = mf.grid
    f = check_field(grid, f)
    out = np.zeros(grid.num_nodes)
    for k in range(grid.dim):
        out += mf.D[:, k, k] * diff2(grid, f, k)
    if grid.dim == 2:
        mixed = diff1(grid, diff1(grid, f, 1), 0)
        out += 2.0 * mf.D[:, 0, 1] * mixed
    grad = gradient(grid, f)
    out -= np.einsum("ni,ni->n", mf.a, grad)
    return out


def gamma(mf: ModelFields, f, g=None) -> np.ndarray:
    """Carre du champ Gamma(f, g) = <grad f, D grad g> node-wise."""
    grid = mf.grid
    gf = gradient(grid, f)
    gg = gf if g is None or g is f else gradient(grid, g)
    return np.einsum("ni,nij,nj->n", gf, mf.D, gg)


def gamma2(mf: ModelFields, f) -> np.ndarray:
    """Gamma2(f) = (L Gamma(f) - 2 Gamma(f, Lf)) / 2 by composition.

    Only interior nodes (two-node margin) carry second-order accuracy.
    """
    gf = gamma(mf, f)
    lf = apply_generator(mf, f)
    return 0.5 * (apply_generator(mf, gf) - 2.0 * gamma(mf, f, lf))


@dataclass(frozen=True)
class CdEstimate:
    """Lower curvature bound estimate for the generator.

    ``method`` is "constant-diffusion-eigenvalue" (matrix criterion, reliable)
    or "sampled-gamma2" (an upper bound on the true constant, lower
    confidence).
    """

    rho: float
    method: str
    argmin: tuple
    metadata: dict = field(default_factory=dict)


def _min_generalized_eig(M, D):
    """Smallest lambda with M v = lambda D v, per node; d in {1, 2}, D PD."""
    d = M.shape[1]
    if d == 1:
        return M[:, 0, 0] / D[:, 0, 0]
    # roots of det(M - lambda D) = 0, a quadratic with positive leading term
    a = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] ** 2
    b = -(M[:, 0, 0] * D[:, 1, 1] + M[:, 1, 1] * D[:, 0, 0]
          - 2.0 * M[:, 0, 1] * D[:, 0, 1])
    c = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] ** 2
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    q = -0.5 * (b + np.copysign(disc, b))
    r1 = q / a
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(q != 0.0, c / np.where(q != 0.0, q, 1.0), r1)
    return np.minimum(r1, r2)


def cd_rho_constant_d(mf: ModelFields) -> CdEstimate:
    """Best rho with sym(Ja D) >= rho D as quadratic forms, for constant D.

    Exact up to the eigenvalue solve; the minimizing node is reported.
    """
    if not mf.constant_diffusion:
        raise NonConstantDiffusionError(
            "diffusion varies over the grid; use cd_rho_sampled instead"
        )
    jd = np.einsum("nij,jk->nik", mf.Ja, mf.D[0])
    M = 0.5 * (jd + np.swapaxes(jd, 1, 2))
    lam = _min_generalized_eig(M, mf.D)
    i = int(np.argmin(lam))
    coords = tuple(float(c) for c in mf.grid.node_coords()[i])
    return CdEstimate(
        rho=float(lam[i]),
        method="constant-diffusion-eigenvalue",
        argmin=coords,
        metadata={"grid": mf.grid.shape, "nodes": mf.grid.num_nodes},
    )


def cd_rho_sampled(mf: ModelFields, test_fields, eps=1e-10) -> CdEstimate:
    """Minimize Gamma2(f)/Gamma(f) over test fields and interior nodes.

    This is an upper bound on the true curvature constant (sampling can only
    falsify), hence labeled lower-confidence.  Needs at least 10 analytic
    test fields.
    """
    if len(test_fields) < 10:
        raise OperatorError("need at least 10 test fields")
    grid = mf.grid
    interior = grid.interior_mask(depth=2)
    coords = grid.node_coords()
    best = np.inf
    best_at = None
    used = 0
    for f in test_fields:
        g = gamma(mf, f)
        g2 = gamma2(mf, f)
        mask = interior & (g > eps)
        if not mask.any():
            continue
        used += 1
        ratio = g2[mask] / g[mask]
        j = int(np.argmin(ratio))
        if ratio[j] < best:
            best = float(ratio[j])
            best_at = tuple(float(c) for c in coords[np.nonzero(mask)[0][j]])
    if used == 0:
        raise InconclusiveError("all test fields have Gamma below threshold")
    return CdEstimate(
        rho=best,
        method="sampled-gamma2",
        argmin=best_at,
        metadata={
            "grid": grid.shape,
            "test_fields": len(test_fields),
            "used": used,
            "bound": "upper bound on the true constant",
        },
    )


def default_test_fields(grid: Grid):
    """Fixed analytic battery (polynomials and exponentials) on the nodes."""
    pts = grid.node_coords()
    x = pts[:, 0]
    fields = [
        x,
        x**2,
        x**3 / 3.0,
        1.0 + x + 0.5 * x**2,
        np.exp(x / 2.0),
        np.exp(-x / 2.0),
        np.cosh(x / 2.0),
        np.sinh(x / 3.0),
        x * np.exp(-(x**2) / 8.0),
        np.exp(x / 4.0) + x,
    ]
    if grid.dim == 2:
        y = pts[:, 1]
        fields += [
            y,
            x + y,
            x - y,
            x * y,
            x**2 + y**2,
            np.exp((x + y) / 4.0),
            np.exp(y / 2.0),
            y**2,
        ]
    return fields


def integral_criterion_check(mf: ModelFields, mu: Measure, g, p, rho) -> float:
    """Margin of mu(g^e Gamma2(g)) >= rho mu(g^e Gamma(g)), e = (2-p)/(p-1).

    Nonnegative margin means the weighted integral criterion holds for this
    test function and constant.
    """
    if not 1.0 < p < 2.0:
        raise OperatorError(f"p must lie in (1, 2), got {p}")
    g = check_field(mf.grid, g)
    if (g <= 0.0).any():
        raise OperatorError("test function must be positive")
    e = (2.0 - p) / (p - 1.0)
    weight = g**e
    lhs = integrate(mu, weight * gamma2(mf, g))
    rhs = integrate(mu, weight * gamma(mf, g))
    return lhs - rho * rhs
