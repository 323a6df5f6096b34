"""Conservative finite-volume discretization of the drift-diffusion flow.

The forward operator acts on densities and discretizes

    du/dt = div[ D (grad u + u a) ]

with exponential-fitting (Scharfetter-Gummel / Chang-Cooper) face fluxes and
no-flux boundary faces.  In gradient mode the face drift uses exact potential
differences, so the node-sampled Gibbs density is a steady state of the
discrete system *exactly*, not just to truncation order.

The backward operator (acting on observables, driving the semigroup) is the
volume-weighted transpose of the forward one.  This makes the discrete
duality <A u, f>_vol = <u, L f>_vol exact and, in gradient mode without a
divergence-free part, carries the conjugation between densities and
observables through the exponential of the potential at round-off level.

Time stepping is implicit Euler by default (unconditionally positivity
preserving, an M-matrix property) with Crank-Nicolson opt-in for accuracy
studies.  Linear systems use a sparse direct factorization, reused across
constant-dt steps.  A Propagator is immutable after assembly apart from its
factorization cache and safe to share across threads running separate solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import Grid, Measure, ModelFields, check_field, measure_from_weights


class SolverError(RuntimeError):
    pass


class NonErgodicError(SolverError):
    """The discrete kernel is not one-dimensional."""


def bernoulli(x):
    """B(x) = x / (e^x - 1), the stable exponential-fitting weight.

    Series near zero, x/expm1(x) elsewhere; decays to 0 for large positive
    arguments and grows like |x| for large negative ones, so face Peclet
    numbers of any size are safe.
    """
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.where(small, 1.0 - 0.5 * x + x * x / 12.0,
                       x / np.expm1(np.where(small, 1.0, x)))
    return out


@dataclass
class Propagator:
    """Forward/backward matrix pair with shared cell volumes."""

    grid: Grid
    vol: np.ndarray
    forward: sp.csr_matrix       # acts on densities
    backward: sp.csr_matrix      # acts on observables
    _lu_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def mass(self, u) -> float:
        return float(self.vol @ u)

    def _stepper(self, which, dt, scheme):
        """(solve, rhs_matrix) pair for one time step, cached per (dt, scheme)."""
        key = (which, scheme, float(dt))
        if key not in self._lu_cache:
            op = self.forward if which == "forward" else self.backward
            n = op.shape[0]
            eye = sp.identity(n, format="csr")
            if scheme == "implicit-euler":
                lu = splu((eye - dt * op).tocsc())
                rhs = None
            elif scheme == "crank-nicolson":
                lu = splu((eye - 0.5 * dt * op).tocsc())
                rhs = (eye + 0.5 * dt * op).tocsr()
            else:
                raise SolverError(f"unknown scheme {scheme!r}")
            self._lu_cache[key] = (lu, rhs)
        return self._lu_cache[key]


def _face_arrays(grid, axis):
    """Flat indices (P, Q) of node pairs across interior faces along an axis,
    with the transverse trapezoid area of each face."""
    shape = grid.shape
    idx = np.arange(grid.num_nodes).reshape(shape)
    if grid.dim == 1:
        p = idx[:-1]
        q = idx[1:]
        area = np.ones(p.size)
        return p.ravel(), q.ravel(), area
    if axis == 0:
        p, q = idx[:-1, :], idx[1:, :]
        area = np.broadcast_to(grid.axis_trapezoid(1), p.shape)
    else:
        p, q = idx[:, :-1], idx[:, 1:]
        area = np.broadcast_to(grid.axis_trapezoid(0)[:, None], p.shape)
    return p.ravel(), q.ravel(), area.ravel()


def assemble(mf: ModelFields) -> Propagator:
    """Build the forward/backward pair from node-sampled model data.

    The two-point flux cannot express cross-diffusion, so D must be diagonal
    here (the stencil operators in :mod:`fplab.operators` take full D).
    """
    grid = mf.grid
    if grid.dim == 2:
        off = float(np.max(np.abs(mf.D[:, 0, 1])))
        if off > 1e-14 * max(1.0, float(np.max(np.abs(mf.D)))):
            raise SolverError(
                "off-diagonal diffusion entries are not supported by the "
                "two-point finite-volume fluxes"
            )
    vol = grid.vol

    rows = []
    cols = []
    vals = []
    gradient_mode = mf.V is not None
    for axis in range(grid.dim):
        p, q, area = _face_arrays(grid, axis)
        h = grid.spacings[axis]
        dface = 0.5 * (mf.D[p, axis, axis] + mf.D[q, axis, axis])
        if gradient_mode:
            s = mf.V[q] - mf.V[p]
            if mf.F is not None:
                s = s - h * 0.5 * (mf.F[p, axis] + mf.F[q, axis])
        else:
            s = h * 0.5 * (mf.a[p, axis] + mf.a[q, axis])
        c = dface * area / h
        alpha = c * bernoulli(s)      # weight of the donor node P
        beta = c * bernoulli(-s)      # weight of the receiver node Q
        rows.extend((p, p, q, q))
        cols.extend((p, q, p, q))
        vals.extend((-alpha, beta, alpha, -beta))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = grid.num_nodes
    flux_div = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    inv_vol = sp.diags(1.0 / vol)
    forward = (inv_vol @ flux_div).tocsr()
    backward = (inv_vol @ flux_div.T).tocsr()
    return Propagator(grid, vol, forward, backward)


@dataclass(frozen=True)
class Trajectory:
    """Snapshots of a forward solve with per-step conservation diagnostics."""

    times: np.ndarray
    snapshots: list
    mass_history: np.ndarray
    min_history: np.ndarray
    dt: float
    scheme: str

    def __post_init__(self):
        if (np.diff(self.times) <= 0).any():
            raise SolverError("snapshot times must be strictly increasing")


def _march(prop, which, u, n_steps, dt, scheme, record_at=None, positivity=False):
    """Run n_steps of the chosen scheme; optionally record at step indices."""
    lu, rhs = prop._stepper(which, dt, scheme)
    recorded = {}
    if record_at and 0 in record_at:
        recorded[0] = u.copy()
    mass_hist = np.empty(n_steps + 1)
    min_hist = np.empty(n_steps + 1)
    mass_hist[0] = prop.mass(u)
    min_hist[0] = float(u.min())
    for k in range(1, n_steps + 1):
        b = u if rhs is None else rhs @ u
        u = lu.solve(b)
        if positivity:
            umax = float(np.abs(u).max())
            umin = float(u.min())
            if scheme == "crank-nicolson" and umin < -1e-12 * max(1.0, umax):
                raise SolverError(
                    f"negative density {umin:.3e} at step {k} under "
                    "crank-nicolson; rerun with implicit-euler"
                )
            if umin < 0.0 and umin >= -1e-13 * max(1.0, umax):
                # round-off dust from the direct solve
                np.clip(u, 0.0, None, out=u)
        mass_hist[k] = prop.mass(u)
        min_hist[k] = float(u.min())
        if record_at and k in record_at:
            recorded[k] = u.copy()
    return u, recorded, mass_hist, min_hist


def _steps_for(t_end, dt):
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise SolverError(f"t_end={t_end} is not a multiple of dt={dt}")
    return n


def solve_fokker_planck(prop: Propagator, u0, t_end, dt,
                        scheme="implicit-euler", snapshot_times=None) -> Trajectory:
    """March the density forward, conserving mass and (with implicit Euler)
    positivity; snapshots at the requested times, which must be step
    multiples."""
    u = check_field(prop.grid, u0, "initial density").copy()
    if (u < 0.0).any():
        raise SolverError("initial density must be nonnegative")
    m = prop.mass(u)
    if m <= 0.0:
        raise SolverError("initial density must have positive mass")
    u /= m

    n_steps = _steps_for(t_end, dt)
    if snapshot_times is None:
        snapshot_times = [t_end]
    record_at = {}
    for t in snapshot_times:
        k = int(round(t / dt))
        if not 0 <= k <= n_steps or abs(k * dt - t) > 1e-9 * max(1.0, t_end):
            raise SolverError(f"snapshot time {t} is not a step multiple within the run")
        record_at[k] = t
    _, recorded, mass_hist, min_hist = _march(
        prop, "forward", u, n_steps, dt, scheme,
        record_at=set(record_at), positivity=True,
    )
    ks = sorted(record_at)
    return Trajectory(
        times=np.array([k * dt for k in ks]),
        snapshots=[recorded[k] for k in ks],
        mass_history=mass_hist,
        min_history=min_hist,
        dt=dt,
        scheme=scheme,
    )


def semigroup_apply(prop: Propagator, f, t, dt, scheme="implicit-euler"):
    """Evolve an observable with the backward operator for time t."""
    v = check_field(prop.grid, f).copy()
    if t == 0.0:
        return v
    n_steps = _steps_for(t, dt)
    v, _, _, _ = _march(prop, "backward", v, n_steps, dt, scheme)
    return v


def semigroup_collect(prop: Propagator, f, times, dt, scheme="implicit-euler"):
    """Evolve an observable once, returning {t: P_t f} for step-multiple times."""
    v = check_field(prop.grid, f).copy()
    record_at = {}
    for t in times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, max(times)):
            raise SolverError(f"time {t} is not a multiple of dt={dt}")
        record_at[k] = t
    n_steps = max(record_at)
    if n_steps == 0:
        return {record_at[0]: v}
    _, recorded, _, _ = _march(prop, "backward", v, n_steps, dt, scheme,
                               record_at=set(record_at))
    return {record_at[k]: recorded[k] for k in sorted(record_at)}


def steady_state(prop: Propagator, tol=1e-13, max_iter=50):
    """Normalized nonnegative kernel density of the forward operator.

    Inverse power iteration around zero (with a tiny positive shift so the
    factorization is nonsingular).  Runs from two different starting vectors
    and reports a non-ergodic discretization if they disagree.
    """
    n = prop.grid.num_nodes
    scale = float(np.abs(prop.forward.diagonal()).max())
    shift = 1e-8 * max(scale, 1.0)
    lu = splu((prop.forward - shift * sp.identity(n, format="csr")).tocsc())

    def run(start):
        u = start / prop.mass(start)
        for _ in range(max_iter):
            u = lu.solve(u)
            u /= prop.mass(u)
            resid = float(np.abs(prop.forward @ u).max())
            if resid <= tol * scale * max(1.0, float(np.abs(u).max())):
                break
        return u

    ones = np.ones(n)
    rng = np.random.default_rng(0)
    bump = 1.0 + 0.5 * rng.random(n)
    u1 = run(ones)
    u2 = run(bump)
    umax = float(np.abs(u1).max())
    if float(np.abs(u1 - u2).max()) > 1e-8 * umax:
        raise NonErgodicError(
            "inverse iteration from independent starts disagrees; "
            "kernel dimension is not 1"
        )
    if float(u1.min()) < -1e-10 * umax:
        raise NonErgodicError("kernel vector is not signed; discretization is not ergodic")
    np.clip(u1, 0.0, None, out=u1)
    return u1 / prop.mass(u1)


def steady_measure(prop: Propagator) -> Measure:
    """Probability weights of the discrete invariant measure."""
    u = steady_state(prop)
    return measure_from_weights(prop.grid, u * prop.vol)
