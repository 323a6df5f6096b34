"""Diffusion models on uniform tensor grids, with measures and quadrature.

A field is a plain 1d numpy array with one value per grid node.  Nodes are
ordered row-major (C order): in 2d the flat index of node (i, j) is
``i * (cells2 + 1) + j`` and its coordinates are ``(lo1 + i*h1, lo2 + j*h2)``.
Node coordinates are always reproduced from this index arithmetic.

Quadrature is trapezoidal and tied to the dual cells of the finite-volume
solver: boundary nodes carry half cells, corners quarter cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr


class GridError(ValueError):
    pass


class ModelError(ValueError):
    pass


class NonPsdError(ModelError):
    """Diffusion matrix not positive definite at some node."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box, dim 1 or 2."""

    bounds: tuple
    cells: tuple

    def __post_init__(self):
        if len(self.bounds) != len(self.cells):
            raise GridError("bounds and cells must have one entry per axis")
        if len(self.bounds) not in (1, 2):
            raise GridError("only dimensions 1 and 2 are supported")
        for (lo, hi), n in zip(self.bounds, self.cells):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise GridError(f"degenerate bounds [{lo}, {hi}]")
            if int(n) != n or n < 8:
                raise GridError(f"cell count must be an integer >= 8, got {n}")

    @property
    def dim(self):
        return len(self.bounds)

    @property
    def shape(self):
        return tuple(int(n) + 1 for n in self.cells)

    @property
    def num_nodes(self):
        out = 1
        for n in self.shape:
            out *= n
        return out

    @property
    def spacings(self):
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.bounds, self.cells))

    def axis_nodes(self, k):
        (lo, _), h = self.bounds[k], self.spacings[k]
        return lo + np.arange(self.shape[k]) * h

    def node_coords(self):
        """(num_nodes, dim) array of node coordinates, row-major."""
        axes = [self.axis_nodes(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def axis_trapezoid(self, k):
        w = np.full(self.shape[k], self.spacings[k])
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    @property
    def vol(self):
        """Trapezoidal dual-cell volumes, flattened row-major."""
        w = self.axis_trapezoid(0)
        for k in range(1, self.dim):
            w = np.outer(w, self.axis_trapezoid(k))
        return w.ravel()

    def interior_mask(self, depth=1):
        """Nodes at least ``depth`` layers away from every boundary."""
        masks = []
        for n in self.shape:
            m = np.zeros(n, dtype=bool)
            m[depth : n - depth] = True
            masks.append(m)
        out = masks[0]
        for m in masks[1:]:
            out = np.outer(out, m)
        return out.ravel()

    def core_mask(self, fraction=0.5):
        """Central sub-box covering ``fraction`` of each axis."""
        masks = []
        for k in range(self.dim):
            lo, hi = self.bounds[k]
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * fraction
            x = self.axis_nodes(k)
            masks.append((x >= mid - half) & (x <= mid + half))
        out = masks[0]
        for m in masks[1:]:
            out = np.outer(out, m)
        return out.ravel()


def build_grid(bounds, cells) -> Grid:
    """Validate and build a grid; bounds is ((lo, hi), ...), cells (n, ...)."""
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    cells = tuple(int(n) for n in cells)
    return Grid(bounds, cells)


def check_field(grid, f, name="field"):
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.num_nodes,):
        raise ModelError(
            f"grid mismatch: {name} has shape {f.shape}, expected ({grid.num_nodes},)"
        )
    if not np.isfinite(f).all():
        raise ModelError(f"{name} contains non-finite entries")
    return f


def box_quadrature(grid, f) -> float:
    """Trapezoidal approximation of the box integral of a node field."""
    f = check_field(grid, f)
    return float(grid.vol @ f)


@dataclass(frozen=True)
class Model:
    """Diffusion matrix, drift and domain box, all as expressions.

    The drift is either explicit (``a_exprs``) or in gradient form with
    potential ``v_expr`` and optional divergence-free part ``f_exprs``,
    in which case the drift vector is assembled pointwise as grad(V) - F.
    Only the upper triangle of D is stored; D is symmetric by construction.
    """

    dim: int
    d_exprs: tuple  # dim 1: (d11,); dim 2: (d11, d12, d22)
    bounds: tuple
    a_exprs: tuple | None = None
    v_expr: object | None = None
    f_exprs: tuple | None = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ModelError("dim must be 1 or 2")
        want = 1 if self.dim == 1 else 3
        if len(self.d_exprs) != want:
            raise ModelError(f"expected {want} diffusion entries, got {len(self.d_exprs)}")
        has_a = self.a_exprs is not None
        has_v = self.v_expr is not None
        if has_a == has_v:
            raise ModelError("provide either an explicit drift or a potential, not both")
        if has_a and len(self.a_exprs) != self.dim:
            raise ModelError("drift needs one component per axis")
        if self.f_exprs is not None:
            if not has_v:
                raise ModelError("a divergence-free part requires a potential")
            if len(self.f_exprs) != self.dim:
                raise ModelError("divergence-free part needs one component per axis")

    @property
    def gradient_mode(self):
        return self.v_expr is not None


def model_from_strings(dim, d, bounds, a=None, v=None, f=None) -> Model:
    """Parse expression strings into a Model."""
    d_exprs = tuple(expr.parse(s, dim) for s in d)
    a_exprs = tuple(expr.parse(s, dim) for s in a) if a is not None else None
    v_expr = expr.parse(v, dim) if v is not None else None
    f_exprs = tuple(expr.parse(s, dim) for s in f) if f is not None else None
    return Model(dim, d_exprs, tuple(tuple(map(float, b)) for b in bounds),
                 a_exprs, v_expr, f_exprs)


@dataclass(frozen=True)
class ModelFields:
    """Node-sampled model data: D, drift, its Jacobian, optional V and F."""

    grid: Grid
    model: Model
    D: np.ndarray          # (nn, dim, dim), symmetric, PD at every node
    a: np.ndarray          # (nn, dim)
    Ja: np.ndarray         # (nn, dim, dim), rows = gradients of a_i
    V: np.ndarray | None   # (nn,)
    F: np.ndarray | None   # (nn, dim)

    @property
    def constant_diffusion(self):
        spread = np.max(np.abs(self.D - self.D[0]), initial=0.0)
        return spread <= 1e-12 * max(1.0, float(np.max(np.abs(self.D[0]))))


def _smallest_eig_sym(mats):
    """Smallest eigenvalue per (n, d, d) symmetric matrix, d in {1, 2}."""
    d = mats.shape[1]
    if d == 1:
        return mats[:, 0, 0]
    tr = mats[:, 0, 0] + mats[:, 1, 1]
    det = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    return 0.5 * (tr - disc)


def discretize_model(model: Model, grid: Grid) -> ModelFields:
    """Sample D, a (and V, F, Ja) at all grid nodes; check D is PD."""
    if grid.dim != model.dim:
        raise ModelError("grid and model dimension differ")
    pts = grid.node_coords()
    nn, dim = pts.shape

    D = np.zeros((nn, dim, dim))
    if dim == 1:
        D[:, 0, 0] = expr.eval_values(model.d_exprs[0], pts)
    else:
        D[:, 0, 0] = expr.eval_values(model.d_exprs[0], pts)
        D[:, 0, 1] = D[:, 1, 0] = expr.eval_values(model.d_exprs[1], pts)
        D[:, 1, 1] = expr.eval_values(model.d_exprs[2], pts)

    eigmin = _smallest_eig_sym(D)
    if not (eigmin > 0.0).all():
        bad = int(np.argmin(eigmin))
        raise NonPsdError(
            f"diffusion matrix not positive definite at node {tuple(pts[bad])} "
            f"(smallest eigenvalue {eigmin[bad]:.3e})"
        )

    V = None
    F = None
    if model.gradient_mode:
        vv, vg, vh = expr.eval_jets(model.v_expr, pts)
        V = vv
        a = vg.copy()
        Ja = vh.copy()
        if model.f_exprs is not None:
            F = np.zeros((nn, dim))
            for i, fe in enumerate(model.f_exprs):
                fv, fg, _ = expr.eval_jets(fe, pts)
                F[:, i] = fv
                a[:, i] -= fv
                Ja[:, i, :] -= fg
    else:
        a = np.zeros((nn, dim))
        Ja = np.zeros((nn, dim, dim))
        for i, ae in enumerate(model.a_exprs):
            av, ag, _ = expr.eval_jets(ae, pts)
            a[:, i] = av
            Ja[:, i, :] = ag

    return ModelFields(grid, model, D, a, Ja, V, F)


@dataclass(frozen=True)
class Measure:
    """Discrete probability measure: nonnegative node weights summing to 1."""

    grid: Grid
    weights: np.ndarray
    z: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.num_nodes,):
            raise ModelError("grid mismatch: weight vector has wrong length")
        if (w < 0.0).any():
            raise ModelError("measure weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-14 * max(1.0, abs(w.sum())):
            raise ModelError(f"measure weights sum to {w.sum()!r}, not 1")


def measure_from_weights(grid, w) -> Measure:
    w = np.asarray(w, dtype=float)
    s = w.sum()
    if s <= 0:
        raise ModelError("weights must have positive total mass")
    return Measure(grid, w / s, z=float(s))


def gibbs_measure(V, grid) -> Measure:
    """Measure with weights proportional to exp(-V) times cell volume.

    V is shifted by its minimum before exponentiating, so only differences
    of V matter; the normalization Z refers to the unshifted potential.
    """
    V = check_field(grid, V, "potential")
    vmin = float(V.min())
    w = grid.vol * np.exp(-(V - vmin))
    s = float(w.sum())
    with np.errstate(over="ignore", under="ignore"):
        z = s * np.exp(-vmin)
    return Measure(grid, w / s, z=float(z))


def integrate(mu: Measure, f) -> float:
    """mu(f) = sum of weights times node values."""
    f = check_field(mu.grid, f)
    return float(mu.weights @ f)


def check_divergence_free(model: Model, grid: Grid) -> np.ndarray:
    """Node-wise residual of div(exp(-V) D F) computed from exact jets.

    Returns exp(-V) * (div(DF) - <DF, grad V>) per node; zero residual means
    the perturbation F leaves the Gibbs measure invariant.
    """
    if not model.gradient_mode or model.f_exprs is None:
        raise ModelError("divergence-free check needs gradient mode with F")
    pts = grid.node_coords()
    nn, dim = pts.shape

    # D entries with gradients
    idx = {(0, 0): 0} if dim == 1 else {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2}
    dvals = []
    dgrads = []
    for e in model.d_exprs:
        v, g, _ = expr.eval_jets(e, pts)
        dvals.append(v)
        dgrads.append(g)

    fvals = np.zeros((nn, dim))
    fgrads = np.zeros((nn, dim, dim))
    for i, fe in enumerate(model.f_exprs):
        v, g, _ = expr.eval_jets(fe, pts)
        fvals[:, i] = v
        fgrads[:, i, :] = g

    _, vgrad, _ = expr.eval_jets(model.v_expr, pts)
    vvals = expr.eval_values(model.v_expr, pts)

    # (DF)_j = sum_k D_jk F_k ; div(DF) = sum_j d_j (DF)_j
    div_df = np.zeros(nn)
    df = np.zeros((nn, dim))
    for j in range(dim):
        for k in range(dim):
            e = idx[(j, k)]
            df[:, j] += dvals[e] * fvals[:, k]
            div_df += dgrads[e][:, j] * fvals[:, k] + dvals[e] * fgrads[:, k, j]
    advect = np.einsum("ni,ni->n", df, vgrad)
    return np.exp(-vvals) * (div_df - advect)
