"""Inequality and decay checks for a discretized diffusion model.

Every check evaluates both sides of one named functional inequality (or
identity) on concrete data and reports a signed margin; ``margin >= -tol``
means the statement holds at the working tolerance.  Pointwise-in-space
("local") checks are restricted to the central half of the box, where the
truncation of the unbounded domain is invisible at the working tolerances.

Checks are independent jobs over a shared immutable Propagator, so they may
run concurrently; each solve owns its own workspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import operators, pde, phi as phimod
from .model import (
    Grid, Measure, ModelFields, box_quadrature, check_field, gibbs_measure,
    integrate,
)


class CheckError(ValueError):
    pass


class ContextError(CheckError):
    """The check context is missing a required ingredient."""


CHECK_IDS = (
    "GLOBAL_PHI",
    "BECKNER",
    "ENTROPY_PRODUCTION",
    "EXP_DECAY",
    "REFINED_LOCAL",
    "REFINED_REVERSE",
    "REFINED_GLOBAL",
    "BECKNER_VS_REFINED",
    "INTEGRAL_CRITERION",
    "ISO_LOCAL",
    "ISO_REVERSE",
    "ISO_GLOBAL",
    "ISO_SHARPER",
    "RHO_ZERO_RATE",
    "FP_DECAY",
    "FP_DISSIPATION",
    "DUALITY",
)

# self-contained statement of what each check verifies (recorded in reports)
STATEMENTS = {
    "GLOBAL_PHI": "Ent[f] <= (1/(2 rho)) mu(phi''(f) Gamma(f))",
    "BECKNER": "(mu(g^2) - mu(g^(2/p))^p)/(p-1) <= (2/(p rho)) mu(Gamma(g))",
    "ENTROPY_PRODUCTION": "d/dt Ent[P_t f] = -mu(phi''(P_t f) Gamma(P_t f))",
    "EXP_DECAY": "Ent[P_t f] <= exp(-t/C) Ent[f]",
    "REFINED_LOCAL": (
        "(1/(p-1)^2) [P_t(f^p) - (P_t f)^p R^(2/p-1)] <= "
        "tau(t) P_t(f^(p-2) Gamma(f)),  R = P_t(f^p)/(P_t f)^p, "
        "tau = (1-exp(-2 rho t))/rho, or 2t when rho = 0"
    ),
    "REFINED_REVERSE": (
        "(1/(p-1)^2) [P_t(f^p) - (P_t f)^p R^(2/p-1)] >= "
        "kappa(t) R^(1-2/p) (P_t f)^(p-2) Gamma(P_t f), "
        "kappa = (exp(2 rho t)-1)/rho, or 2t when rho = 0"
    ),
    "REFINED_GLOBAL": (
        "(p^2/(p-1)^2) [mu(g^2) - mu(g^(2/p))^p (mu(g^2)/mu(g^(2/p))^p)^(2/p-1)]"
        " <= (4/rho) mu(Gamma(g))"
    ),
    "BECKNER_VS_REFINED": "plain interpolation functional <= refined functional",
    "INTEGRAL_CRITERION": (
        "mu(g^((2-p)/(p-1)) Gamma2(g)) >= rho mu(g^((2-p)/(p-1)) Gamma(g))"
    ),
    "ISO_LOCAL": (
        "Ent_{P_t}[f] <= (1/phi''(P_t f)) "
        "log(1 + tau(t)/2 phi''(P_t f) P_t(phi''(f) Gamma(f))), phi = -U"
    ),
    "ISO_REVERSE": (
        "Ent_{P_t}[f] >= (1/phi''(P_t f)) "
        "log(1 + kappa(t)/2 phi''(P_t f)^2 Gamma(P_t f)), phi = -U"
    ),
    "ISO_GLOBAL": (
        "Ent[f] <= (1/phi''(mu(f))) "
        "log(1 + phi''(mu(f))/(2 rho) mu(phi''(f) Gamma(f))), phi = -U"
    ),
    "ISO_SHARPER": "log-form bound <= linear bound (log(1+x) <= x), phi = -U",
    "RHO_ZERO_RATE": (
        "|H'(t)| <= |H'(0)|/(1 + alpha t), alpha = ((2-p)/p) |H'(0)|/H(0), "
        "H(t) = Ent[P_t f]"
    ),
    "FP_DECAY": "Ent[u_t/u_inf] <= exp(-t/C) Ent[u_0/u_inf]",
    "FP_DISSIPATION": (
        "d/dt Ent[u_t/u_inf] = -mu(phi''(u_t/u_inf) Gamma(u_t/u_inf))"
    ),
    "DUALITY": "u_t = exp(-V) P_t(exp(V) u_0)",
}


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    statement: str
    lhs: float
    rhs: float
    margin: float
    tolerance: float
    passed: bool
    context: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "id": self.check_id,
            "statement": self.statement,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "context": self.context,
        }


@dataclass
class DecayReport:
    """Entropy along a flow against its exponential (or no) bound."""

    times: np.ndarray
    entropy: np.ndarray
    bound: np.ndarray
    dissipation: np.ndarray
    fitted_rate: float | None
    theoretical_rate: float | None
    c_constant: float | None
    violation: bool
    degenerate: bool
    label: str = ""

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,entropy,bound,dissipation\n")
            for t, h, b, d in zip(self.times, self.entropy, self.bound,
                                  self.dissipation):
                fh.write(f"{t!r},{h!r},{b!r},{d!r}\n")


def make_battery(grid: Grid, seed: int, count: int, lo: float, hi: float):
    """Seeded family of test fields scaled affinely into [lo, hi].

    Cycles through affine ramps, quadratics, smoothed steps and shifted
    bumps; deterministic for a fixed (grid, seed, count, range).
    """
    rng = np.random.default_rng(seed)
    pts = grid.node_coords()
    dim = grid.dim
    widths = np.array([b[1] - b[0] for b in grid.bounds])
    mids = np.array([0.5 * (b[0] + b[1]) for b in grid.bounds])
    fields = []
    for i in range(count):
        kind = ("affine", "quadratic", "step", "bump")[i % 4]
        direction = rng.normal(size=dim)
        direction /= max(np.linalg.norm(direction), 1e-12)
        center = mids + (rng.random(dim) - 0.5) * 0.5 * widths
        xi = (pts - center) @ direction
        if kind == "affine":
            raw = xi
        elif kind == "quadratic":
            raw = xi**2 + rng.uniform(-0.5, 0.5) * xi
        elif kind == "step":
            sharp = rng.uniform(2.0, 6.0) / float(widths.max())
            raw = np.tanh(sharp * xi)
        else:
            w = rng.uniform(0.08, 0.25) * float(widths.max())
            r2 = np.sum((pts - center) ** 2, axis=1)
            raw = np.exp(-r2 / (2.0 * w * w))
        span = raw.max() - raw.min()
        if span < 1e-12:
            f = np.full(grid.num_nodes, 0.5 * (lo + hi))
        else:
            f = lo + (hi - lo) * (raw - raw.min()) / span
        fields.append((f"{kind}-{i}", f))
    return fields


def tau_factor(rho, t):
    """(1 - exp(-2 rho t))/rho, continued by 2t at rho = 0."""
    if rho == 0.0:
        return 2.0 * t
    return -math.expm1(-2.0 * rho * t) / rho


def kappa_factor(rho, t):
    """(exp(2 rho t) - 1)/rho, continued by 2t at rho = 0."""
    if rho == 0.0:
        return 2.0 * t
    return math.expm1(2.0 * rho * t) / rho


@dataclass
class CheckContext:
    """Everything a check may need; optional pieces may stay None."""

    grid: Grid
    fields: ModelFields
    prop: pde.Propagator
    mu: Measure
    rho: float
    u_inf: np.ndarray | None = None
    phi: phimod.PhiFunction | None = None
    p_values: tuple = (1.1, 1.3, 1.5, 1.7, 1.9)
    p_local: float = 1.5
    battery: list = field(default_factory=list)        # positive fields
    battery_unit: list = field(default_factory=list)   # fields in [0.05, 0.95]
    f: np.ndarray | None = None      # overrides the battery where sensible
    u0: np.ndarray | None = None     # initial density for forward checks
    t: float = 0.5
    t_end: float = 2.0
    t_list: tuple = (0.05, 0.1, 0.2)
    t_samples: np.ndarray | None = None
    dt: float = 1e-3
    dt_local: float = 2.5e-4
    sample_dt: float = 0.05
    c_constant: float | None = None
    tol_inequality: float = 1e-6
    tol_identity: float = 1e-3
    tol_duality: float = 1e-10
    core_fraction: float = 0.5

    def entropy_constant(self):
        if self.c_constant is not None:
            return self.c_constant
        if self.rho <= 0.0:
            raise ContextError("no entropy constant: rho <= 0 and none supplied")
        return 1.0 / (2.0 * self.rho)


def make_context(model, grid, *, seed=1234, battery_size=20, phi_kind="boltzmann",
                 rho_override=None, u0=None, f=None, c_constant=None,
                 **overrides) -> CheckContext:
    """Assemble model fields, propagator, measure, curvature and batteries."""
    mf = discretize_model(model, grid)
    prop = pde.assemble(mf)
    if rho_override is not None:
        rho = float(rho_override)
    else:
        try:
            rho = operators.cd_rho_constant_d(mf).rho
        except operators.NonConstantDiffusionError:
            rho = operators.cd_rho_sampled(mf, operators.default_test_fields(grid)).rho
    if mf.V is not None:
        shifted = mf.V - mf.V.min()
        u_inf = np.exp(-shifted)
        u_inf /= box_quadrature(grid, u_inf)
        mu = gibbs_measure(mf.V, grid)
    else:
        u_inf = pde.steady_state(prop)
        mu = pde.steady_measure(prop)
    ctx = CheckContext(
        grid=grid,
        fields=mf,
        prop=prop,
        mu=mu,
        rho=rho,
        u_inf=u_inf,
        phi=phimod.make_phi(phi_kind) if phi_kind != "power"
        else phimod.make_phi("power", overrides.get("p_local", 1.5)),
        battery=make_battery(grid, seed, battery_size, 0.5, 1.5),
        battery_unit=make_battery(grid, seed, battery_size, 0.05, 0.95),
        u0=u0,
        f=f,
        c_constant=c_constant,
    )
    for key, value in overrides.items():
        if not hasattr(ctx, key):
            raise ContextError(f"unknown context override {key!r}")
        setattr(ctx, key, value)
    return ctx


def operators_discretize(model, grid):
    from .model import discretize_model

    return discretize_model(model, grid)


def _battery_for(ctx, phi):
    if phi is not None and phi.interval == (0.0, 1.0):
        return ctx.battery_unit
    return ctx.battery


def _single_or_battery(ctx, phi=None):
    if ctx.f is not None:
        return [("supplied", check_field(ctx.grid, ctx.f))]
    battery = _battery_for(ctx, phi)
    if not battery:
        raise ContextError("no test field supplied and the battery is empty")
    return battery


def _worst(results):
    """Pick the (margin, lhs, rhs, note) tuple with the smallest margin."""
    return min(results, key=lambda r: r[0])


def _result(ctx, check_id, lhs, rhs, margin, tol, note):
    return CheckResult(
        check_id=check_id,
        statement=STATEMENTS[check_id],
        lhs=float(lhs),
        rhs=float(rhs),
        margin=float(margin),
        tolerance=float(tol),
        passed=bool(margin >= -tol),
        context=note,
    )


# ---------------------------------------------------------------------------
# global (integrated) inequalities
# ---------------------------------------------------------------------------

def _chk_global_phi(ctx):
    phi = ctx.phi or phimod.make_phi("boltzmann")
    results = []
    for name, f in _single_or_battery(ctx, phi):
        lhs = phimod.phi_entropy(ctx.mu, phi, f)
        energy = integrate(ctx.mu, np.asarray(phi.d2phi(f)) * operators.gamma(ctx.fields, f))
        rhs = energy / (2.0 * ctx.rho)
        results.append((rhs - lhs, lhs, rhs, {"field": name, "phi": phi.label}))
    margin, lhs, rhs, note = _worst(results)
    note["rho"] = ctx.rho
    return _result(ctx, "GLOBAL_PHI", lhs, rhs, margin, ctx.tol_inequality, note)


def _chk_beckner(ctx):
    results = []
    for name, g in _single_or_battery(ctx):
        energy = integrate(ctx.mu, operators.gamma(ctx.fields, g))
        for p in ctx.p_values:
            lhs = phimod.beckner_functional(ctx.mu, g, p)
            rhs = 2.0 * energy / (p * ctx.rho)
            results.append((rhs - lhs, lhs, rhs, {"field": name, "p": p}))
    margin, lhs, rhs, note = _worst(results)
    note["rho"] = ctx.rho
    return _result(ctx, "BECKNER", lhs, rhs, margin, ctx.tol_inequality, note)


def _chk_refined_global(ctx):
    results = []
    for name, g in _single_or_battery(ctx):
        energy = integrate(ctx.mu, operators.gamma(ctx.fields, g))
        for p in ctx.p_values:
            if not 1.0 < p <= 2.0:
                continue
            lhs = 2.0 * p * phimod.refined_functional(ctx.mu, g, p)
            rhs = 4.0 * energy / ctx.rho
            results.append((rhs - lhs, lhs, rhs, {"field": name, "p": p}))
    if not results:
        raise ContextError("no p value inside (1, 2]")
    margin, lhs, rhs, note = _worst(results)
    note["rho"] = ctx.rho
    return _result(ctx, "REFINED_GLOBAL", lhs, rhs, margin, ctx.tol_inequality, note)


def _chk_beckner_vs_refined(ctx):
    results = []
    for name, g in _single_or_battery(ctx):
        for p in ctx.p_values:
            if not 1.0 < p <= 2.0:
                continue
            lhs = phimod.beckner_functional(ctx.mu, g, p)
            rhs = phimod.refined_functional(ctx.mu, g, p)
            note = {"field": name, "p": p}
            if p == 2.0:
                note["note"] = "p = 2 lies outside the stated range (1, 2)"
            results.append((rhs - lhs, lhs, rhs, note))
    margin, lhs, rhs, note = _worst(results)
    return _result(ctx, "BECKNER_VS_REFINED", lhs, rhs, margin, ctx.tol_inequality, note)


def _chk_integral_criterion(ctx):
    results = []
    for name, g in _single_or_battery(ctx):
        for p in ctx.p_values:
            if not 1.0 < p < 2.0:
                continue
            e = (2.0 - p) / (p - 1.0)
            weight = g**e
            lhs = integrate(ctx.mu, weight * operators.gamma2(ctx.fields, g))
            rhs = ctx.rho * integrate(ctx.mu, weight * operators.gamma(ctx.fields, g))
            results.append((lhs - rhs, lhs, rhs, {"field": name, "p": p}))
    if not results:
        raise ContextError("no p value inside (1, 2)")
    margin, lhs, rhs, note = _worst(results)
    note["rho"] = ctx.rho
    return _result(ctx, "INTEGRAL_CRITERION", lhs, rhs, margin, ctx.tol_inequality, note)


# ---------------------------------------------------------------------------
# semigroup identities and decay
# ---------------------------------------------------------------------------

def _default_smooth_field(ctx):
    for name, f in ctx.battery:
        if name.startswith("bump"):
            return name, f
    return ctx.battery[0]


def _chk_entropy_production(ctx):
    phi = ctx.phi or phimod.make_phi("boltzmann")
    if ctx.f is not None:
        name, f = "supplied", check_field(ctx.grid, ctx.f)
    else:
        name, f = _default_smooth_field(ctx)
    t, dt = ctx.t, ctx.dt
    snaps = pde.semigroup_collect(ctx.prop, f, [t - dt, t, t + dt], dt,
                                  scheme="crank-nicolson")
    h_minus = phimod.phi_entropy(ctx.mu, phi, snaps[t - dt])
    h_plus = phimod.phi_entropy(ctx.mu, phi, snaps[t + dt])
    v = snaps[t]
    deriv = (h_plus - h_minus) / (2.0 * dt)
    diss = integrate(ctx.mu, np.asarray(phi.d2phi(v)) * operators.gamma(ctx.fields, v))
    relerr = abs(deriv + diss) / max(abs(diss), 1e-300)
    margin = ctx.tol_identity - relerr
    return _result(ctx, "ENTROPY_PRODUCTION", deriv, -diss, margin, 0.0,
                   {"field": name, "t": t, "relative_error": relerr})


def decay_report(ctx, *, mode, f=None, u0=None, t_end=None, phi=None,
                 scheme=None, label="") -> DecayReport:
    """Entropy decay along the semigroup (mode="semigroup") or the forward
    flow (mode="fp"), with the exponential bound when a constant is known."""
    phi = phi or ctx.phi or phimod.make_phi("boltzmann")
    t_end = ctx.t_end if t_end is None else t_end
    dt = ctx.dt
    sample_every = max(1, int(round(ctx.sample_dt / dt)))
    n_steps = pde._steps_for(t_end, dt)
    sample_ks = list(range(0, n_steps + 1, sample_every))
    times = np.array([k * dt for k in sample_ks])

    entropies = []
    dissipations = []
    if mode == "semigroup":
        scheme = scheme or "crank-nicolson"
        snaps = pde.semigroup_collect(ctx.prop, f, [k * dt for k in sample_ks],
                                      dt, scheme=scheme)
        for k in sample_ks:
            v = snaps[k * dt]
            entropies.append(phimod.phi_entropy(ctx.mu, phi, v))
            dissipations.append(
                -integrate(ctx.mu, np.asarray(phi.d2phi(v)) * operators.gamma(ctx.fields, v))
            )
    elif mode == "fp":
        scheme = scheme or "crank-nicolson"
        if ctx.u_inf is None:
            raise ContextError("forward decay needs the stationary density")
        traj = pde.solve_fokker_planck(ctx.prop, u0, t_end, dt, scheme=scheme,
                                       snapshot_times=[k * dt for k in sample_ks])
        for u in traj.snapshots:
            w = u / ctx.u_inf
            entropies.append(phimod.phi_entropy(ctx.mu, phi, w))
            dissipations.append(
                -integrate(ctx.mu, np.asarray(phi.d2phi(w)) * operators.gamma(ctx.fields, w))
            )
    else:
        raise CheckError(f"unknown decay mode {mode!r}")

    entropy = np.array(entropies)
    dissipation = np.array(dissipations)
    h0 = entropy[0]
    degenerate = h0 < 1e-13

    c = None
    theoretical = None
    try:
        c = ctx.entropy_constant()
        theoretical = 1.0 / c
    except ContextError:
        pass
    if c is not None and not degenerate:
        bound = h0 * np.exp(-times / c)
        violation = bool((entropy > bound * (1.0 + 1e-9)).any())
    else:
        bound = np.full_like(times, np.nan)
        violation = False

    fitted = None
    if not degenerate and (c is not None or ctx.rho > 0.0):
        mask = entropy > 1e-13
        if mask.sum() >= 2:
            slope = np.polyfit(times[mask], np.log(entropy[mask]), 1)[0]
            fitted = -float(slope)

    return DecayReport(
        times=times,
        entropy=entropy,
        bound=bound,
        dissipation=dissipation,
        fitted_rate=fitted,
        theoretical_rate=theoretical,
        c_constant=c,
        violation=violation,
        degenerate=degenerate,
        label=label,
    )


def _chk_exp_decay(ctx):
    phi = ctx.phi or phimod.make_phi("boltzmann")
    if ctx.f is not None:
        name, f = "supplied", check_field(ctx.grid, ctx.f)
    else:
        name, f = _default_smooth_field(ctx)
    rep = decay_report(ctx, mode="semigroup", f=f, phi=phi, label="EXP_DECAY")
    if rep.degenerate:
        raise ContextError("initial entropy vanishes; decay check is degenerate")
    slack = rep.bound * (1.0 + 1e-9) - rep.entropy
    i = int(np.argmin(slack))
    return _result(ctx, "EXP_DECAY", rep.entropy[i], rep.bound[i],
                   float(slack[i]), 0.0,
                   {"field": name, "phi": phi.label, "C": rep.c_constant,
                    "worst_t": float(rep.times[i]),
                    "fitted_rate": rep.fitted_rate}), rep


def _chk_fp_decay(ctx):
    phi = ctx.phi or phimod.make_phi("boltzmann")
    if ctx.u0 is None:
        raise ContextError("FP decay needs an initial density u0")
    rep = decay_report(ctx, mode="fp", u0=ctx.u0, phi=phi, label="FP_DECAY")
    if rep.degenerate:
        raise ContextError("initial entropy vanishes; decay check is degenerate")
    slack = rep.bound * (1.0 + 1e-9) - rep.entropy
    i = int(np.argmin(slack))
    return _result(ctx, "FP_DECAY", rep.entropy[i], rep.bound[i],
                   float(slack[i]), 0.0,
                   {"phi": phi.label, "C": rep.c_constant,
                    "worst_t": float(rep.times[i]),
                    "fitted_rate": rep.fitted_rate}), rep


def _chk_fp_dissipation(ctx):
    phi = ctx.phi or phimod.make_phi("boltzmann")
    if ctx.u0 is None:
        raise ContextError("FP dissipation needs an initial density u0")
    if ctx.u_inf is None:
        raise ContextError("FP dissipation needs the stationary density")
    t, dt = ctx.t, ctx.dt
    traj = pde.solve_fokker_planck(ctx.prop, ctx.u0, t + dt, dt,
                                   scheme="crank-nicolson",
                                   snapshot_times=[t - dt, t, t + dt])
    ws = [u / ctx.u_inf for u in traj.snapshots]
    h_minus = phimod.phi_entropy(ctx.mu, phi, ws[0])
    h_plus = phimod.phi_entropy(ctx.mu, phi, ws[2])
    w = ws[1]
    deriv = (h_plus - h_minus) / (2.0 * dt)
    diss = integrate(ctx.mu, np.asarray(phi.d2phi(w)) * operators.gamma(ctx.fields, w))
    relerr = abs(deriv + diss) / max(abs(diss), 1e-300)
    margin = ctx.tol_identity - relerr
    return _result(ctx, "FP_DISSIPATION", deriv, -diss, margin, 0.0,
                   {"phi": phi.label, "t": t, "relative_error": relerr})


def _chk_duality(ctx):
    mf = ctx.fields
    if mf.V is None or mf.F is not None:
        raise ContextError("duality needs gradient mode without a divergence-free part")
    if ctx.u0 is None:
        raise ContextError("duality needs an initial density u0")
    t, dt = ctx.t, ctx.dt
    u0 = check_field(ctx.grid, ctx.u0) / box_quadrature(ctx.grid, ctx.u0)
    traj = pde.solve_fokker_planck(ctx.prop, u0, t, dt, snapshot_times=[t])
    u_t = traj.snapshots[-1]
    vshift = mf.V - mf.V.min()  # e^{-V} is defined up to scale; keep it tame
    v = semigroup_conjugate = pde.semigroup_apply(ctx.prop, np.exp(vshift) * u0, t, dt)
    recon = np.exp(-vshift) * semigroup_conjugate
    core = ctx.grid.core_mask(ctx.core_fraction)
    scale = float(np.abs(u_t[core]).max())
    resid = float(np.abs((u_t - recon)[core]).max()) / scale
    margin = ctx.tol_duality - resid
    return _result(ctx, "DUALITY", resid, ctx.tol_duality, margin, 0.0,
                   {"t": t, "relative_residual": resid})


def _chk_rho_zero_rate(ctx):
    p = ctx.p_local
    phi = phimod.make_phi("power", p)
    if ctx.t_samples is None:
        times = np.round(np.arange(0.0, 1.0 + 1e-12, 1e-2), 12)
    else:
        times = np.asarray(ctx.t_samples, dtype=float)
    results = []
    fields_iter = (
        [("supplied", check_field(ctx.grid, ctx.f))] if ctx.f is not None
        else ctx.battery
    )
    for name, f in fields_iter:
        snaps = pde.semigroup_collect(ctx.prop, f, list(times), ctx.dt,
                                      scheme="crank-nicolson")
        h0 = phimod.phi_entropy(ctx.mu, phi, f)
        if h0 < 1e-13:
            continue
        d0 = None
        for t in times:
            v = snaps[t]
            diss = integrate(ctx.mu,
                             np.asarray(phi.d2phi(v)) * operators.gamma(ctx.fields, v))
            if d0 is None:
                d0 = diss
                alpha = ((2.0 - p) / p) * d0 / h0
            bound = d0 / (1.0 + alpha * t)
            results.append((bound - diss, diss, bound, {"field": name, "t": float(t)}))
    if not results:
        raise ContextError("all test fields have vanishing entropy")
    margin, lhs, rhs, note = _worst(results)
    note["p"] = p
    return _result(ctx, "RHO_ZERO_RATE", lhs, rhs, margin, ctx.tol_inequality, note)


# ---------------------------------------------------------------------------
# local (pointwise) inequalities
# ---------------------------------------------------------------------------

def _evolved_triples(ctx, f, p, t_list):
    """P_t of f^p, f and f^(p-2) Gamma(f) at each requested time."""
    gam = operators.gamma(ctx.fields, f)
    fp = f**p
    weighted = f ** (p - 2.0) * gam
    dt = ctx.dt_local
    times = list(t_list)
    a = pde.semigroup_collect(ctx.prop, fp, times, dt)
    b = pde.semigroup_collect(ctx.prop, f, times, dt)
    c = pde.semigroup_collect(ctx.prop, weighted, times, dt)
    return {t: (a[t], b[t], c[t]) for t in times}


def _refined_local_margins(ctx, f, p, t_list, reverse):
    core = ctx.grid.core_mask(ctx.core_fraction)
    out = {}
    for t, (pfp, pf, pw) in _evolved_triples(ctx, f, p, t_list).items():
        ratio = pfp / pf**p
        bracket = (pfp - pf**p * ratio ** (2.0 / p - 1.0)) / (p - 1.0) ** 2
        if reverse:
            gam_after = operators.gamma(ctx.fields, pf)
            rhs = (kappa_factor(ctx.rho, t)
                   * ratio ** (1.0 - 2.0 / p) * pf ** (p - 2.0) * gam_after)
            margins = bracket - rhs
        else:
            rhs = tau_factor(ctx.rho, t) * pw
            margins = rhs - bracket
        out[t] = float(margins[core].min())
    return out


def _iso_local_margins(ctx, f, t_list, reverse):
    phi = phimod.make_phi("gauss-isoperimetry")
    core = ctx.grid.core_mask(ctx.core_fraction)
    dt = ctx.dt_local
    gam = operators.gamma(ctx.fields, f)
    phif = np.asarray(phi.phi(f))
    energy = np.asarray(phi.d2phi(f)) * gam
    times = list(t_list)
    pa = pde.semigroup_collect(ctx.prop, phif, times, dt)
    pb = pde.semigroup_collect(ctx.prop, f, times, dt)
    pc = pde.semigroup_collect(ctx.prop, energy, times, dt)
    out = {}
    for t in times:
        pf = pb[t]
        ent_local = pa[t] - np.asarray(phi.phi(pf))
        d2 = np.asarray(phi.d2phi(pf))
        if reverse:
            gam_after = operators.gamma(ctx.fields, pf)
            arg = 0.5 * kappa_factor(ctx.rho, t) * d2**2 * gam_after
            rhs = np.log1p(np.maximum(arg, -0.999999)) / d2
            margins = ent_local - rhs
        else:
            arg = 0.5 * tau_factor(ctx.rho, t) * d2 * pc[t]
            rhs = np.log1p(np.maximum(arg, -0.999999)) / d2
            margins = rhs - ent_local
        out[t] = float(margins[core].min())
    return out


def local_inequality_scan(check_id, ctx, t_list=None, battery=None):
    """Worst core margin per time for one of the local checks."""
    t_list = tuple(ctx.t_list if t_list is None else t_list)
    if check_id in ("REFINED_LOCAL", "REFINED_REVERSE"):
        fields = battery or (_single_or_battery(ctx) if ctx.f is not None else ctx.battery)
        reverse = check_id == "REFINED_REVERSE"
        runner = lambda f: _refined_local_margins(ctx, f, ctx.p_local, t_list, reverse)
    elif check_id in ("ISO_LOCAL", "ISO_REVERSE"):
        fields = battery or ctx.battery_unit
        reverse = check_id == "ISO_REVERSE"
        runner = lambda f: _iso_local_margins(ctx, f, t_list, reverse)
    else:
        raise CheckError(f"{check_id} is not a local check")
    per_t = {t: [] for t in t_list}
    for name, f in fields:
        margins = runner(f)
        for t, m in margins.items():
            per_t[t].append((m, name))
    return {t: min(v) for t, v in per_t.items()}


def _chk_local(ctx, check_id):
    scan = local_inequality_scan(check_id, ctx)
    worst_t = min(scan, key=lambda t: scan[t][0])
    margin, name = scan[worst_t]
    note = {
        "field": name,
        "t": float(worst_t),
        "per_t": {repr(float(t)): float(m) for t, (m, _) in sorted(scan.items())},
        "p": ctx.p_local if check_id.startswith("REFINED") else None,
        "rho": ctx.rho,
    }
    return _result(ctx, check_id, margin, 0.0, margin, ctx.tol_inequality, note)


def _chk_iso_global(ctx):
    phi = phimod.make_phi("gauss-isoperimetry")
    results = []
    for name, f in (_single_or_battery(ctx, phi) if ctx.f is not None
                    else ctx.battery_unit):
        lhs = phimod.phi_entropy(ctx.mu, phi, f)
        energy = integrate(ctx.mu, np.asarray(phi.d2phi(f)) * operators.gamma(ctx.fields, f))
        d2m = float(phi.d2phi(integrate(ctx.mu, f)))
        rhs = math.log1p(d2m * energy / (2.0 * ctx.rho)) / d2m
        results.append((rhs - lhs, lhs, rhs, {"field": name}))
    margin, lhs, rhs, note = _worst(results)
    note["rho"] = ctx.rho
    return _result(ctx, "ISO_GLOBAL", lhs, rhs, margin, ctx.tol_inequality, note)


def _chk_iso_sharper(ctx):
    phi = phimod.make_phi("gauss-isoperimetry")
    results = []
    for name, f in ctx.battery_unit:
        energy = integrate(ctx.mu, np.asarray(phi.d2phi(f)) * operators.gamma(ctx.fields, f))
        d2m = float(phi.d2phi(integrate(ctx.mu, f)))
        log_bound = math.log1p(d2m * energy / (2.0 * ctx.rho)) / d2m
        linear_bound = energy / (2.0 * ctx.rho)
        results.append((linear_bound - log_bound, log_bound, linear_bound,
                        {"field": name}))
    margin, lhs, rhs, note = _worst(results)
    return _result(ctx, "ISO_SHARPER", lhs, rhs, margin, ctx.tol_inequality, note)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_DISPATCH = {
    "GLOBAL_PHI": _chk_global_phi,
    "BECKNER": _chk_beckner,
    "ENTROPY_PRODUCTION": _chk_entropy_production,
    "REFINED_GLOBAL": _chk_refined_global,
    "BECKNER_VS_REFINED": _chk_beckner_vs_refined,
    "INTEGRAL_CRITERION": _chk_integral_criterion,
    "ISO_GLOBAL": _chk_iso_global,
    "ISO_SHARPER": _chk_iso_sharper,
    "RHO_ZERO_RATE": _chk_rho_zero_rate,
    "FP_DISSIPATION": _chk_fp_dissipation,
    "DUALITY": _chk_duality,
}


def run_check(check_id: str, ctx: CheckContext):
    """Evaluate one named check; returns (CheckResult, DecayReport | None)."""
    if check_id in ("REFINED_LOCAL", "REFINED_REVERSE", "ISO_LOCAL", "ISO_REVERSE"):
        return _chk_local(ctx, check_id), None
    if check_id == "EXP_DECAY":
        return _chk_exp_decay(ctx)
    if check_id == "FP_DECAY":
        return _chk_fp_decay(ctx)
    fn = _DISPATCH.get(check_id)
    if fn is None:
        raise CheckError(f"unknown check id {check_id!r}; known: {', '.join(CHECK_IDS)}")
    return fn(ctx), None
