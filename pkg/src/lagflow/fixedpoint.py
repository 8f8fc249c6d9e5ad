"""Reference solution, solution map, and the stopped fixed-point iteration.

One iterate of the solution map: take a velocity v, add the stochastic
convolution U, generate the Lagrangian quantities (Z, J) from the flow of
v + U, reconstruct the density rho0 / J, assemble the nonlinearities, and
solve the linear traction problem for the next velocity.  The iteration is
centered at a reference solution carrying the inhomogeneous boundary data,
and every iterate restarts the flow from t = 0 so the contraction factor is
measured on the map itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import Field, Grid, TimeSeries, gradient_values, hessian_values, spatial_norm
from .flow import (
    FlowState,
    MonitorConfig,
    MonitorResult,
    NoiseFlow,
    compose_flow,
    identity_noise_flow,
    integrate_label_flow,
    integrate_noise_flow,
    stopping_monitor,
)
from .lame import FluidParams, LameOperator, apply_B, solve_lame, solve_stoch_convolution
from .nonlinear import (
    EquationOfState,
    assemble_F_Gamma,
    assemble_F_u,
    density_from_jacobian,
    energy_report,
    nonlinearity_norm_report,
)
from .noise import BrownianBundle, StochasticForcing, TransportField

__all__ = [
    "SolveConfig",
    "SolutionBundle",
    "PicardDivergence",
    "compatibility_check",
    "solve_reference",
    "apply_Psi",
    "picard_solve",
    "contraction_probe",
    "e1_norm",
]


@dataclass
class SolveConfig:
    """Exponents, thresholds, and horizons of one solver run."""

    p: float = 4.0
    q: float = 8.0
    delta: float = 0.1
    delta0: float = 0.2
    eps_star: float = 0.25
    R: float = 5.0            # iteration ball radius
    r: float = 1.0            # centered ball radius
    T: float = 0.05
    dt: float = 1e-3
    picard_tol: float = 1e-9
    picard_max_iter: int = 12
    eps_reg: float = 0.25     # forcing-regularity tag, recorded in reports
    C_monitor: float = 1.0
    pad_cells: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.p > 2:
            raise ValueError(f"need p > 2, got {self.p}")
        if not self.q > 3:
            raise ValueError(f"need q > 3, got {self.q}")
        if not 2.0 / self.p + 3.0 / self.q < 1:
            raise ValueError(
                f"need 2/p + 3/q < 1, got {2 / self.p + 3 / self.q:.3f}")
        if not (0 < self.delta <= self.delta0 <= self.eps_star):
            raise ValueError(
                f"need 0 < delta <= delta0 <= eps_star, got "
                f"{self.delta}, {self.delta0}, {self.eps_star}")
        n = round(self.T / self.dt)
        if n < 1 or abs(n * self.dt - self.T) > 1e-12 * max(self.T, 1.0):
            raise ValueError(f"dt = {self.dt} does not divide T = {self.T}")
        if self.r <= 0 or self.R <= 0 or self.r > self.R:
            raise ValueError("ball radii must satisfy 0 < r <= R")

    @property
    def theta(self) -> float:
        return 0.5 - 0.5 / self.q

    @property
    def alpha(self) -> float:
        return 0.5 * (self.theta + 0.5)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(round(self.T / self.dt) + 1)

    def monitor(self) -> MonitorConfig:
        return MonitorConfig(self.delta, self.delta0, self.eps_star,
                             self.theta, self.p, self.q)


class PicardDivergence(RuntimeError):
    """Iteration failed to contract; carries the measured difference norms."""

    def __init__(self, msg, diffs):
        super().__init__(msg)
        self.diffs = diffs


# ---------------------------------------------------------------------------
# norms and data checks
# ---------------------------------------------------------------------------

def e1_norm(ts: TimeSeries, p: float, q: float, n_frames: int | None = None) -> float:
    """Solution-space norm: L^p(0,t; H^{2,q}) + W^{1,p}(0,t; L^q)."""
    k = len(ts) if n_frames is None else min(n_frames, len(ts))
    if k < 2:
        return 0.0
    tt = ts.times[:k]
    dt = tt[1] - tt[0]
    h2 = np.array([spatial_norm(ts.grid, ts.values[n], "H2q", q) for n in range(k)])
    part1 = np.trapezoid(h2**p, tt) ** (1 / p)
    quot = np.array([
        spatial_norm(ts.grid, (ts.values[n + 1] - ts.values[n]) / dt, "Lq", q)
        for n in range(k - 1)
    ])
    part2 = float(np.sum(quot**p * dt) ** (1 / p))
    return part1 + part2


def compatibility_check(rho0: Field, u0: Field, params: FluidParams,
                        op: LameOperator | None = None) -> float:
    """Max boundary residual of (S(grad u0) - p(rho0) I) N + p_ext N."""
    grid = rho0.grid
    if op is None:
        op = LameOperator(grid, rho0, params)
    eos = EquationOfState(params.a, params.gamma)
    idx, normals = grid.boundary_nodes()
    traction = apply_B(op, u0)
    p_b = eos.p(rho0.values[tuple(idx.T)])
    resid = traction - (p_b[:, None] - params.p_ext) * normals
    return float(np.max(np.linalg.norm(resid, axis=-1)))


def reference_boundary_data(rho0: Field, params: FluidParams) -> np.ndarray:
    eos = EquationOfState(params.a, params.gamma)
    idx, normals = rho0.grid.boundary_nodes()
    p_b = eos.p(rho0.values[tuple(idx.T)])
    return (p_b[:, None] - params.p_ext) * normals


def solve_reference(op: LameOperator, rho0: Field, u0: Field,
                    params: FluidParams, cfg: SolveConfig,
                    times: np.ndarray | None = None) -> TimeSeries:
    """Homogeneous evolution with the pressure-mismatch traction data."""
    times = cfg.times if times is None else times
    g0 = reference_boundary_data(rho0, params)
    g = np.broadcast_to(g0, (len(times),) + g0.shape).copy()
    return solve_lame(op, None, g, u0, times)


# ---------------------------------------------------------------------------
# the solution map
# ---------------------------------------------------------------------------

@dataclass
class PsiResult:
    v: TimeSeries
    states: list[FlowState]
    monitor: MonitorResult
    n_frames: int              # usable frames (window [0, sigma])
    rho_stack: np.ndarray
    F_u: np.ndarray
    F_Gamma_ext: np.ndarray    # full-grid assembly against the extended normal


def apply_Psi(v1: TimeSeries, U: TimeSeries, op: LameOperator, rho0: Field,
              u0: Field, params: FluidParams, cfg: SolveConfig,
              nf: NoiseFlow, N_ext: Field) -> PsiResult:
    """One application of the solution map on the monitored window."""
    grid = v1.grid
    ubar = TimeSeries(grid, v1.times, v1.values + U.values[: len(v1)])
    Y, gradY = integrate_label_flow(ubar, nf)
    states = compose_flow(nf, Y, gradY, cfg.eps_star)
    monitor = stopping_monitor(states, cfg.monitor(), grid)
    n_frames = len(states) if not monitor.fired else max(2, monitor.fired_index + 1)
    times_w = v1.times[:n_frames]

    idx_b, normals_b = grid.boundary_nodes()
    bsel = tuple(idx_b.T)
    L = n_frames
    F_u = np.empty((L,) + grid.extent + (grid.dim,))
    F_G_b = np.empty((L, len(idx_b), grid.dim))
    F_G_ext = np.empty((L,) + grid.extent + (grid.dim,))
    for n in range(L):
        s = states[n]
        G = gradient_values(grid, ubar.values[n])
        H = hessian_values(grid, ubar.values[n])
        dZ = gradient_values(grid, s.Z)
        F_u[n] = assemble_F_u(grid, G, H, s.Z, dZ, s.J, rho0.values, params)
        F_G_b[n] = assemble_F_Gamma(G[bsel], s.Z[bsel], s.J[bsel],
                                    rho0.values[bsel], normals_b, params)
        F_G_ext[n] = assemble_F_Gamma(G, s.Z, s.J, rho0.values,
                                      N_ext.values, params)
    f_series = TimeSeries(grid, times_w, F_u)
    with warnings.catch_warnings():
        # the traction data of the map equals (p(rho0) - p_ext) N at t = 0
        # up to discretization; the initial check is reported by the driver
        warnings.simplefilter("ignore", UserWarning)
        v = solve_lame(op, f_series, F_G_b, u0, times_w)
    rho_stack = np.stack([rho0.values / states[n].J for n in range(L)])
    return PsiResult(v, states[:L], monitor, L, rho_stack, F_u, F_G_ext)


# ---------------------------------------------------------------------------
# Picard driver
# ---------------------------------------------------------------------------

def apply_Psi_deterministic(v1: TimeSeries, op: LameOperator, rho0: Field,
                            u0: Field, params: FluidParams,
                            cfg: SolveConfig, N_ext: Field) -> PsiResult:
    """Noise-free reference for the solution map.

    Never constructs noise objects: the label flow is integrated directly
    (dY/dt = u(t, y), Heun) and X = Y.  Used to pin down the deterministic
    reduction of the full pipeline.
    """
    grid = v1.grid
    dim = grid.dim
    dt = v1.step
    L = len(v1)
    ub = v1.values
    gub = np.stack([gradient_values(grid, ub[n]) for n in range(L)])
    Y = np.empty((L,) + grid.extent + (dim,))
    G = np.empty((L,) + grid.extent + (dim, dim))
    Y[0] = grid.coords()
    G[0] = np.eye(dim)
    y, g = Y[0].copy(), G[0].copy()
    for n in range(L - 1):
        y = y + 0.5 * dt * (ub[n] + ub[n + 1])
        g = g + 0.5 * dt * (gub[n] + gub[n + 1])
        Y[n + 1] = y
        G[n + 1] = g
    from .flow import FlowState, mat_det, mat_inv
    eye = np.eye(dim)
    states = []
    for n in range(L):
        J = mat_det(G[n])
        dev = float(np.max(np.sqrt(np.sum((G[n] - eye) ** 2, axis=(-2, -1)))))
        valid = dev <= cfg.eps_star and bool(np.all(J > 0))
        Z = mat_inv(G[n], J)
        states.append(FlowState(float(v1.times[n]), Y[n], G[n], Z, J, valid,
                                max(0.0, dev - cfg.eps_star)))
    monitor = stopping_monitor(states, cfg.monitor(), grid)
    n_frames = len(states) if not monitor.fired else max(2, monitor.fired_index + 1)
    times_w = v1.times[:n_frames]
    idx_b, normals_b = grid.boundary_nodes()
    bsel = tuple(idx_b.T)
    F_u = np.empty((n_frames,) + grid.extent + (dim,))
    F_G_b = np.empty((n_frames, len(idx_b), dim))
    F_G_ext = np.empty((n_frames,) + grid.extent + (dim,))
    for n in range(n_frames):
        s = states[n]
        Gn = gub[n]
        H = hessian_values(grid, ub[n])
        dZ = gradient_values(grid, s.Z)
        F_u[n] = assemble_F_u(grid, Gn, H, s.Z, dZ, s.J, rho0.values, params)
        F_G_b[n] = assemble_F_Gamma(Gn[bsel], s.Z[bsel], s.J[bsel],
                                    rho0.values[bsel], normals_b, params)
        F_G_ext[n] = assemble_F_Gamma(Gn, s.Z, s.J, rho0.values,
                                      N_ext.values, params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        v = solve_lame(op, TimeSeries(grid, times_w, F_u), F_G_b, u0, times_w)
    rho_stack = np.stack([rho0.values / states[n].J for n in range(n_frames)])
    return PsiResult(v, states[:n_frames], monitor, n_frames, rho_stack,
                     F_u, F_G_ext)


@dataclass
class SolutionBundle:
    """Everything one pathwise run produces."""

    grid: Grid
    times: np.ndarray          # usable window [0, tau]
    v: TimeSeries
    U: TimeSeries
    ubar: TimeSeries
    rho: np.ndarray            # density frames on the window
    states: list[FlowState]
    monitor: MonitorResult
    tau: float
    kappa: float
    iterations: int
    diffs: list[float]
    converged: bool
    energy: dict
    nonlinear_report: object
    rho_positive: bool
    compat_residual: float
    metadata: dict = dc_field(default_factory=dict)


def picard_solve(rho0: Field, u0: Field, params: FluidParams, cfg: SolveConfig,
                 Q: TransportField, bundle: BrownianBundle | None,
                 forcing: StochasticForcing | None,
                 collect_reports: bool = True,
                 deterministic_path: bool = False) -> SolutionBundle:
    """Stopped fixed-point iteration of the solution map.

    Starts from the reference solution, iterates until the successive
    difference in the solution norm drops below the Picard tolerance, and
    rebuilds the flow of the converged velocity for the returned record.
    ``deterministic_path`` switches to the reference implementation that
    never constructs noise objects (only sensible with K = 0, M = 0).
    """
    grid = rho0.grid
    times = cfg.times
    op = LameOperator(grid, rho0, params)
    compat = compatibility_check(rho0, u0, params, op)
    if compat > 1e-8:
        warnings.warn(f"initial compatibility residual {compat:.3e}; "
                      "the run proceeds", stacklevel=2)

    if deterministic_path and (Q.K > 0 or (forcing is not None and forcing.M > 0)):
        raise ValueError("the deterministic path requires K = 0 and M = 0")
    if forcing is not None and forcing.M > 0:
        if bundle is None:
            raise ValueError("forcing modes need a Brownian bundle")
        U = solve_stoch_convolution(op, forcing, bundle)
    else:
        U = TimeSeries(grid, times, np.zeros((len(times),) + grid.extent + (grid.dim,)))
    if deterministic_path:
        nf = None
    elif Q.K > 0 and bundle is not None:
        nf = integrate_noise_flow(Q, bundle, grid, cfg.pad_cells)
    else:
        nf = identity_noise_flow(grid, times, cfg.pad_cells)

    from .nonlinear import extended_normal_field
    N_ext = extended_normal_field(grid)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        v_ref = solve_reference(op, rho0, u0, params, cfg, times)
    ref_norm = e1_norm(v_ref, cfg.p, cfg.q)
    if cfg.r + ref_norm > cfg.R:
        raise ValueError(
            f"ball radii violated: r + |v_ref| = {cfg.r + ref_norm:.3g} "
            f"exceeds R = {cfg.R}")

    v_prev = v_ref
    n_frames = len(times)
    diffs: list[float] = []
    last: PsiResult | None = None
    converged = False
    rising = 0
    for it in range(1, cfg.picard_max_iter + 1):
        if deterministic_path:
            res = apply_Psi_deterministic(v_prev.restrict(n_frames), op, rho0,
                                          u0, params, cfg, N_ext)
        else:
            res = apply_Psi(v_prev.restrict(n_frames), U, op, rho0, u0, params,
                            cfg, nf, N_ext)
        n_frames = min(n_frames, res.n_frames)
        dv = TimeSeries(grid, times[:n_frames],
                        res.v.values[:n_frames] - v_prev.values[:n_frames])
        d = e1_norm(dv, cfg.p, cfg.q)
        diffs.append(d)
        ball = e1_norm(TimeSeries(grid, times[:n_frames],
                                  res.v.values[:n_frames] - v_ref.values[:n_frames]),
                       cfg.p, cfg.q)
        if ball > cfg.r:
            raise PicardDivergence(
                f"iterate {it} left the centered ball (|v - v_ref| = {ball:.3g} "
                f"> r = {cfg.r})", diffs)
        last = res
        v_prev = res.v
        if d <= cfg.picard_tol:
            converged = True
            break
        if len(diffs) >= 2:
            rising = rising + 1 if diffs[-1] >= diffs[-2] else 0
            if rising >= 3:
                raise PicardDivergence(
                    "successive differences failed to contract for three "
                    "iterations; reduce T or delta", diffs)
    iterations = len(diffs)
    kappa = 0.0
    ratios = [b / a for a, b in zip(diffs, diffs[1:]) if a > 0]
    if ratios:
        kappa = float(ratios[-1])

    # rebuild the Lagrangian record of the converged velocity
    v_final = v_prev.restrict(n_frames)
    ubar = TimeSeries(grid, times[:n_frames],
                      v_final.values + U.values[:n_frames])
    if deterministic_path:
        final = apply_Psi_deterministic(v_final, op, rho0, u0, params, cfg, N_ext)
        states, monitor = final.states, final.monitor
    else:
        Y, gradY = integrate_label_flow(ubar, nf)
        states = compose_flow(nf, Y, gradY, cfg.eps_star)
        monitor = stopping_monitor(states, cfg.monitor(), grid)
    keep = n_frames if not monitor.fired else monitor.fired_index + 1
    while keep > 1 and not states[keep - 1].valid:
        keep -= 1
    if keep < 2:
        raise RuntimeError("the flow became invalid within the first step; "
                           "no usable window")
    tau = float(times[keep - 1])
    states = states[:keep]
    rho_frames = []
    positive = True
    for s in states:
        rho_f, ok = density_from_jacobian(rho0, s.J, params.rho_min)
        positive = positive and ok
        rho_frames.append(rho_f.values)
    rho_stack = np.stack(rho_frames)
    v_out = v_final.restrict(keep)
    U_out = U.restrict(keep)
    ubar_out = ubar.restrict(keep)

    energy = (energy_report(rho_stack, ubar_out, states, params)
              if collect_reports else {})
    rep = None
    if collect_reports and last is not None:
        k = min(keep, last.n_frames)
        rep = nonlinearity_norm_report(
            grid, times[:k], last.F_u[:k], last.F_Gamma_ext[:k], rho0, U,
            sigma=tau, p=cfg.p, q=cfg.q, theta=cfg.theta)
    return SolutionBundle(
        grid, times[:keep], v_out, U_out, ubar_out, rho_stack, states, monitor,
        tau, kappa, iterations, diffs, converged, energy, rep, positive, compat,
        metadata={
            "seed": cfg.seed,
            "ref_norm": ref_norm,
            "unbounded_transport_fields": bool(getattr(Q, "unbounded", False)),
        },
    )


def contraction_probe(v1: TimeSeries, v2: TimeSeries, U: TimeSeries,
                      op: LameOperator, rho0: Field, u0: Field,
                      params: FluidParams, cfg: SolveConfig,
                      nf: NoiseFlow, N_ext: Field) -> float:
    """kappa = |Psi(v1) - Psi(v2)| / |v1 - v2| on the common window."""
    denom_full = e1_norm(
        TimeSeries(v1.grid, v1.times, v1.values - v2.values), cfg.p, cfg.q)
    if denom_full == 0.0:
        raise ValueError("contraction probe needs two distinct velocities")
    r1 = apply_Psi(v1, U, op, rho0, u0, params, cfg, nf, N_ext)
    r2 = apply_Psi(v2, U, op, rho0, u0, params, cfg, nf, N_ext)
    k = min(r1.n_frames, r2.n_frames)
    num = e1_norm(TimeSeries(v1.grid, v1.times[:k],
                             r1.v.values[:k] - r2.v.values[:k]), cfg.p, cfg.q)
    den = e1_norm(TimeSeries(v1.grid, v1.times[:k],
                             v1.values[:k] - v2.values[:k]), cfg.p, cfg.q)
    return num / den
