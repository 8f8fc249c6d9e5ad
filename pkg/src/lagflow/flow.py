"""Stochastic Lagrangian transformation and its run-time monitors.

The flow map X(t, y) splits into a noise-only flow psi driven by the
transport fields and a label ODE Y driven by the transformed velocity,
X = psi o Y.  All Stratonovich integrals use the Heun predictor-corrector,
and the variational (gradient) equations are integrated with the same
staging so that composed quantities stay consistent.  A stopping monitor
watches the deformation norms

    |grad X - I|_{Linf H^{1,q}} + |Z - I|_{H^{theta,p} H^{1,q}} + |J - 1|_{H^{theta,p} H^{1,q}}

and freezes the usable window at their first crossing of delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import Grid, TimeSeries, gradient_values
from .interp import FlowEscapeError, InterpPlan
from .noise import BrownianBundle, TransportField

__all__ = [
    "NoiseFlow",
    "FlowState",
    "MonitorConfig",
    "MonitorResult",
    "FlowDiagnostics",
    "integrate_noise_flow",
    "identity_noise_flow",
    "integrate_label_flow",
    "compose_flow",
    "direct_flow_oracle",
    "invert_flow",
    "stopping_monitor",
    "flow_diagnostics",
    "jacobian_ode_oracle",
    "solve_flow",
]


# ---------------------------------------------------------------------------
# small dense linear algebra on trailing (d, d) axes
# ---------------------------------------------------------------------------

def mat_det(A: np.ndarray) -> np.ndarray:
    d = A.shape[-1]
    if d == 2:
        return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def mat_inv(A: np.ndarray, det: np.ndarray | None = None) -> np.ndarray:
    """Closed-form (adjugate) inverse of 2x2 / 3x3 matrix fields."""
    d = A.shape[-1]
    if det is None:
        det = mat_det(A)
    out = np.empty_like(A)
    if d == 2:
        out[..., 0, 0] = A[..., 1, 1]
        out[..., 0, 1] = -A[..., 0, 1]
        out[..., 1, 0] = -A[..., 1, 0]
        out[..., 1, 1] = A[..., 0, 0]
        return out / det[..., None, None]
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != j]
            c = [k for k in range(3) if k != i]
            minor = (A[..., r[0], c[0]] * A[..., r[1], c[1]]
                     - A[..., r[0], c[1]] * A[..., r[1], c[0]])
            out[..., i, j] = (-1.0) ** (i + j) * minor
    return out / det[..., None, None]


# ---------------------------------------------------------------------------
# noise-only flow
# ---------------------------------------------------------------------------

@dataclass
class NoiseFlow:
    """Noise-only flow psi tracked on a padded node grid.

    Arrays are stacked over time levels: ``psi`` (L, ext_p, d), ``Dpsi`` and
    ``Dpsi_inv`` (L, ext_p, d, d).  ``grad_Dpsi_inv`` holds the spatial
    derivatives of the inverse gradient, needed by the label-ODE chain rule.
    """

    axes: list[np.ndarray]
    times: np.ndarray
    psi: np.ndarray
    Dpsi: np.ndarray
    Dpsi_inv: np.ndarray
    det_Dpsi: np.ndarray
    grad_Dpsi_inv: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def n_levels(self) -> int:
        return len(self.times)

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def plan(self, pts: np.ndarray, time=None) -> InterpPlan:
        return InterpPlan(self.axes, pts, extrapolate=False, time=time)

    def identity_check(self, tol: float = 1e-8) -> float:
        """Max deviation of Dpsi . Dpsi_inv from the identity."""
        prod = np.einsum("...ij,...jk->...ik", self.Dpsi, self.Dpsi_inv)
        eye = np.eye(self.dim)
        return float(np.max(np.abs(prod - eye)))


def _padded_axes(grid: Grid, pad_cells: int) -> list[np.ndarray]:
    axes = []
    for (a, b), n, h in zip(grid.box, grid.extent, grid.spacing):
        axes.append(np.linspace(a - pad_cells * h, b + pad_cells * h,
                                n + 2 * pad_cells))
    return axes


def _transport_sums(Q: TransportField, pts, dW, with_grad=True):
    """sum_k Q_k(pts) dW_k and (optionally) sum_k DQ_k(pts) dW_k."""
    vec = np.zeros(pts.shape)
    mat = np.zeros(pts.shape[:-1] + (pts.shape[-1],) * 2) if with_grad else None
    for k in range(Q.K):
        vec += Q.value(k, pts) * dW[k]
        if with_grad:
            mat += Q.jacobian(k, pts) * dW[k]
    return vec, mat


def integrate_noise_flow(Q: TransportField, bundle: BrownianBundle,
                         grid: Grid, pad_cells: int = 4) -> NoiseFlow:
    """Integrate d psi = sum_k Q_k(psi) o dW_k on a padded node grid.

    The gradient flow d Dpsi = sum_k DQ_k(psi) Dpsi o dW_k is advanced with
    the same Heun staging; Dpsi_inv comes from per-point closed-form
    inversion, which keeps Dpsi . Dpsi_inv = I exactly at every level.
    """
    axes = _padded_axes(grid, pad_cells)
    dim = grid.dim
    mesh = np.meshgrid(*axes, indexing="ij")
    pts0 = np.stack(mesh, axis=-1)
    L = bundle.n_steps + 1
    psi = np.empty((L,) + pts0.shape)
    Dpsi = np.empty((L,) + pts0.shape[:-1] + (dim, dim))
    psi[0] = pts0
    Dpsi[0] = np.eye(dim)
    dWs = bundle.transport_increments()
    x = pts0.copy()
    D = Dpsi[0].copy()
    for n in range(bundle.n_steps):
        dW = dWs[:, n]
        try:
            b0, G0 = _transport_sums(Q, x, dW)
            x_pred = x + b0
            D_pred = D + np.einsum("...ij,...jk->...ik", G0, D)
            b1, G1 = _transport_sums(Q, x_pred, dW)
        except ValueError as exc:
            raise FlowEscapeError(
                f"noise flow left the evaluator domain at t = {bundle.times[n]}: {exc}",
                time=bundle.times[n]) from exc
        x = x + 0.5 * (b0 + b1)
        D = D + 0.5 * (np.einsum("...ij,...jk->...ik", G0, D)
                       + np.einsum("...ij,...jk->...ik", G1, D_pred))
        det = mat_det(D)
        if np.max(np.abs(det - 1.0)) > 0.5:
            raise RuntimeError(
                f"noise-flow gradient determinant drifted past 0.5 at "
                f"t = {bundle.times[n + 1]:.6g} (scheme blow-up)")
        psi[n + 1] = x
        Dpsi[n + 1] = D
    det = mat_det(Dpsi)
    Dpsi_inv = mat_inv(Dpsi, det)
    grad_inv = np.stack(
        [np.gradient(Dpsi_inv, ax, axis=1 + d, edge_order=2)
         for d, ax in enumerate(axes)],
        axis=-1,
    )
    return NoiseFlow(axes, bundle.times.copy(), psi, Dpsi, Dpsi_inv, det, grad_inv)


def identity_noise_flow(grid: Grid, times: np.ndarray, pad_cells: int = 4) -> NoiseFlow:
    """The K = 0 noise flow: psi = id at every level."""
    axes = _padded_axes(grid, pad_cells)
    dim = grid.dim
    pts0 = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    L = len(times)
    psi = np.broadcast_to(pts0, (L,) + pts0.shape).copy()
    Dpsi = np.broadcast_to(np.eye(dim), (L,) + pts0.shape[:-1] + (dim, dim)).copy()
    det = np.ones((L,) + pts0.shape[:-1])
    grad_inv = np.zeros((L,) + pts0.shape[:-1] + (dim, dim, dim))
    return NoiseFlow(axes, np.asarray(times, float), psi, Dpsi, Dpsi.copy(),
                     det, grad_inv)


# ---------------------------------------------------------------------------
# label ODE  Y_t(y) = y + int_0^t Dpsi_s(Y_s)^{-1} ubar(s, y) ds
# ---------------------------------------------------------------------------

def integrate_label_flow(ubar: TimeSeries, nf: NoiseFlow):
    """Heun integration of the label ODE; returns (Y, gradY) level stacks.

    grad Y solves the variational equation obtained by differentiating the
    integrand with the product/chain rule, using the tracked derivatives of
    Dpsi^{-1} interpolated at the moving points.
    """
    if len(ubar) != nf.n_levels or abs(ubar.step - nf.step) > 1e-12:
        raise ValueError("velocity frames must be aligned with the noise grid")
    grid = ubar.grid
    dim = grid.dim
    dt = nf.step
    pts0 = grid.coords()
    L = nf.n_levels
    Y = np.empty((L,) + pts0.shape)
    G = np.empty((L,) + pts0.shape[:-1] + (dim, dim))
    Y[0] = pts0
    G[0] = np.eye(dim)
    ub = ubar.values
    gub = np.stack([gradient_values(grid, ub[n]) for n in range(L)])

    def rhs(level, y, g, u, gu):
        plan = nf.plan(y, time=nf.times[level])
        A = plan.apply(nf.Dpsi_inv[level])
        dA = plan.apply(nf.grad_Dpsi_inv[level])
        f = np.einsum("...ij,...j->...i", A, u)
        dg = (np.einsum("...ijl,...lm,...j->...im", dA, g, u)
              + np.einsum("...ij,...jm->...im", A, gu))
        return f, dg

    y, g = Y[0].copy(), G[0].copy()
    for n in range(L - 1):
        f0, dg0 = rhs(n, y, g, ub[n], gub[n])
        y_pred = y + dt * f0
        g_pred = g + dt * dg0
        f1, dg1 = rhs(n + 1, y_pred, g_pred, ub[n + 1], gub[n + 1])
        y = y + 0.5 * dt * (f0 + f1)
        g = g + 0.5 * dt * (dg0 + dg1)
        Y[n + 1] = y
        G[n + 1] = g
    return Y, G


# ---------------------------------------------------------------------------
# composition and the per-level state
# ---------------------------------------------------------------------------

@dataclass
class FlowState:
    """Lagrangian map data at one time level."""

    t: float
    X: np.ndarray
    gradX: np.ndarray
    Z: np.ndarray
    J: np.ndarray
    valid: bool = True
    guard_violation: float = 0.0


def compose_flow(nf: NoiseFlow, Y: np.ndarray, gradY: np.ndarray,
                 eps_star: float = 0.25) -> list[FlowState]:
    """X = psi(Y), grad X = Dpsi(Y) grad Y, then Z and J per level.

    The closed-form inversion is guarded by |grad X - I| <= eps_star in the
    nodewise Frobenius surrogate; a violating level is marked invalid (the
    stopping monitor then fires there).
    """
    states = []
    dim = nf.dim
    eye = np.eye(dim)
    for n in range(nf.n_levels):
        plan = nf.plan(Y[n], time=nf.times[n])
        X = plan.apply(nf.psi[n])
        gradX = np.einsum("...ij,...jk->...ik", plan.apply(nf.Dpsi[n]), gradY[n])
        dev = float(np.max(np.sqrt(np.sum((gradX - eye) ** 2, axis=(-2, -1)))))
        J = mat_det(gradX)
        valid = dev <= eps_star and bool(np.all(J > 0))
        Z = mat_inv(gradX, J) if np.all(np.abs(J) > 1e-14) else np.full_like(gradX, np.nan)
        states.append(FlowState(float(nf.times[n]), X, gradX, Z, J, valid,
                                max(0.0, dev - eps_star)))
    return states


def direct_flow_oracle(ubar: TimeSeries, Q: TransportField,
                       bundle: BrownianBundle) -> np.ndarray:
    """One-shot Heun integration of dX = ubar(t, y) dt + sum Q_k(X) o dW.

    Cross-check only: no psi/Y factorization, no gradient tracking.
    """
    grid = ubar.grid
    if len(ubar) != bundle.n_steps + 1:
        raise ValueError("velocity frames must be aligned with the noise grid")
    dt = bundle.step
    dWs = bundle.transport_increments()
    L = bundle.n_steps + 1
    X = np.empty((L,) + grid.extent + (grid.dim,))
    X[0] = grid.coords()
    x = X[0].copy()
    for n in range(L - 1):
        dW = dWs[:, n]
        b0, _ = _transport_sums(Q, x, dW, with_grad=False)
        pred = x + dt * ubar.values[n] + b0
        b1, _ = _transport_sums(Q, pred, dW, with_grad=False)
        x = x + 0.5 * dt * (ubar.values[n] + ubar.values[n + 1]) + 0.5 * (b0 + b1)
        X[n + 1] = x
    return X


def invert_flow(fs: FlowState, x: np.ndarray, grid: Grid,
                tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Newton inversion of the interpolated map: find y with X(t, y) = x.

    Accepts a single point or a batch (..., dim); the initial guess is the
    tracked node whose image is nearest.
    """
    x = np.asarray(x, float)
    single = x.ndim == 1
    xq = x.reshape(-1, grid.dim)
    flatX = fs.X.reshape(-1, grid.dim)
    # nearest tracked image as the starting label
    d2 = np.sum((flatX[None, :, :] - xq[:, None, :]) ** 2, axis=-1)
    y = grid.coords().reshape(-1, grid.dim)[np.argmin(d2, axis=1)].copy()
    h = min(grid.spacing)
    for _ in range(max_iter):
        plan = InterpPlan(grid.axes, y, extrapolate=True)
        r = plan.apply(fs.X) - xq
        if np.max(np.linalg.norm(r, axis=-1)) <= tol:
            break
        Jac = plan.apply(fs.gradX)
        step = np.einsum("...ij,...j->...i", mat_inv(Jac), r)
        # keep Newton steps inside a couple of cells to avoid overshoot
        ln = np.linalg.norm(step, axis=-1, keepdims=True)
        step = np.where(ln > 2 * h, step * (2 * h / ln), step)
        y = y - step
    res = np.linalg.norm(InterpPlan(grid.axes, y, extrapolate=True).apply(fs.X) - xq,
                         axis=-1)
    if np.max(res) > tol:
        raise RuntimeError(
            f"flow inversion did not converge in {max_iter} Newton steps "
            f"(worst residual {np.max(res):.3e})")
    return y[0] if single else y.reshape(x.shape)


# ---------------------------------------------------------------------------
# stopping monitor
# ---------------------------------------------------------------------------

@dataclass
class MonitorConfig:
    delta: float = 0.1
    delta0: float = 0.2
    eps_star: float = 0.25
    theta: float = 0.4375
    p: float = 4.0
    q: float = 8.0

    def __post_init__(self):
        if not (self.delta <= self.delta0 <= self.eps_star):
            raise ValueError(
                f"need delta <= delta0 <= eps_star, got "
                f"{self.delta}, {self.delta0}, {self.eps_star}")


@dataclass
class MonitorResult:
    sigma: float
    fired: bool
    fired_index: int | None
    times: np.ndarray
    sup_gradX: np.ndarray      # running Linf-in-time H1q of gradX - I
    htheta_Z: np.ndarray       # running H^{theta,p} H^{1,q} of Z - I
    htheta_J: np.ndarray       # same for J - 1
    total: np.ndarray

    def to_csv(self, path) -> None:
        rows = np.column_stack([
            self.times, self.sup_gradX, self.htheta_Z, self.htheta_J,
            (self.total >= 0) & (np.arange(len(self.times)) ==
                                 (self.fired_index if self.fired else -1)),
        ])
        header = "t,normGradXminusI,normZminusI_theta,normJminus1_theta,fired"
        np.savetxt(path, rows, delimiter=",", header=header, comments="",
                   fmt="%.17g")


def _half_q_pow(x: np.ndarray, q: float) -> np.ndarray:
    """x ** (q/2), using repeated squaring when q/2 is a small integer."""
    half = q / 2.0
    if half == int(half) and 1 <= half <= 16:
        out = x
        for _ in range(int(half) - 1):
            out = out * x
        return out
    return x ** half


def _h1q_raw(grid: Grid, v: np.ndarray, g: np.ndarray, q: float) -> float:
    """H^{1,q} surrogate from a value array and its precomputed gradient."""
    w = grid.quad_weights
    comp_v = tuple(range(grid.dim, v.ndim))
    comp_g = tuple(range(grid.dim, g.ndim))
    mag = _half_q_pow(np.sum(v * v, axis=comp_v), q) if comp_v else np.abs(v) ** q
    mag_g = _half_q_pow(np.sum(g * g, axis=comp_g), q)
    return float((np.sum(w * mag) + np.sum(w * mag_g)) ** (1 / q))


class _H1qWindowNorm:
    """Incremental H^{theta,p}(0, t; H^{1,q}) norm of a matrix/scalar deviation.

    Frames are cached flattened (node axis, component axis) in preallocated
    buffers so the pair-norm row of a new frame is one vectorized pass over
    the history.
    """

    def __init__(self, grid: Grid, theta: float, p: float, q: float,
                 capacity: int = 64):
        self.grid = grid
        self.theta = theta
        self.p = p
        self.q = q
        self.w_flat = grid.quad_weights.ravel()
        self.capacity = capacity
        self.count = 0
        self.vals = None
        self.grads = None
        self.frame_norm_pow = []     # |f_i|_{H1q}^p
        self.pair_pow = []           # rows: |f_i - f_n|_{H1q}^p for i < n

    def _row(self, v, g, vs, gs):
        q = self.q
        dv = vs - v[None]
        dg = gs - g[None]
        m = _half_q_pow(np.einsum("npc,npc->np", dv, dv), q)
        m += _half_q_pow(np.einsum("npc,npc->np", dg, dg), q)
        return (m @ self.w_flat) ** (1 / q)

    def push(self, dev: np.ndarray):
        g3 = gradient_values(self.grid, dev)
        npts = self.grid.n_nodes
        v = dev.reshape(npts, -1)
        g = g3.reshape(npts, -1)
        if self.vals is None:
            self.vals = np.empty((self.capacity,) + v.shape)
            self.grads = np.empty((self.capacity,) + g.shape)
        if self.count >= self.capacity:
            self.capacity *= 2
            self.vals = np.concatenate([self.vals, np.empty_like(self.vals)])
            self.grads = np.concatenate([self.grads, np.empty_like(self.grads)])
        k = self.count
        row = self._row(v, g, self.vals[:k], self.grads[:k]) if k else np.zeros(0)
        self.pair_pow.append(row ** self.p)
        self.vals[k] = v
        self.grads[k] = g
        self.count = k + 1
        self.frame_norm_pow.append(_h1q_raw(self.grid, dev, g3, self.q) ** self.p)

    def value(self, times: np.ndarray) -> float:
        n = self.count
        t = times[:n]
        if n < 2:
            return 0.0
        dt = t[1] - t[0]
        lp_pow = np.trapezoid(np.array(self.frame_norm_pow), t)
        sem = 0.0
        for j in range(1, n):
            gaps = t[j] - t[:j]
            sem += 2.0 * np.sum(self.pair_pow[j] * dt**2
                                / gaps ** (1.0 + self.theta * self.p))
        return (lp_pow + sem) ** (1.0 / self.p)


def stopping_monitor(states: list[FlowState], cfg: MonitorConfig,
                     grid: Grid) -> MonitorResult:
    """First time the deformation norm sum reaches delta (else the horizon).

    An invalid flow state (inversion guard violated or J <= 0) also fires
    the monitor at its level.
    """
    dim = grid.dim
    eye = np.eye(dim)
    times = np.array([s.t for s in states])
    accZ = _H1qWindowNorm(grid, cfg.theta, cfg.p, cfg.q)
    accJ = _H1qWindowNorm(grid, cfg.theta, cfg.p, cfg.q)
    sup_run, hZ_run, hJ_run, tot_run = [], [], [], []
    sup_gradX = 0.0
    fired, fired_index = False, None
    for n, s in enumerate(states):
        if not s.valid:
            fired, fired_index = True, n
            # freeze histories at the last valid level
            break
        devG = s.gradX - eye
        gnorm = _h1q_raw(grid, devG, gradient_values(grid, devG), cfg.q)
        sup_gradX = max(sup_gradX, gnorm)
        accZ.push(s.Z - eye)
        accJ.push(s.J - 1.0)
        hZ = accZ.value(times)
        hJ = accJ.value(times)
        total = sup_gradX + hZ + hJ
        sup_run.append(sup_gradX)
        hZ_run.append(hZ)
        hJ_run.append(hJ)
        tot_run.append(total)
        if total >= cfg.delta and not fired:
            fired, fired_index = True, n
            break
    n_kept = len(tot_run)
    sigma = float(times[fired_index]) if fired else float(times[-1])
    return MonitorResult(
        sigma, fired, fired_index, times[:n_kept],
        np.array(sup_run), np.array(hZ_run), np.array(hJ_run), np.array(tot_run),
    )


# ---------------------------------------------------------------------------
# a-priori diagnostics
# ---------------------------------------------------------------------------

@dataclass
class FlowDiagnostics:
    """Advisory a-priori functionals of the noise flow and drift data.

    All constants are collapsed into one configurable C_monitor; the direct
    stopping monitor stays authoritative.
    """

    times: np.ndarray
    Lambda: np.ndarray
    rho: np.ndarray
    K_alpha: np.ndarray
    alpha: float
    B_R: np.ndarray
    beta_R: np.ndarray
    M0: np.ndarray
    M_theta: np.ndarray
    A0: np.ndarray
    B_theta: np.ndarray
    A_theta: np.ndarray
    G: np.ndarray
    horizon: float
    C_monitor: float


def _c2_surrogate_sup(arr, axes):
    """sup-norm surrogate of a C_b^2 norm: field + first + second differences."""
    comp_axes = tuple(range(len(axes), arr.ndim))
    def sup_frob(a):
        return float(np.max(np.sqrt(np.sum(a * a, axis=comp_axes + tuple(
            range(arr.ndim, a.ndim))))))
    total = sup_frob(arr)
    grads = [np.gradient(arr, ax, axis=d, edge_order=2)
             for d, ax in enumerate(axes)]
    total += sup_frob(np.stack(grads, axis=-1))
    g2 = [np.gradient(g, ax, axis=d, edge_order=2)
          for g in grads for d, ax in enumerate(axes)]
    total += sup_frob(np.stack(g2, axis=-1))
    return total


def flow_diagnostics(nf: NoiseFlow, ubar_lp_h2q: np.ndarray,
                     cfg: MonitorConfig, R: float = 1.0,
                     C_monitor: float = 1.0,
                     alpha: float | None = None) -> FlowDiagnostics:
    """Evaluate the a-priori horizon functionals on the discrete grid.

    ``ubar_lp_h2q`` is the running L^p(0, t; H^{2,q}) norm of the driving
    velocity (one value per level); it enters as B_R(t) = R + that norm.
    """
    if alpha is None:
        alpha = 0.5 * (cfg.theta + 0.5)
    L = nf.n_levels
    t = nf.times
    C = C_monitor
    eye = np.eye(nf.dim)
    c2_D = np.array([_c2_surrogate_sup(nf.Dpsi[n], nf.axes) for n in range(L)])
    c2_Dinv = np.array([_c2_surrogate_sup(nf.Dpsi_inv[n], nf.axes) for n in range(L)])
    c2_dev = np.array([_c2_surrogate_sup(nf.Dpsi[n] - eye, nf.axes) for n in range(L)])
    Lambda = 1.0 + np.maximum.accumulate(c2_D + c2_Dinv)
    rho = np.maximum.accumulate(c2_dev)
    # alpha-Hoelder quotient of level pairs
    K = np.zeros(L)
    running = 0.0
    for s in range(1, L):
        dD = nf.Dpsi[s] - nf.Dpsi[:s]
        dI = nf.Dpsi_inv[s] - nf.Dpsi_inv[:s]
        for r in range(s):
            num = (_c2_surrogate_sup(dD[r], nf.axes)
                   + _c2_surrogate_sup(dI[r], nf.axes))
            running = max(running, num / (t[s] - t[r]) ** alpha)
        K[s] = running
    B_R = R + np.asarray(ubar_lp_h2q, float)
    p, th = cfg.p, cfg.theta
    beta = C * Lambda * t ** (1 - 1 / p) * B_R
    M0 = 7.0 * beta
    Mth = C * t ** (1 - th) * Lambda * (1 + beta) * B_R
    poly = 1 + M0 + M0**2
    A0 = C * (rho * poly * (1 + M0) + M0)
    Bth = C * (Lambda * (1 + M0) ** 2 * Mth
               + K * t ** (alpha - th) * poly
               + t ** (1 / p) * rho * poly)
    Ath = C * (Bth * (1 + M0) + rho * poly * Mth + Mth)
    G = A0 + C * (Ath + t ** (1 / p) * A0)
    cross_G = np.argmax(G >= cfg.delta) if np.any(G >= cfg.delta) else None
    cross_b = np.argmax(beta >= 0.125) if np.any(beta >= 0.125) else None
    horizon = float(t[-1])
    if cross_G is not None:
        horizon = min(horizon, float(t[cross_G]))
    if cross_b is not None:
        horizon = min(horizon, float(t[cross_b]))
    return FlowDiagnostics(t, Lambda, rho, K, alpha, B_R, beta, M0, Mth,
                           A0, Bth, Ath, G, horizon, C)


# ---------------------------------------------------------------------------
# transport identity oracle and a convenience driver
# ---------------------------------------------------------------------------

def jacobian_ode_oracle(ubar: TimeSeries, states: list[FlowState]) -> np.ndarray:
    """Independent RK2 integration of dJ/dt = J (grad ubar : Z^T)."""
    grid = ubar.grid
    L = len(states)
    dt = ubar.step
    J = np.empty((L,) + grid.extent)
    J[0] = 1.0
    rates = [
        np.einsum("...ij,...ji->...", gradient_values(grid, ubar.values[n]),
                  states[n].Z)
        for n in range(L)
    ]
    cur = J[0].copy()
    for n in range(L - 1):
        pred = cur * (1.0 + dt * rates[n])
        cur = cur + 0.5 * dt * (cur * rates[n] + pred * rates[n + 1])
        J[n + 1] = cur
    return J


def solve_flow(ubar: TimeSeries, Q: TransportField, bundle: BrownianBundle | None,
               cfg: MonitorConfig, pad_cells: int = 4,
               nf: NoiseFlow | None = None):
    """Full transformation pipeline: psi, Y, composition, monitor.

    Returns (NoiseFlow, Y, gradY, states, MonitorResult).  A precomputed
    ``nf`` may be passed to reuse the noise flow across fixed-point iterates.
    """
    grid = ubar.grid
    if nf is None:
        if bundle is None or Q.K == 0:
            nf = identity_noise_flow(grid, ubar.times, pad_cells)
        else:
            nf = integrate_noise_flow(Q, bundle, grid, pad_cells)
    Y, gradY = integrate_label_flow(ubar, nf)
    states = compose_flow(nf, Y, gradY, cfg.eps_star)
    monitor = stopping_monitor(states, cfg, grid)
    return nf, Y, gradY, states, monitor
