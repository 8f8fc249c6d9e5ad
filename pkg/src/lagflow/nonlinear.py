"""Equation of state, density reconstruction, and the transformed nonlinearities.

The right-hand sides of the transformed momentum system collect every defect
of the Lagrangian change of variables: second-derivative terms weighted by
Z - I, first-derivative terms against grad Z, and the transformed pressure.
All index sums run over one dimension-parameterized einsum kernel, so dim 2
and dim 3 share the same code path; a plain-loop oracle lives in the test
fixtures to cross-check the contractions term by term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Field, Grid, TimeSeries, gradient_values, hessian_values, spatial_norm
from .flow import FlowState
from .lame import FluidParams

__all__ = [
    "EquationOfState",
    "NonlinearReport",
    "pressure",
    "pressure_potential",
    "density_from_jacobian",
    "continuity_oracle",
    "assemble_F_u",
    "assemble_F_Gamma",
    "extended_normal_field",
    "energy_report",
    "nonlinearity_norm_report",
]


# ---------------------------------------------------------------------------
# equation of state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquationOfState:
    """Barotropic pressure p = a rho^gamma and its convex potential."""

    a: float
    gamma: float

    def __post_init__(self):
        if self.a <= 0 or self.gamma <= 1:
            raise ValueError("need a > 0 and gamma > 1")

    def p(self, rho):
        return self.a * rho ** self.gamma

    def potential(self, rho):
        # P' rho - P = p fixes P = a rho^gamma / (gamma - 1)
        return self.a * rho ** self.gamma / (self.gamma - 1.0)


def _check_positive(rho: np.ndarray):
    if np.any(rho <= 0):
        bad = np.argwhere(rho <= 0)[0]
        raise ValueError(
            f"nonpositive density at node index {tuple(int(i) for i in bad)}")


def pressure(eos: EquationOfState, rho: Field) -> Field:
    _check_positive(rho.values)
    return Field(rho.grid, eos.p(rho.values))


def pressure_potential(eos: EquationOfState, rho: Field) -> Field:
    _check_positive(rho.values)
    return Field(rho.grid, eos.potential(rho.values))


# ---------------------------------------------------------------------------
# density from the flow Jacobian
# ---------------------------------------------------------------------------

def density_from_jacobian(rho0: Field, J: np.ndarray,
                          rho_min: float) -> tuple[Field, bool]:
    """rho = rho0 / J with a positivity flag (min rho >= rho_min / 2)."""
    if np.any(J <= 0):
        bad = np.argwhere(J <= 0)[0]
        raise RuntimeError(
            f"nonpositive Jacobian at node index {tuple(int(i) for i in bad)}; "
            "the stopping monitor should have fired")
    rho = Field(rho0.grid, rho0.values / J)
    return rho, bool(rho.values.min() >= 0.5 * rho_min)


def continuity_oracle(ubar: TimeSeries, states: list[FlowState],
                      rho0: Field) -> tuple[np.ndarray, float]:
    """RK2 integration of d rho/dt = -rho (grad u : Z^T) vs rho0 / J.

    Returns the integrated density stack and the max deviation from the
    Jacobian representation over all frames.
    """
    grid = ubar.grid
    L = len(states)
    dt = ubar.step
    rates = [
        -np.einsum("...ij,...ji->...", gradient_values(grid, ubar.values[n]),
                   states[n].Z)
        for n in range(L)
    ]
    out = np.empty((L,) + grid.extent)
    out[0] = rho0.values
    cur = out[0].copy()
    for n in range(L - 1):
        pred = cur * (1.0 + dt * rates[n])
        cur = cur + 0.5 * dt * (cur * rates[n] + pred * rates[n + 1])
        out[n + 1] = cur
    dev = max(
        float(np.max(np.abs(out[n] - rho0.values / states[n].J)))
        for n in range(L)
    )
    return out, dev


# ---------------------------------------------------------------------------
# transformed nonlinearities
# ---------------------------------------------------------------------------

def assemble_F_u(grid: Grid, G: np.ndarray, H: np.ndarray, Z: np.ndarray,
                 dZ: np.ndarray, J: np.ndarray, rho0: np.ndarray,
                 params: FluidParams) -> np.ndarray:
    """Velocity-equation nonlinearity from precomputed derivative arrays.

    G[i, m] = d_m u_i, H[i, k, l] = d_k d_l u_i, Z[k, j] inverse flow
    gradient, dZ[k, j, l] = d_l Z_{kj}.  With Z = I, J = 1 every defect
    group vanishes and only -(1/rho0) grad p(rho0) survives.
    """
    mu, lam = params.mu, params.lam
    eos = EquationOfState(params.a, params.gamma)
    dim = grid.dim
    eye = np.eye(dim)
    Zd = Z - eye
    inv_rho = 1.0 / rho0

    lap = np.einsum("...ikk->...i", H)
    graddiv = np.einsum("...jij->...i", H)
    out = ((J - 1.0) * inv_rho)[..., None] * (mu * lap + (mu + lam) * graddiv)

    c_mu = (mu * J * inv_rho)[..., None]
    out += c_mu * (
        np.einsum("...ikl,...kj,...lj->...i", H, Zd, Z)
        + np.einsum("...ikl,...lk->...i", H, Zd)
        + np.einsum("...lj,...ik,...kjl->...i", Z, G, dZ)
    )
    c_ml = ((mu + lam) * J * inv_rho)[..., None]
    out += c_ml * (
        np.einsum("...jkl,...kj,...li->...i", H, Zd, Z)
        + np.einsum("...jjl,...li->...i", H, Zd)
        + np.einsum("...li,...jk,...kjl->...i", Z, G, dZ)
    )

    grad_p = gradient_values(grid, eos.p(rho0 / J))
    out -= (J * inv_rho)[..., None] * np.einsum("...ji,...j->...i", Z, grad_p)
    return out


def assemble_F_Gamma(G: np.ndarray, Z: np.ndarray, J: np.ndarray,
                     rho0: np.ndarray, normals: np.ndarray,
                     params: FluidParams) -> np.ndarray:
    """Boundary nonlinearity at nodes carrying the normal array ``normals``.

    Works both on the boundary node set (with the outward normals) and on
    the full grid against a fixed extension of the normal, which is how the
    surrogate norms of the boundary data are measured.  With Z = I, J = 1
    only the pressure group (p(rho0) - p_ext) N survives.
    """
    mu, lam = params.mu, params.lam
    eos = EquationOfState(params.a, params.gamma)
    S = J[..., None] * np.einsum("...lj,...l->...j", Z, normals)
    W = normals - S
    div = np.einsum("...kk->...", G)

    out = mu * np.einsum("...ij,...j->...i", G, W)
    out += mu * np.einsum("...ji,...j->...i", G, W)
    out += lam * div[..., None] * W
    out += mu * np.einsum("...ik,...k->...i", G,
                          S - np.einsum("...kj,...j->...k", Z, S))
    out += mu * (np.einsum("...ji,...j->...i", G, S)
                 - np.einsum("...ki,...jk,...j->...i", Z, G, S))
    out += lam * (div - np.einsum("...lk,...kl->...", Z, G))[..., None] * S
    out += (eos.p(rho0 / J) - params.p_ext)[..., None] * S
    return out


def extended_normal_field(grid: Grid, width_cells: float = 2.0) -> Field:
    """Fixed interior extension of the outward unit normal.

    Each face normal is continued inward with a cubic ramp over
    ``width_cells`` cells and the contributions are blended; where the
    blended magnitude exceeds one (edges, corners) it is renormalized, so
    the trace matches the per-node boundary normals.
    """
    c = grid.coords()
    vals = np.zeros(grid.extent + (grid.dim,))
    for ax in range(grid.dim):
        width = width_cells * grid.spacing[ax]
        lo, hi = grid.box[ax]
        for sign, edge in ((-1.0, lo), (1.0, hi)):
            dist = np.abs(c[..., ax] - edge)
            u = np.clip(dist / width, 0.0, 1.0)
            ramp = 1.0 - (3.0 * u**2 - 2.0 * u**3)
            vals[..., ax] += sign * ramp
    mag = np.sqrt(np.sum(vals**2, axis=-1))
    vals /= np.maximum(mag, 1.0)[..., None]
    return Field(grid, vals)


# ---------------------------------------------------------------------------
# energy accounting
# ---------------------------------------------------------------------------

def energy_report(rho_stack: np.ndarray, ubar: TimeSeries,
                  states: list[FlowState], params: FluidParams) -> dict:
    """Total energy, viscous dissipation, and volume per frame.

    Everything is evaluated in the reference coordinates with the volume
    element J dy; the Eulerian velocity gradient is grad u . Z.
    """
    grid = ubar.grid
    eos = EquationOfState(params.a, params.gamma)
    w = grid.quad_weights
    E, D, vol = [], [], []
    for n, s in enumerate(states):
        rho = rho_stack[n]
        u = ubar.values[n]
        kin = 0.5 * rho * np.sum(u * u, axis=-1)
        pot = eos.potential(rho)
        volume = float(np.sum(w * s.J))
        E.append(float(np.sum(w * (kin + pot) * s.J)) + params.p_ext * volume)
        Gx = np.einsum("...ik,...kj->...ij", gradient_values(grid, u), s.Z)
        sym = Gx + np.swapaxes(Gx, -1, -2)
        dens = (params.mu * np.einsum("...ij,...ij->...", sym, Gx)
                + params.lam * np.einsum("...ii->...", Gx) ** 2)
        D.append(float(np.sum(w * dens * s.J)))
        vol.append(volume)
    return {"energy": np.array(E), "dissipation": np.array(D),
            "volume": np.array(vol)}


# ---------------------------------------------------------------------------
# norm reports
# ---------------------------------------------------------------------------

@dataclass
class NonlinearReport:
    """Surrogate norms of the assembled nonlinearities on a stopped window."""

    F_u_norm: float           # L^p(0, sigma; L^q)
    F_Gamma_norm: float       # H^{theta,p}(0, sigma; H^{1,q}) of the extension
    M_rho0: float
    M_rho0_inv: float
    M_sto: float
    window: float


def nonlinearity_norm_report(grid: Grid, times: np.ndarray,
                             F_u_stack: np.ndarray, F_G_stack: np.ndarray,
                             rho0: Field, U: TimeSeries | None,
                             sigma: float, p: float, q: float,
                             theta: float) -> NonlinearReport:
    """Evaluate the monitored norms on [0, sigma]."""
    from .fields import slobodeckij_time_seminorm, time_lp_norm

    keep = int(np.searchsorted(times, sigma + 1e-12))
    keep = max(2, min(keep, len(times)))
    tt = times[:keep]
    fu_frames = np.array([spatial_norm(grid, F_u_stack[n], "Lq", q)
                          for n in range(keep)])
    fu = time_lp_norm(tt, fu_frames, p)
    ts_g = TimeSeries(grid, tt, F_G_stack[:keep])
    fg = slobodeckij_time_seminorm(ts_g, theta, p, "H1q", q)
    m_rho = spatial_norm(grid, rho0.values, "H1q", q)
    m_rho_inv = spatial_norm(grid, 1.0 / rho0.values, "H1q", q)
    if U is None:
        m_sto = 0.0
    else:
        u_frames = np.array([spatial_norm(grid, U.values[n], "H2q", q)
                             for n in range(keep)])
        m_sto = time_lp_norm(tt, u_frames, p)
    return NonlinearReport(fu, fg, m_rho, m_rho_inv, m_sto, float(tt[-1]))
