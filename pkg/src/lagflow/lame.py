"""Linearized momentum operator with traction boundary rows.

The interior operator is A u = -(mu/rho0) Lap u - ((mu+lambda)/rho0) grad div u
on second-order stencils; boundary rows replace the evolution equation by the
traction condition S(grad u) N = g, discretized with one-sided second-order
stencils (ghost-node elimination).  Time stepping is implicit Euler with one
sparse factorization per step size, shared by the deterministic solve and the
additive stochastic convolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import Field, Grid, TimeSeries
from .noise import BrownianBundle, StochasticForcing

__all__ = [
    "FluidParams",
    "LameOperator",
    "apply_A",
    "apply_B",
    "solve_lame",
    "solve_stoch_convolution",
    "symbol_matrix",
    "symbol_eigenvalues",
    "symbol_eigenvalues_numeric",
    "lopatinskii_check",
    "halfline_decay_rates",
    "traction_eigenpair",
]


@dataclass(frozen=True)
class FluidParams:
    """Physical constants of the barotropic model."""

    mu: float = 1.0
    lam: float = 0.5
    a: float = 1.0
    gamma: float = 2.0
    p_ext: float = 1.0
    rho_min: float = 1.0       # lower admissible density bound
    rho_max: float = 2.0       # upper admissible density bound

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if 2 * self.mu + 3 * self.lam <= 0:
            raise ValueError(f"2 mu + 3 lambda must be positive, got "
                             f"{2 * self.mu + 3 * self.lam}")
        if self.a <= 0:
            raise ValueError(f"pressure constant a must be positive, got {self.a}")
        if self.gamma <= 1:
            raise ValueError(f"adiabatic exponent must exceed 1, got {self.gamma}")
        if self.p_ext < 0:
            raise ValueError(f"exterior pressure must be nonnegative, got {self.p_ext}")
        if not (0 < self.rho_min <= self.rho_max):
            raise ValueError("density bounds must satisfy 0 < rho_min <= rho_max")


# ---------------------------------------------------------------------------
# 1d stencil matrices (second order, one-sided at the ends)
# ---------------------------------------------------------------------------

def _d1_matrix(n: int, h: float) -> sp.csr_matrix:
    m = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        m[i, i - 1] = -0.5 / h
        m[i, i + 1] = 0.5 / h
    m[0, 0], m[0, 1], m[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    m[n - 1, n - 3], m[n - 1, n - 2], m[n - 1, n - 1] = 0.5 / h, -2.0 / h, 1.5 / h
    return m.tocsr()


def _d2_matrix(n: int, h: float) -> sp.csr_matrix:
    m = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        m[i, i - 1] = 1.0 / h**2
        m[i, i] = -2.0 / h**2
        m[i, i + 1] = 1.0 / h**2
    m[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
    m[n - 1, n - 4:] = np.array([-1.0, 4.0, -5.0, 2.0]) / h**2
    return m.tocsr()


def _scalar_operators(grid: Grid):
    """Per-axis first/second derivative operators on the flattened node set."""
    eyes = [sp.identity(n, format="csr") for n in grid.extent]
    d1, d2 = [], []
    for ax in range(grid.dim):
        mats1 = list(eyes)
        mats2 = list(eyes)
        mats1[ax] = _d1_matrix(grid.extent[ax], grid.spacing[ax])
        mats2[ax] = _d2_matrix(grid.extent[ax], grid.spacing[ax])
        acc1, acc2 = mats1[0], mats2[0]
        for m1, m2 in zip(mats1[1:], mats2[1:]):
            acc1 = sp.kron(acc1, m1, format="csr")
            acc2 = sp.kron(acc2, m2, format="csr")
        d1.append(acc1)
        d2.append(acc2)
    return d1, d2


# ---------------------------------------------------------------------------
# operator assembly
# ---------------------------------------------------------------------------

class LameOperator:
    """Assembled interior operator and traction rows for one (grid, rho0).

    Unknowns are stored component-major: flat index = comp * n_nodes + node.
    """

    def __init__(self, grid: Grid, rho0: Field, params: FluidParams):
        if rho0.values.min() < params.rho_min - 1e-12:
            raise ValueError("initial density falls below its lower bound")
        self.grid = grid
        self.rho0 = rho0
        self.params = params
        dim, N = grid.dim, grid.n_nodes
        d1, d2 = _scalar_operators(grid)
        inv_rho = sp.diags(1.0 / rho0.values.reshape(-1))
        mu, lam = params.mu, params.lam
        lap = sum(d2[1:], start=d2[0])
        blocks = [[None] * dim for _ in range(dim)]
        for i in range(dim):
            for j in range(dim):
                block = sp.csr_matrix((N, N))
                if i == j:
                    block = block - mu * inv_rho @ lap - (mu + lam) * inv_rho @ d2[i]
                else:
                    block = block - (mu + lam) * inv_rho @ (d1[i] @ d1[j])
                blocks[i][j] = block
        self.A = sp.bmat(blocks, format="csr")

        # traction rows: (B u)_i = sum_j [mu (d_j u_i + d_i u_j) + lam d_ij div u] N_j
        bidx, normals = grid.boundary_nodes()
        self.boundary_index = bidx
        self.boundary_normals = normals
        bflat = np.ravel_multi_index(bidx.T, grid.extent)
        self.boundary_flat = bflat
        n_field = np.zeros((dim, N))
        for d in range(dim):
            n_field[d, bflat] = normals[:, d]
        diagN = [sp.diags(n_field[d]) for d in range(dim)]
        bblocks = [[sp.csr_matrix((N, N)) for _ in range(dim)] for _ in range(dim)]
        for i in range(dim):
            for j in range(dim):
                if i == j:
                    for k in range(dim):
                        bblocks[i][j] = bblocks[i][j] + mu * diagN[k] @ d1[k]
                bblocks[i][j] = (bblocks[i][j] + mu * diagN[j] @ d1[i]
                                 + lam * diagN[i] @ d1[j])
        self.B = sp.bmat(bblocks, format="csr")

        # row selectors for the square stepping system
        bnd_rows = np.concatenate([c * N + bflat for c in range(dim)])
        mask = np.zeros(dim * N, dtype=bool)
        mask[bnd_rows] = True
        self.boundary_rows = bnd_rows
        self.boundary_row_mask = mask
        self._steppers: dict[float, spla.SuperLU] = {}

    # -- flat layout helpers ---------------------------------------------------

    def to_flat(self, values: np.ndarray) -> np.ndarray:
        return np.moveaxis(values, -1, 0).reshape(-1)

    def from_flat(self, flat: np.ndarray) -> np.ndarray:
        dim = self.grid.dim
        return np.moveaxis(flat.reshape((dim,) + self.grid.extent), 0, -1)

    def stepper(self, dt: float) -> spla.SuperLU:
        """Factorized implicit-Euler matrix with traction rows enforced."""
        key = round(dt, 15)
        if key not in self._steppers:
            n = self.A.shape[0]
            ident = sp.identity(n, format="csr")
            M = (ident + dt * self.A).tolil()
            Bl = self.B.tolil()
            for r in self.boundary_rows:
                M.rows[r] = Bl.rows[r]
                M.data[r] = Bl.data[r]
            self._steppers[key] = spla.splu(M.tocsc())
        return self._steppers[key]

    def boundary_values_to_rows(self, g: np.ndarray) -> np.ndarray:
        """(n_boundary, dim) traction data -> right-hand side entries."""
        dim, N = self.grid.dim, self.grid.n_nodes
        out = np.zeros(dim * N)
        for c in range(dim):
            out[c * N + self.boundary_flat] = g[:, c]
        return out

    def dump_matrix(self, path, which: str = "A") -> None:
        """Coordinate text dump (row col value per line)."""
        mat = {"A": self.A, "B": self.B}[which].tocoo()
        with open(path, "w") as fh:
            for r, c, v in zip(mat.row, mat.col, mat.data):
                fh.write(f"{r} {c} {v:.17g}\n")


def apply_A(op: LameOperator, u: Field) -> Field:
    if not np.all(np.isfinite(u.values)):
        raise ValueError("non-finite velocity field")
    flat = op.A @ op.to_flat(u.values)
    return Field(op.grid, op.from_flat(flat))


def apply_B(op: LameOperator, u: Field) -> np.ndarray:
    """Traction values at the boundary nodes, shape (n_boundary, dim)."""
    if not np.all(np.isfinite(u.values)):
        raise ValueError("non-finite velocity field")
    flat = op.B @ op.to_flat(u.values)
    dim, N = op.grid.dim, op.grid.n_nodes
    return np.stack([flat[c * N + op.boundary_flat] for c in range(dim)], axis=-1)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def solve_lame(op: LameOperator, f: TimeSeries | None, g: np.ndarray,
               u0: Field, times: np.ndarray,
               compat_tol: float = 1e-8) -> TimeSeries:
    """Implicit Euler for dv/dt + A v = f with traction rows B v = g.

    ``g`` holds boundary data per frame, shape (len(times), n_boundary, dim).
    Initial traction compatibility is checked and reported as a warning;
    the run proceeds either way.
    """
    times = np.asarray(times, float)
    dt = times[1] - times[0]
    L = len(times)
    g = np.zeros((L, len(op.boundary_flat), op.grid.dim)) if g is None else np.asarray(g, float)
    if g.shape[0] != L:
        raise ValueError("boundary data frames must match the time grid")
    compat = np.max(np.abs(apply_B(op, u0) - g[0]))
    if compat > compat_tol:
        warnings.warn(
            f"initial traction data mismatch |B u0 - g(0)| = {compat:.3e}",
            stacklevel=2)
    lu = op.stepper(dt)
    mask = op.boundary_row_mask
    out = np.empty((L,) + op.grid.extent + (op.grid.dim,))
    out[0] = u0.values
    v = op.to_flat(u0.values)
    for n in range(L - 1):
        rhs = v + dt * (op.to_flat(f.values[n + 1]) if f is not None else 0.0)
        rhs[mask] = op.boundary_values_to_rows(g[n + 1])[mask]
        v = lu.solve(rhs)
        if not np.all(np.isfinite(v)):
            raise RuntimeError(f"linear solve produced non-finite values at "
                               f"t = {times[n + 1]:.6g}")
        out[n + 1] = op.from_flat(v)
    return TimeSeries(op.grid, times, out)


def solve_stoch_convolution(op: LameOperator, forcing: StochasticForcing,
                            bundle: BrownianBundle,
                            debug_increments: np.ndarray | None = None) -> TimeSeries:
    """Semi-implicit Euler-Maruyama for dU + A U dt = sum_m amp_m f_m d beta_m.

    Homogeneous traction rows are enforced at every step and U(0) = 0; each
    step uses only increments up to its own level, so the discrete solution
    is adapted by construction.  ``debug_increments`` substitutes a known
    deterministic signal for the mode increments.
    """
    times = bundle.times
    dt = bundle.step
    L = len(times)
    out = np.zeros((L,) + op.grid.extent + (op.grid.dim,))
    if forcing.M == 0:
        return TimeSeries(op.grid, times, out)
    dbeta = bundle.mode_increments() if debug_increments is None else debug_increments
    if dbeta.shape != (forcing.M, L - 1):
        raise ValueError("one increment row per forcing mode is required")
    lu = op.stepper(dt)
    mask = op.boundary_row_mask
    mode_flat = [op.to_flat(m.values) for m in forcing.modes]
    v = np.zeros(op.A.shape[0])
    for n in range(L - 1):
        rhs = v.copy()
        for m in range(forcing.M):
            rhs += forcing.amplitudes[m] * mode_flat[m] * dbeta[m, n]
        rhs[mask] = 0.0
        v = lu.solve(rhs)
        out[n + 1] = op.from_flat(v)
    return TimeSeries(op.grid, times, out)


# ---------------------------------------------------------------------------
# principal symbol and Lopatinskii-Shapiro verification
# ---------------------------------------------------------------------------

def symbol_matrix(params: FluidParams, rho0_value: float, xi: np.ndarray) -> np.ndarray:
    """Principal symbol (1/rho0)(mu |xi|^2 I + (mu+lambda) xi (x) xi)."""
    xi = np.asarray(xi, float)
    d = len(xi)
    return (params.mu * np.dot(xi, xi) * np.eye(d)
            + (params.mu + params.lam) * np.outer(xi, xi)) / rho0_value


def symbol_eigenvalues(params: FluidParams, rho0_value: float,
                       xi: np.ndarray) -> np.ndarray:
    """Closed-form spectrum: mu|xi|^2/rho0 (dim-1 fold) and (2mu+lam)|xi|^2/rho0."""
    xi = np.asarray(xi, float)
    if np.dot(xi, xi) == 0.0:
        raise ValueError("frequency xi must be nonzero")
    if rho0_value < params.rho_min:
        raise ValueError("density below its admissible lower bound")
    s = np.dot(xi, xi) / rho0_value
    return np.sort(np.array([params.mu * s] * (len(xi) - 1)
                            + [(2 * params.mu + params.lam) * s]))


def symbol_eigenvalues_numeric(params: FluidParams, rho0_value: float,
                               xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, float)
    if np.dot(xi, xi) == 0.0:
        raise ValueError("frequency xi must be nonzero")
    return np.sort(np.linalg.eigvalsh(symbol_matrix(params, rho0_value, xi)))


def _halfline_companion(params: FluidParams, rho0_value: float,
                        xi_t: np.ndarray, eta: complex) -> np.ndarray:
    """First-order companion matrix of the boundary-frozen half-line system.

    Tangential frequencies xi_t (length dim-1, real), normal direction last.
    """
    mu, lam = params.mu, params.lam
    d = len(xi_t) + 1
    xi2 = float(np.dot(xi_t, xi_t))
    base = mu * xi2 + eta * rho0_value
    A0 = np.zeros((d, d), dtype=complex)
    A1 = np.zeros((d, d), dtype=complex)
    for i in range(d - 1):
        A0[i, i] = base
        for j in range(d - 1):
            A0[i, j] -= (mu + lam) * xi_t[i] * xi_t[j]
        A1[i, d - 1] = 1j * (mu + lam) * xi_t[i]
        A1[d - 1, i] = -1j * (mu + lam) * xi_t[i]
    A0[d - 1, d - 1] = base
    P2_inv = np.diag([1.0 / mu] * (d - 1) + [1.0 / (2 * mu + lam)])
    comp = np.zeros((2 * d, 2 * d), dtype=complex)
    comp[:d, d:] = np.eye(d)
    comp[d:, :d] = P2_inv @ A0
    comp[d:, d:] = P2_inv @ A1
    return comp


def _boundary_symbol_apply(params: FluidParams, xi_t: np.ndarray,
                           v0: np.ndarray, dv0: np.ndarray) -> np.ndarray:
    """Principal traction operator on a half-line solution at y = 0."""
    mu, lam = params.mu, params.lam
    d = len(xi_t) + 1
    out = np.zeros(d, dtype=complex)
    div = 1j * np.dot(xi_t, v0[: d - 1]) + dv0[d - 1]
    for i in range(d - 1):
        out[i] = mu * (1j * xi_t[i] * v0[d - 1] + dv0[i])
    out[d - 1] = 2 * mu * dv0[d - 1] + lam * div
    return out


def lopatinskii_check(params: FluidParams, rho0_value: float,
                      xi_t: np.ndarray, eta: complex,
                      method: str = "eig") -> float:
    """Normalized |det| of the stable-subspace boundary map.

    Builds the dim-dimensional stable subspace of the half-line companion
    system; eigen-decomposition by default, ordered Schur when the
    eigenbasis is defective (or ``method="schur"``).  A value comfortably
    above zero certifies solvability of the frozen boundary problem at this
    frequency pair.
    """
    xi_t = np.asarray(xi_t, float)
    if eta.real <= 0:
        raise ValueError("need Re eta > 0")
    if np.dot(xi_t, xi_t) == 0.0 and abs(eta) == 0.0:
        raise ValueError("need |xi| + |eta| > 0")
    d = len(xi_t) + 1
    comp = _halfline_companion(params, rho0_value, xi_t, eta)
    basis = None
    if method == "eig":
        vals, vecs = np.linalg.eig(comp)
        stable = vals.real < 0
        if np.count_nonzero(stable) == d:
            cand = vecs[:, stable]
            if np.linalg.matrix_rank(cand, tol=1e-10) == d:
                basis = cand
    if basis is None:
        # repeated eigenvalues: ordered Schur gives the invariant subspace
        T, Z, sdim = scipy.linalg.schur(comp, output="complex",
                                        sort=lambda z: z.real < 0)
        if sdim != d:
            raise RuntimeError(
                f"stable subspace has dimension {sdim}, expected {d}")
        basis = Z[:, :d]
    cols = np.empty((d, d), dtype=complex)
    for k in range(d):
        v0, dv0 = basis[:d, k], basis[d:, k]
        col = _boundary_symbol_apply(params, xi_t, v0, dv0)
        nrm = np.linalg.norm(col)
        cols[:, k] = col / nrm if nrm > 0 else col
    return float(abs(np.linalg.det(cols)))


def halfline_decay_rates(params: FluidParams, rho0_value: float,
                         xi_t: np.ndarray, eta: complex) -> np.ndarray:
    """|Re| of the stable companion eigenvalues (exponential decay rates)."""
    comp = _halfline_companion(params, rho0_value, np.asarray(xi_t, float), eta)
    vals = np.linalg.eigvals(comp)
    return np.sort(np.abs(vals.real[vals.real < 0]))


# ---------------------------------------------------------------------------
# discrete eigenpair of the homogeneous-traction operator
# ---------------------------------------------------------------------------

def traction_eigenpair(op: LameOperator) -> tuple[float, Field]:
    """Smallest nontrivial eigenpair of A with B u = 0 boundary rows.

    Solves the generalized problem (interior rows of A, traction rows of B)
    against the interior-row selector; returns the smallest eigenvalue above
    a rigid-motion cutoff with an L2-normalized real eigenfield.
    """
    n = op.A.shape[0]
    mask = op.boundary_row_mask
    A_dense = op.A.toarray()
    B_dense = op.B.toarray()
    lhs = np.where(mask[:, None], B_dense, A_dense)
    rhs = np.where(mask[:, None], 0.0, np.eye(n))
    vals, vecs = scipy.linalg.eig(lhs, rhs)
    finite = np.isfinite(vals)
    vals, vecs = vals[finite], vecs[:, finite]
    ok = (np.abs(vals.imag) < 1e-8 * (1 + np.abs(vals.real))) & (vals.real > 1e-6)
    vals, vecs = vals.real[ok], vecs[:, ok].real
    k = int(np.argmin(vals))
    lam = float(vals[k])
    field_vals = op.from_flat(vecs[:, k])
    w = op.grid.quad_weights
    nrm = np.sqrt(np.sum(w * np.sum(field_vals**2, axis=-1)))
    return lam, Field(op.grid, field_vals / nrm)
