"""Weighted-functional control construction for the Neumann heat equation.

The quadratic functional

    J(v) = 1/2 ||(-(rho/nu) d_t - Lap) v||_w^2
         + (s^3 lam^4 / 2) || xi^{3/2} v ||_{w, omega}^2  -  (G, v)

is minimized over discrete fields v living on the half-levels
t_{n+1/2}; the operator inside the first norm is evaluated at the interior
whole levels by the centered difference/average pair

    (P v)^n = -(rho/nu) (v^{n+1/2} - v^{n-1/2})/dt
              - Lap (v^{n+1/2} + v^{n-1/2}) / 2 .

P is, by summation by parts, the exact transpose of the forward
Crank-Nicolson march with zero initial state -- including the implicit
terminal condition.  Consequently the minimizer's Euler-Lagrange system
*is* the forward scheme driven by G + H with H the weighted multiple of
the minimizer, ending identically at zero.  The controllability check
re-runs that forward march through an independent code path; its terminal
value measures only the linear-solver residual.

All weighted integrals that formally carry exp(+2s phi) are evaluated in
cancelled form (the minimizer always appears multiplied by exp(-2s phi)),
so no overflow can occur.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .grid import Grid, Trajectory
from .heat import neumann_laplacian
from .params import ModelParams
from .weights import CarlemanParams, WeightEngine


def _lap_apply(v: np.ndarray, grid: Grid, Dzz: np.ndarray, transpose: bool = False):
    """Neumann Laplacian (spectral x, mirror-ghost z) of (..., nx, nz)."""
    c = np.fft.rfft(v, axis=-2) / grid.nx
    c *= -(grid.k**2)[:, None]
    out = np.fft.irfft(c * grid.nx, n=grid.nx, axis=-2)
    D = Dzz.T if transpose else Dzz
    return out + v @ D.T


@dataclass
class HumSolution:
    Y: Trajectory
    H_half: np.ndarray
    theta_min: np.ndarray
    t_half: np.ndarray
    cg_residual_history: list
    J_min: float
    converged: bool

    @property
    def grid(self) -> Grid:
        return self.Y.grid


class HumProblem:
    """Discrete minimization data: weights, masks and quadrature factors."""

    def __init__(self, grid: Grid, params: ModelParams, engine: WeightEngine, cp: CarlemanParams):
        self.grid = grid
        self.params = params
        self.engine = engine
        self.cp = cp
        g = grid
        self.c = params.rho_bar / params.nu
        self.Dzz = neumann_laplacian(g)
        self.t_half = (np.arange(g.nt) + 0.5) * g.dt
        x = g.x[None, :]
        vals_int = engine.evaluate(x, g.t[1:-1, None])
        vals_half = engine.evaluate(x, self.t_half[:, None])
        s = cp.s
        with np.errstate(over="ignore", under="ignore"):
            self.W_int = np.exp(-2.0 * s * vals_int["phi"])  # (nt-1, nx)
            self.w_half = np.exp(-2.0 * s * vals_half["phi"])  # (nt, nx)
        self.xi_int = vals_int["xi"]
        self.xi_half = vals_half["xi"]
        self.mask = g.omega_mask()  # (nx, nz)
        self.wz = g.wz()
        self.quad = g.dt * g.dx * self.wz[None, None, :]
        self.mass_half = (
            cp.s**3 * cp.lam**4 * (self.xi_half**3 * self.w_half)[:, :, None] * self.mask
        )

    # --- the P operator and its transpose ---

    def apply_P(self, v: np.ndarray) -> np.ndarray:
        g = self.grid
        lap = _lap_apply(v, g, self.Dzz)
        dt = g.dt
        return (
            -self.c * (v[1:] - v[:-1]) / dt - 0.5 * (lap[1:] + lap[:-1])
        )

    def apply_PT(self, r: np.ndarray) -> np.ndarray:
        g = self.grid
        dt = g.dt
        lapT = _lap_apply(r, g, self.Dzz, transpose=True)
        out = np.zeros((g.nt, g.nx, g.nz))
        out[1:] += -self.c / dt * r - 0.5 * lapT
        out[:-1] += self.c / dt * r - 0.5 * lapT
        return out

    def apply_A(self, v: np.ndarray) -> np.ndarray:
        Pv = self.apply_P(v)
        weighted = self.quad * self.W_int[:, :, None] * Pv
        return self.apply_PT(weighted) + self.quad * self.mass_half * v

    def rhs(self, G_half: np.ndarray) -> np.ndarray:
        return self.quad * G_half

    def jacobi_diagonal(self) -> np.ndarray:
        """Approximate diagonal of A for preconditioning.

        Captures the dominant (t, x) variation coming from the Carleman
        weight; the spatial-operator contribution uses the x-mean symbol.
        """
        g = self.grid
        c0 = float(np.sum(-(g.k**2) * g.mode_mult()) / g.nx)
        op2 = (self.c / g.dt) ** 2 + 0.25 * (c0 + np.diag(self.Dzz))[None, None, :] ** 2
        d = np.zeros((g.nt, g.nx, g.nz))
        Wq = self.W_int[:, :, None] * self.quad
        d[1:] += Wq * op2
        d[:-1] += Wq * op2
        d += self.quad * self.mass_half
        floor = 1e-30 * d.max() if d.max() > 0 else 1.0
        return np.maximum(d, floor)


def _pcg(apply_A, b, diag, tol, max_iter):
    x = np.zeros_like(b)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = float(np.sum(r * z))
    b_norm = float(np.linalg.norm(b))
    history = []
    if b_norm == 0.0:
        return x, history, True
    for _ in range(max_iter):
        Ap = apply_A(p)
        alpha = rz / float(np.sum(p * Ap))
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / b_norm
        history.append(rel)
        if rel < tol:
            return x, history, True
        z = r / diag
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, history, False


def forward_controlled_march(
    src_half: np.ndarray, grid: Grid, params: ModelParams
) -> Trajectory:
    """Forward CN march of (rho/nu) dY/dt - Lap Y = src with Y(0) = 0.

    The source is given at the half-levels and used per step unaveraged;
    this is the code path the minimizer's control is verified against.
    """
    g = grid
    c = params.rho_bar / params.nu
    Dzz = neumann_laplacian(g)
    dt = g.dt
    eye = np.eye(g.nz)
    lus, m1 = [], []
    for k in g.k:
        A = Dzz - k**2 * eye
        lus.append(lu_factor(c / dt * eye - 0.5 * A))
        m1.append(c / dt * eye + 0.5 * A)
    src_c = np.fft.rfft(src_half, axis=1) / g.nx
    Yc = np.zeros((g.nt + 1, g.n_modes, g.nz), dtype=complex)
    for n in range(g.nt):
        for m in range(g.n_modes):
            Yc[n + 1, m] = lu_solve(lus[m], m1[m] @ Yc[n, m] + src_c[n, m])
    return Trajectory(np.fft.irfft(Yc * g.nx, n=g.nx, axis=1), g)


def hum_minimize(
    grid: Grid,
    params: ModelParams,
    engine: WeightEngine,
    cp: CarlemanParams,
    G_half: np.ndarray | None = None,
    g_core: tuple | None = None,
    cg_tol: float = 1e-8,
    max_iter: int = 500,
) -> HumSolution:
    """Minimize J, return the controlled state and control.

    The source may be given raw (G_half, at half-levels) or in the
    cancelled form g_core = (p, core_half) meaning G = xi^p * core *
    exp(-2 s phi), which keeps every weighted quantity representable.
    """
    prob = HumProblem(grid, params, engine, cp)
    if g_core is not None:
        p, core = g_core
        G_half = prob.xi_half[:, :, None] ** p * core * prob.w_half[:, :, None]
    if G_half is None:
        raise ValueError("provide G_half or g_core")

    b = prob.rhs(G_half)
    theta_min, history, converged = _pcg(
        prob.apply_A, b, prob.jacobi_diagonal(), cg_tol, max_iter
    )

    P_theta = prob.apply_P(theta_min)
    Y_vals = np.zeros((grid.nt + 1, grid.nx, grid.nz))
    Y_vals[1:-1] = prob.W_int[:, :, None] * P_theta
    H_half = -prob.mass_half * theta_min

    quad = prob.quad
    J_min = float(
        0.5 * np.sum(quad * prob.W_int[:, :, None] * P_theta**2)
        + 0.5 * np.sum(quad * prob.mass_half * theta_min**2)
        - np.sum(quad * G_half * theta_min)
    )
    return HumSolution(
        Y=Trajectory(Y_vals, grid),
        H_half=H_half,
        theta_min=theta_min,
        t_half=prob.t_half,
        cg_residual_history=history,
        J_min=J_min,
        converged=converged,
    )


def controllability_residual(
    sol: HumSolution, grid: Grid, params: ModelParams,
    G_half: np.ndarray | None = None, g_core: tuple | None = None,
    engine: WeightEngine | None = None, cp: CarlemanParams | None = None,
) -> dict:
    """Forward-solve the controlled equation and measure ||Y(T)||.

    Returns the terminal L2 norm relative to the space-time L2 norm of the
    marched state, plus the mismatch against the variational Y.
    """
    if g_core is not None:
        prob = HumProblem(grid, params, engine, cp)
        p, core = g_core
        G_half = prob.xi_half[:, :, None] ** p * core * prob.w_half[:, :, None]
    Y = forward_controlled_march(G_half + sol.H_half, grid, params)
    wz = grid.wz()
    l2 = lambda f: float(np.sqrt(grid.dx * np.sum(f**2 @ wz)))
    sq = np.array([l2(Y.values[n]) ** 2 for n in range(grid.nt + 1)])
    st = float(np.sqrt(np.trapz(sq, dx=grid.dt)))
    mismatch = float(
        np.max(np.abs(Y.values - sol.Y.values)) / max(np.max(np.abs(sol.Y.values)), 1e-300)
    )
    return {
        "terminal_l2": l2(Y.values[-1]),
        "spacetime_l2": st,
        "ratio": l2(Y.values[-1]) / st if st > 0 else np.nan,
        "forward_vs_variational": mismatch,
    }


def weighted_estimate_quotient(
    sol: HumSolution, grid: Grid, params: ModelParams, engine: WeightEngine,
    cp: CarlemanParams, g_core: tuple,
) -> dict:
    """Evaluate the weighted bound on (Y, H) against the weighted source.

    Every exp(+2s phi) is cancelled against the exp(-2s phi) factors baked
    into Y, H and G before anything is exponentiated.
    """
    prob = HumProblem(grid, params, engine, cp)
    s, lam = cp.s, cp.lam
    quad = prob.quad
    P_theta = prob.apply_P(sol.theta_min)
    W = prob.W_int[:, :, None]
    xi_i = prob.xi_int[:, :, None]

    # |Y|^2 e^{2s phi} = W |P theta|^2 ; similar cancellations below
    lhs_field = s**3 * lam**4 * float(np.sum(quad * W * P_theta**2))

    x = grid.x[None, :]
    vals_int = engine.evaluate(x, grid.t[1:-1, None])
    phi_x = vals_int["phi_x"][:, :, None]
    c = np.fft.rfft(P_theta, axis=1) / grid.nx
    dPx = np.fft.irfft(c * (1j * grid.k)[None, :, None] * grid.nx, n=grid.nx, axis=1)
    dPz = P_theta @ grid.dz1_matrix().T
    grad_sq = (dPx - 2 * cp.s * phi_x * P_theta) ** 2 + dPz**2
    lhs_grad = s * lam**2 * float(np.sum(quad * W / xi_i**2 * grad_sq))

    lhs_wall = s**2 * lam**3 * float(
        np.sum(grid.dt * grid.dx * prob.W_int / prob.xi_int * P_theta[:, :, -1] ** 2)
    )
    lhs_ctrl = s**6 * lam**8 * float(
        np.sum(quad * (prob.xi_half**3 * prob.w_half)[:, :, None] * prob.mask * sol.theta_min**2)
    )
    p, core = g_core
    rhs = float(
        np.sum(quad * (prob.xi_half ** (2 * p - 3) * prob.w_half)[:, :, None] * core**2)
    )
    lhs = lhs_field + lhs_grad + lhs_wall + lhs_ctrl
    return {
        "lhs_field": lhs_field,
        "lhs_grad": lhs_grad,
        "lhs_wall": lhs_wall,
        "lhs_control": lhs_ctrl,
        "rhs_source": rhs,
        "quotient": lhs / rhs if rhs > 0 else np.nan,
    }
