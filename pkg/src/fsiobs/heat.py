"""Adjoint heat equation with Neumann data, and its Carleman functionals.

The backward problem

    -(rho/nu) dq/dt - Lap q = f1,   dq/dz = f2 on top, 0 on bottom

is solved by Crank-Nicolson in time and, per x-mode, a dense (small) solve
in z.  Neumann conditions enter through second-order mirror ghosts; the
inhomogeneous datum becomes an explicit boundary source of strength
2*f2/dz on the top row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field, Grid, Trajectory
from .params import ModelParams
from .weights import CarlemanParams, WeightEngine


@dataclass(frozen=True)
class HeatProblem:
    q_T: Field
    f1: Trajectory | None
    f2: Trajectory | None
    grid: Grid

    def __post_init__(self):
        if self.f1 is not None and self.f1.is_trace:
            raise ValueError("f1 must be a field trajectory")
        if self.f2 is not None and not self.f2.is_trace:
            raise ValueError("f2 must be a trace trajectory")


def neumann_laplacian(grid: Grid) -> np.ndarray:
    """z-part of the Laplacian with mirror ghosts at both walls."""
    n, h = grid.nz, grid.dz
    D = np.zeros((n, n))
    for j in range(1, n - 1):
        D[j, j - 1] = 1.0 / h**2
        D[j, j] = -2.0 / h**2
        D[j, j + 1] = 1.0 / h**2
    D[0, 0], D[0, 1] = -2.0 / h**2, 2.0 / h**2
    D[-1, -1], D[-1, -2] = -2.0 / h**2, 2.0 / h**2
    return D


def _mode_factors(grid: Grid, params: ModelParams):
    """LU-free cached CN matrices (I -+ dt/2 A_k) per mode for the pure
    Neumann heat operator A_k = (nu/rho)*(Dzz - k^2)."""
    from scipy.linalg import lu_factor

    kappa = params.nu / params.rho_bar
    Dzz = neumann_laplacian(grid)
    dt = grid.dt
    eye = np.eye(grid.nz)
    m0, m1 = [], []
    for k in grid.k:
        A = kappa * (Dzz - k**2 * eye)
        m0.append(lu_factor(eye - 0.5 * dt * A))
        m1.append(eye + 0.5 * dt * A)
    return m0, m1, kappa


def _fft_traj(values: np.ndarray, nx: int) -> np.ndarray:
    return np.fft.rfft(values, axis=1) / nx


def solve_heat_neumann(
    problem: HeatProblem, params: ModelParams, direction: str = "backward"
) -> Trajectory:
    """CN solve of the Neumann heat problem, backward (adjoint form) or
    forward (controlled form, q_T then meaning the initial state)."""
    g = problem.grid
    from scipy.linalg import lu_solve

    m0, m1, kappa = _mode_factors(g, params)
    nt, nm = g.nt, g.n_modes
    dt = g.dt

    f1c = (
        _fft_traj(problem.f1.values, g.nx)
        if problem.f1 is not None
        else np.zeros((nt + 1, nm, g.nz), dtype=complex)
    )
    bc = np.zeros((nt + 1, nm, g.nz), dtype=complex)
    if problem.f2 is not None:
        bc[:, :, -1] = (2.0 / g.dz) * _fft_traj(problem.f2.values, g.nx)

    qc = np.empty((nt + 1, nm, g.nz), dtype=complex)
    if direction == "backward":
        order = range(nt - 1, -1, -1)
        qc[nt] = _fft_traj(problem.q_T.values[None, :, :], g.nx)[0]
    elif direction == "forward":
        order = range(1, nt + 1)
        qc[0] = _fft_traj(problem.q_T.values[None, :, :], g.nx)[0]
    else:
        raise ValueError("direction must be 'backward' or 'forward'")

    for j in order:
        prev = j + 1 if direction == "backward" else j - 1
        src = 0.5 * dt * kappa * (f1c[j] + f1c[prev] + bc[j] + bc[prev])
        for m in range(nm):
            rhs = m1[m] @ qc[prev, m] + src[m]
            qc[j, m] = lu_solve(m0[m], rhs)

    vals = np.fft.irfft(qc * g.nx, n=g.nx, axis=1)
    return Trajectory(vals, g)


def grad_traj(values: np.ndarray, grid: Grid):
    """(d_x, d_z) of a (nt+1, nx, nz) trajectory array."""
    c = np.fft.rfft(values, axis=1) / grid.nx
    dx = np.fft.irfft(c * (1j * grid.k)[None, :, None] * grid.nx, n=grid.nx, axis=1)
    dz = values @ grid.dz1_matrix().T
    return dx, dz


def _weight_fields(engine: WeightEngine, grid: Grid, s: float):
    x = grid.x[None, :]
    t = grid.t[:, None]
    vals = engine.evaluate(x, t)
    with np.errstate(over="ignore", under="ignore"):
        w = np.exp(-2.0 * s * np.where(np.isfinite(vals["phi"]), vals["phi"], np.inf))
    xi = np.where(np.isfinite(vals["xi"]), vals["xi"], 1.0)
    return w, xi


def heat_carleman_functionals(
    traj: Trajectory,
    engine: WeightEngine,
    cp: CarlemanParams,
    f1: Trajectory | None = None,
    f2: Trajectory | None = None,
    mode: str = "standard",
) -> dict:
    """Weighted integrals of the heat inequality, standard or low-power form.

    standard:  s*lam^2 xi |grad q|^2, s^3 lam^4 xi^3 |q|^2 interior,
               s^2 lam^3 xi^2 |q|^2 on the top wall, against |f1|^2,
               s*lam xi |f2|^2 and the omega observation.
    lowpower:  the family with inverse powers of xi on the left and
               1/(s^2 lam^2), 1/(s lam) factors on the right.
    """
    g = traj.grid
    s, lam = cp.s, cp.lam
    w, xi = _weight_fields(engine, g, s)
    wt = np.full(g.nt + 1, g.dt)
    wt[0] = wt[-1] = 0.0
    wz = g.wz()
    q = traj.values
    dqx, dqz = grad_traj(q, g)
    grad2 = dqx**2 + dqz**2
    mask = g.omega_mask_x()[None, :]

    def vol(density):  # density shaped (nt+1, nx, nz); weights depend on (t, x)
        return float(np.sum(wt[:, None, None] * g.dx * wz[None, None, :] * density))

    def wall(density):  # density shaped (nt+1, nx) on the top wall
        return float(np.sum(wt[:, None] * g.dx * density))

    W3 = (w * xi)[:, :, None]
    if mode == "standard":
        out = {
            "lhs_grad": s * lam**2 * vol(W3 * grad2),
            "lhs_field": s**3 * lam**4 * vol((w * xi**3)[:, :, None] * q**2),
            "lhs_boundary": s**2 * lam**3 * wall(w * xi**2 * q[:, :, -1] ** 2),
            "rhs_f1": vol(w[:, :, None] * (f1.values**2 if f1 is not None else 0.0 * q)),
            "rhs_f2": s * lam * wall(w * xi * (f2.values**2 if f2 is not None else 0.0 * q[:, :, -1])),
            "rhs_obs": s**3 * lam**4 * vol((w * xi**3 * mask)[:, :, None] * q**2),
        }
    elif mode == "lowpower":
        out = {
            "lhs_grad": vol((w / (s * xi))[:, :, None] * grad2),
            "lhs_field": s * lam**2 * vol(W3 * q**2),
            "lhs_boundary": lam * wall(w * q[:, :, -1] ** 2),
            "rhs_f1": vol((w / (s**2 * lam**2 * xi**2))[:, :, None] * (f1.values**2 if f1 is not None else 0.0 * q)),
            "rhs_f2": wall(w / (s * lam * xi) * (f2.values**2 if f2 is not None else 0.0 * q[:, :, -1])),
            "rhs_obs": s * lam**2 * vol((w * xi * mask)[:, :, None] * q**2),
        }
    else:
        raise ValueError("mode must be 'standard' or 'lowpower'")
    lhs = out["lhs_grad"] + out["lhs_field"] + out["lhs_boundary"]
    rhs = out["rhs_f1"] + out["rhs_f2"] + out["rhs_obs"]
    out["quotient"] = lhs / rhs if rhs > 0 else np.nan
    return out
