"""Adjoint damped Euler-Bernoulli beam on the top wall.

Per Fourier mode k the equation

    psi_tt - k^2 psi_t + k^4 psi = f_k

is integrated backward in time by the exact 2x2 matrix exponential of the
companion matrix; the characteristic roots are k^2 (1 +- i sqrt(3))/2, so
the forward problem is unstable and the backward one dissipative.  The
exact step removes any stiffness concern from the k^4 term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .grid import Grid, Trace, Trajectory, fourier_x, inverse_fourier_x
from .weights import CarlemanParams, WeightEngine


@dataclass(frozen=True)
class BeamState:
    psi: Trace
    psi_t: Trace


@dataclass(frozen=True)
class BeamTrajectory:
    """Backward beam solution with the source kept for functional evaluation."""

    psi: Trajectory
    psi_t: Trajectory
    source: Trajectory

    @property
    def grid(self) -> Grid:
        return self.psi.grid


def companion_matrix(k: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [-(k**4), k**2]])


def backward_step_matrices(grid: Grid, dt: float | None = None):
    """E_k = expm(-B_k dt) and Phi_k = int_0^dt expm(-B_k s) ds per mode.

    Phi comes from the augmented exponential expm([[-B, I], [0, 0]] dt),
    whose upper-right block is the integral; exact also for the nilpotent
    k = 0 block.
    """
    dt = grid.dt if dt is None else dt
    n = grid.n_modes
    E = np.empty((n, 2, 2))
    Phi = np.empty((n, 2, 2))
    for m, k in enumerate(grid.k):
        B = companion_matrix(k)
        aug = np.zeros((4, 4))
        aug[:2, :2] = -B
        aug[:2, 2:] = np.eye(2)
        M = expm(aug * dt)
        E[m] = M[:2, :2]
        Phi[m] = M[:2, 2:]
    return E, Phi


def solve_beam_adjoint(
    psi_T: Trace, psi1_T: Trace, f_psi: Trajectory, grid: Grid
) -> BeamTrajectory:
    """Integrate the adjoint beam backward from (psi_T, psi1_T).

    The source trajectory is sampled at the time nodes and treated with the
    trapezoid rule inside the exact per-step propagator.
    """
    if f_psi.grid is not grid and f_psi.grid != grid:
        raise ValueError("source grid does not match")
    if not f_psi.is_trace:
        raise ValueError("beam source must be a trace trajectory")
    E, _ = backward_step_matrices(grid)
    nt, n = grid.nt, grid.n_modes
    dt = grid.dt

    fc = np.stack([fourier_x(f_psi.values[j]) for j in range(nt + 1)])
    u = np.empty((nt + 1, n, 2), dtype=complex)
    u[nt, :, 0] = fourier_x(psi_T.values)
    u[nt, :, 1] = fourier_x(psi1_T.values)
    src = np.zeros((n, 2), dtype=complex)
    for j in range(nt - 1, -1, -1):
        src[:, 1] = fc[j + 1]
        step = np.einsum("mab,mb->ma", E, u[j + 1] + 0.5 * dt * src)
        src[:, 1] = fc[j]
        u[j] = step - 0.5 * dt * src

    psi = np.stack([inverse_fourier_x(u[j, :, 0], grid.nx) for j in range(nt + 1)])
    psi_t = np.stack([inverse_fourier_x(u[j, :, 1], grid.nx) for j in range(nt + 1)])
    return BeamTrajectory(
        psi=Trajectory(psi, grid),
        psi_t=Trajectory(psi_t, grid),
        source=f_psi,
    )


def single_mode_exact(k: float, psi_k: complex, psi1_k: complex, t: np.ndarray, T: float):
    """Closed-form sourceless mode solution from the characteristic roots.

    Independent of the propagator path: expands the terminal data in the
    eigenbasis of r^2 - k^2 r + k^4 = 0.
    """
    if k == 0.0:
        return psi_k + (t - T) * psi1_k, np.full_like(t, psi1_k, dtype=complex)
    rp = k**2 * (1 + 1j * np.sqrt(3.0)) / 2
    rm = k**2 * (1 - 1j * np.sqrt(3.0)) / 2
    # psi = a e^{rp (t-T)} + b e^{rm (t-T)} with terminal value/velocity data
    b = (psi1_k - rp * psi_k) / (rm - rp)
    a = psi_k - b
    tau = t - T
    psi = a * np.exp(rp * tau) + b * np.exp(rm * tau)
    dpsi = a * rp * np.exp(rp * tau) + b * rm * np.exp(rm * tau)
    return psi, dpsi


def _interior_time_weights(grid: Grid) -> np.ndarray:
    # endpoint cells dropped: the weight exp(-2 s phi) vanishes at t = 0, T
    w = np.full(grid.nt + 1, grid.dt)
    w[0] = w[-1] = 0.0
    return w


def _x_derivs_traj(values: np.ndarray, grid: Grid, max_order: int):
    """Spectral x-derivatives of a (nt+1, nx) trace trajectory."""
    c = np.fft.rfft(values, axis=1) / grid.nx
    out = [values]
    for order in range(1, max_order + 1):
        cc = c * ((1j * grid.k) ** order)[None, :]
        out.append(np.fft.irfft(cc * grid.nx, n=grid.nx, axis=1))
    return out


def beam_carleman_functionals(
    traj: BeamTrajectory, engine: WeightEngine, cp: CarlemanParams
) -> dict:
    """Both sides of the weighted beam inequality.

    lhs collects the five graded blocks (psi through fourth derivatives),
    rhs_interior the weighted source, rhs_obs the observation block over
    omega_1 x (0,T).  All integrands carry exp(-2 s phi) and the endpoint
    time cells are dropped.
    """
    g = traj.grid
    s, lam = cp.s, cp.lam
    psi = traj.psi.values
    psi_t = traj.psi_t.values
    f = traj.source.values

    dpsi = _x_derivs_traj(psi, g, 4)
    dpsi_t = _x_derivs_traj(psi_t, g, 2)
    # psi_tt from the equation: psi_tt = -psi_txx - psi_xxxx + f
    psi_tt = -dpsi_t[2] - dpsi[4] + f

    x = g.x[None, :]
    t = g.t[:, None]
    vals = engine.evaluate(x, t)
    with np.errstate(over="ignore", under="ignore"):
        w = np.exp(-2.0 * s * np.where(np.isfinite(vals["phi"]), vals["phi"], np.inf))
    xi = np.where(np.isfinite(vals["xi"]), vals["xi"], 1.0)
    wt = _interior_time_weights(g)[:, None]
    mask1 = g.omega_mask_x()[None, :]

    def integ(density):
        return float(np.sum(wt * g.dx * density))

    lhs = (
        s**7 * lam**8 * integ(xi**7 * psi**2 * w)
        + s**5 * lam**6 * integ(xi**5 * dpsi[1] ** 2 * w)
        + s**3 * lam**4 * integ(xi**3 * (dpsi[2] ** 2 + psi_t**2) * w)
        + s * lam**2 * integ(xi * (dpsi_t[1] ** 2 + dpsi[3] ** 2) * w)
        + (1.0 / s) * integ((psi_tt**2 + dpsi_t[2] ** 2 + dpsi[4] ** 2) * w / xi)
    )
    rhs_interior = integ(f**2 * w)
    rhs_obs = s**7 * lam**8 * integ(xi**7 * psi**2 * w * mask1)
    rhs = rhs_interior + rhs_obs
    return {
        "lhs": lhs,
        "rhs_interior": rhs_interior,
        "rhs_obs": rhs_obs,
        "quotient": lhs / rhs if rhs > 0 else np.nan,
    }
