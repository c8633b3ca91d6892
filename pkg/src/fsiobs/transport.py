"""Adjoint transport equation: exact modal solver, gluing control,
weighted observability functionals.

The advection u1 d_x is diagonal per x-mode (multiplier i k u1), so each
mode is integrated exactly by a phase shift combined with the exact
integrating factor of the reaction term; only the source quadrature is
approximate (trapezoid).  z rides along as a passive parameter.

The controlled two-endpoint trajectory is glued from the forward solution
(zero initial datum) and backward solution (zero terminal datum) through a
cutoff that measures occupation time: along the characteristic labeled
y = x - u1 t, the cutoff is the fraction of control-region time already
spent,

    chi(x, t) = int_0^t g(y + u1 s) ds / int_0^T g(y + u1 s) ds,

with g a fixed smoothstep window supported strictly inside the control
arc.  chi is smooth and periodic, vanishes at t=0, equals 1 at t=T, and
its material derivative g(x)/I(y) is supported exactly where g is.  The
denominator is positive for every label because the horizon exceeds the
channel transit time and the extension length leaves room on both sides;
a label can hide in the channel for at most d/u1 < T time units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field, Grid, Trajectory
from .params import ModelParams
from .weights import CarlemanParams, WeightEngine, _Ramp, _Window


@dataclass(frozen=True)
class TransportProblem:
    """reaction is P'(rho)/nu in the standalone form and P'(rho)*rho/nu in
    the coupled reformulation; both are supported."""

    sigma_T: Field
    f4: Trajectory | None
    reaction: float
    grid: Grid


def _fft(values, nx):
    return np.fft.rfft(values, axis=-2) / nx


def _ifft(coeffs, nx):
    return np.fft.irfft(coeffs * nx, n=nx, axis=-2)


def solve_transport(problem: TransportProblem, params: ModelParams) -> Trajectory:
    """Backward solve of -d_t sigma - u1 d_x sigma + r sigma = f4."""
    g = problem.grid
    r = problem.reaction
    alpha = r - 1j * params.u_bar1 * g.k  # d_t sigma_k = alpha sigma_k - f_k
    decay = np.exp(-alpha * g.dt)[:, None]
    fc = (
        _fft(problem.f4.values, g.nx)
        if problem.f4 is not None
        else np.zeros((g.nt + 1, g.n_modes, g.nz), dtype=complex)
    )
    sc = np.empty((g.nt + 1, g.n_modes, g.nz), dtype=complex)
    sc[g.nt] = _fft(problem.sigma_T.values, g.nx)
    half = 0.5 * g.dt
    for n in range(g.nt - 1, -1, -1):
        sc[n] = decay * sc[n + 1] + half * (fc[n] + decay * fc[n + 1])
    return Trajectory(_ifft(sc, g.nx), g)


def solve_transport_forward(
    initial: Field, f4: Trajectory | None, reaction: float, grid: Grid, params: ModelParams
) -> Trajectory:
    """Forward solve of d_t sigma + u1 d_x sigma + r sigma = f4."""
    g = grid
    beta = reaction + 1j * params.u_bar1 * g.k
    decay = np.exp(-beta * g.dt)[:, None]
    fc = (
        _fft(f4.values, g.nx)
        if f4 is not None
        else np.zeros((g.nt + 1, g.n_modes, g.nz), dtype=complex)
    )
    sc = np.empty((g.nt + 1, g.n_modes, g.nz), dtype=complex)
    sc[0] = _fft(initial.values, g.nx)
    half = 0.5 * g.dt
    for n in range(g.nt):
        sc[n + 1] = decay * sc[n] + half * (decay * fc[n] + fc[n + 1])
    return Trajectory(_ifft(sc, g.nx), g)


def characteristics_solution(
    sigma_T: Field, reaction: float, grid: Grid, params: ModelParams
) -> Trajectory:
    """Closed-form sourceless solution sigma(x,z,t) =
    exp(-r (T-t)) sigma_T(x + u1 (T-t), z), via exact spectral shift."""
    g = grid
    sc_T = _fft(sigma_T.values, g.nx)
    out = np.empty((g.nt + 1, g.nx, g.nz))
    for n, t in enumerate(g.t):
        tau = params.T - t
        shift = np.exp(1j * g.k * params.u_bar1 * tau)[:, None]
        out[n] = _ifft(np.exp(-reaction * tau) * shift * sc_T, g.nx)
    return Trajectory(out, g)


# --- gluing control ----------------------------------------------------------


class GlueCutoff:
    """Occupation-time cutoff for the forward/backward gluing."""

    def __init__(self, grid: Grid, params: ModelParams):
        self.grid = grid
        self.params = params
        p = params
        P = p.torus_len
        arc = 2.0 * p.L  # control arc length in the coordinate u = (x-d) mod P
        slack = p.u_bar1 * p.T - p.d
        edge = slack / 8.0
        ramp = min(slack / 8.0, arc / 8.0)
        self.window = _Window(edge, edge + ramp, arc - edge - ramp, arc - edge, _Ramp(3))
        self.P = P
        # cumulative integral of g over one period of the arc coordinate
        self._grid_u = None

    def g_of_x(self, x):
        u = np.mod(np.asarray(x, dtype=float) - self.params.d, self.P)
        return self.window.value(u)

    def _cum(self, u):
        """Antiderivative of g in the unwrapped arc coordinate."""
        wraps = np.floor(u / self.P)
        frac = u - wraps * self.P
        return wraps * self.window.total + self.window.cumulative(frac)

    def occupation(self, y, t):
        """int_0^t g(y + u1 s) ds, exact from the window antiderivative."""
        u1 = self.params.u_bar1
        a = np.mod(np.asarray(y, dtype=float) - self.params.d, self.P)
        return (self._cum(a + u1 * np.asarray(t)) - self._cum(a)) / u1

    def chi(self, x, t):
        y = np.asarray(x) - self.params.u_bar1 * np.asarray(t)
        total = self.occupation(y, self.params.T)
        if np.any(total <= 0):
            raise RuntimeError(
                "cutoff transition escapes the control region: some "
                "characteristic never meets the window (geometry violated)"
            )
        return self.occupation(y, t) / total

    def material_derivative(self, x, t):
        y = np.asarray(x) - self.params.u_bar1 * np.asarray(t)
        total = self.occupation(y, self.params.T)
        return self.g_of_x(x) / total


def transport_glue_control(
    f4_tilde: Trajectory, params: ModelParams, grid: Grid, reaction: float | None = None
) -> tuple[Trajectory, Trajectory]:
    """Controlled trajectory with zero data at both endpoints.

    Solves the forward problem from zero and the backward problem to zero,
    then glues sigma = sigma_f + chi*(sigma_b - sigma_f).  The difference
    satisfies the homogeneous equation, so the control is exactly
    (sigma_b - sigma_f) times the analytic material derivative of chi and
    is supported where the cutoff window is.
    """
    r = params.P_prime / params.nu if reaction is None else reaction
    g = grid
    zero = Field(np.zeros((g.nx, g.nz)), g)
    sig_f = solve_transport_forward(zero, f4_tilde, r, g, params)
    back = solve_transport(TransportProblem(zero, f4_tilde, r, g), params)
    cutoff = GlueCutoff(g, params)
    x = g.x[None, :, None]
    t = g.t[:, None, None]
    chi = cutoff.chi(x, t)
    lchi = cutoff.material_derivative(x, t)
    diff = back.values - sig_f.values
    sigma = Trajectory(sig_f.values + chi * diff, g)
    control = Trajectory(diff * lchi, g)
    return sigma, control


def glue_support_audit(control: Trajectory) -> dict:
    g = control.grid
    mask = g.omega_mask()[None, :, :]
    peak = float(np.max(np.abs(control.values)))
    outside = float(np.max(np.abs(control.values * (~mask))))
    return {"max": peak, "max_outside_omega": outside,
            "outside_over_max": outside / peak if peak > 0 else 0.0}


# --- weighted functionals -----------------------------------------------------


def transport_obs_functionals(
    traj: Trajectory,
    problem: TransportProblem,
    engine: WeightEngine,
    cp: CarlemanParams,
    params: ModelParams,
) -> dict:
    """Named weighted integrals of the transport observability estimates.

    Interior, gradient and time-derivative blocks with weight
    xi^{-1} exp(-2 s phi), their omega-localized companions, the source
    blocks, and the two L-infinity-in-time quantities with xi^{-3}.
    """
    g = traj.grid
    s, lam = cp.s, cp.lam
    x = g.x[None, :]
    vals = engine.evaluate(x, g.t[:, None])
    with np.errstate(over="ignore", under="ignore"):
        w = np.exp(-2.0 * s * np.where(np.isfinite(vals["phi"]), vals["phi"], np.inf))
    xi = np.where(np.isfinite(vals["xi"]), vals["xi"], 1.0)
    wt = np.full(g.nt + 1, g.dt)
    wt[0] = wt[-1] = 0.0
    wz = g.wz()
    maskx = g.omega_mask_x()[None, :]

    sig = traj.values
    c = _fft(sig, g.nx)
    dx = _ifft(c * (1j * g.k)[None, :, None], g.nx)
    dz = sig @ g.dz1_matrix().T
    f4 = problem.f4.values if problem.f4 is not None else np.zeros_like(sig)
    dt_sig = -params.u_bar1 * dx + problem.reaction * sig - f4
    cf = _fft(f4, g.nx)
    f4x = _ifft(cf * (1j * g.k)[None, :, None], g.nx)
    f4z = f4 @ g.dz1_matrix().T

    def vol(dens2d_weight, dens, mask=None):
        wgt = dens2d_weight if mask is None else dens2d_weight * mask
        return float(np.sum(wt[:, None, None] * g.dx * wz[None, None, :] * wgt[:, :, None] * dens))

    wx = w / xi
    out = {
        "sigma": vol(wx, sig**2),
        "grad_sigma": vol(wx, dx**2 + dz**2),
        "dt_sigma": vol(wx, dt_sig**2),
        "sigma_omega": vol(wx, sig**2, maskx),
        "grad_sigma_omega": vol(wx, dx**2 + dz**2, maskx),
        "f4": vol(wx, f4**2),
        "grad_f4": vol(wx, f4x**2 + f4z**2),
    }
    # L-infinity-in-time blocks with weight xi^{-3}
    w3 = w / xi**3
    slab = np.sum(g.dx * wz[None, None, :] * w3[:, :, None] * sig**2, axis=(1, 2))
    slab_g = np.sum(
        g.dx * wz[None, None, :] * w3[:, :, None] * (dx**2 + dz**2), axis=(1, 2)
    )
    out["sigma_linf"] = float(np.max(slab[1:-1]))
    out["grad_sigma_linf"] = float(np.max(slab_g[1:-1]))

    out["quotient_interior"] = out["sigma"] / max(out["f4"] + out["sigma_omega"], 1e-300)
    out["quotient_gradient"] = out["grad_sigma"] / max(
        out["grad_f4"] + out["grad_sigma_omega"], 1e-300
    )
    out["quotient_dt"] = out["dt_sigma"] / max(
        out["grad_f4"] + out["f4"] + out["sigma_omega"] + out["grad_sigma_omega"], 1e-300
    )
    out["quotient_linf"] = out["sigma_linf"] / max(
        out["f4"] + s * lam * out["sigma_omega"], 1e-300
    )
    out["quotient_grad_linf"] = out["grad_sigma_linf"] / max(
        out["grad_f4"] + s * lam * out["grad_sigma_omega"], 1e-300
    )
    return out
