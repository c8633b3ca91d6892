"""Sobolev-type norms on the discrete channel.

L2 uses exact x-quadrature (uniform nodes over one period) and trapezoid
quadrature in z.  H^k adds all mixed derivatives up to total order k, with
spectral x-derivatives and repeated first-order FD matrices in z.
Space-time variants integrate snapshot norms with the trapezoid rule and,
for H^1 in time, add a centered FD time derivative.

Fractional time regularity (used only in diagnostic reports) is measured
through a Fourier-symbol proxy on the uniform time grid; this is an
artifact convention, not a claim about the continuous interpolation space.
"""

from __future__ import annotations

import numpy as np

from .grid import Field, Grid, Trace, Trajectory, fourier_x, inverse_fourier_x

_SPACES = ("L2", "H1", "H2", "H3")


def _x_deriv(values: np.ndarray, grid: Grid, order: int) -> np.ndarray:
    if order == 0:
        return values
    c = np.fft.rfft(values, axis=0) / grid.nx
    c *= (1j * grid.k.reshape((-1,) + (1,) * (values.ndim - 1))) ** order
    return inverse_fourier_x(c, grid.nx)


def _z_deriv(values: np.ndarray, grid: Grid, order: int) -> np.ndarray:
    D = grid.dz1_matrix()
    out = values
    for _ in range(order):
        out = out @ D.T
    return out


def _l2_sq_field(values: np.ndarray, grid: Grid, mask=None) -> float:
    w = grid.wz()
    v2 = values**2
    if mask is not None:
        v2 = v2 * mask
    return float(grid.dx * np.sum(v2 @ w))


def _l2_sq_trace(values: np.ndarray, grid: Grid, mask=None) -> float:
    v2 = values**2
    if mask is not None:
        v2 = v2 * mask
    return float(grid.dx * np.sum(v2))


def sobolev_sq_field(values: np.ndarray, grid: Grid, k: int, mask=None) -> float:
    total = 0.0
    for ax in range(k + 1):
        for az in range(k + 1 - ax):
            d = _z_deriv(_x_deriv(values, grid, ax), grid, az)
            total += _l2_sq_field(d, grid, mask)
    return total


def sobolev_sq_trace(values: np.ndarray, grid: Grid, k: int, mask=None) -> float:
    total = 0.0
    for ax in range(k + 1):
        total += _l2_sq_trace(_x_deriv(values, grid, ax), grid, mask)
    return total


def _space_index(space: str) -> int:
    if space not in _SPACES:
        raise ValueError(f"space must be one of {_SPACES}")
    return _SPACES.index(space)


def norm(obj, space: str = "L2", time: str = "in-space", mask=None) -> float:
    """Norm of a Field, Trace or Trajectory.

    space: L2, H1, H2 or H3 (in the spatial variables).
    time:  'in-space' for single snapshots, 'space-time' to integrate a
           trajectory's squared snapshot norms over (0, T).
    mask:  optional indicator array restricting the quadrature region.
    """
    k = _space_index(space)
    if isinstance(obj, Field):
        return float(np.sqrt(sobolev_sq_field(obj.values, obj.grid, k, mask)))
    if isinstance(obj, Trace):
        return float(np.sqrt(sobolev_sq_trace(obj.values, obj.grid, k, mask)))
    if isinstance(obj, Trajectory):
        if time != "space-time":
            raise ValueError("trajectory norms require time='space-time'")
        g = obj.grid
        sq = sobolev_sq_trace if obj.is_trace else sobolev_sq_field
        vals = np.array([sq(obj.values[n], g, k, mask) for n in range(g.nt + 1)])
        return float(np.sqrt(np.trapz(vals, dx=g.dt)))
    raise TypeError(f"cannot take norm of {type(obj)}")


def time_derivative(traj: Trajectory) -> Trajectory:
    """Centered FD time derivative (one-sided 2nd order at the ends)."""
    g = traj.grid
    v = traj.values
    dt = g.dt
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dt)
    out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dt)
    return Trajectory(out, g)


def space_time_norm_l2h(traj: Trajectory, k: int, mask=None) -> float:
    """|| . ||_{L^2(0,T; H^k)} of a trajectory, optionally on a region."""
    g = traj.grid
    sq = sobolev_sq_trace if traj.is_trace else sobolev_sq_field
    vals = np.array([sq(traj.values[n], g, k, mask) for n in range(g.nt + 1)])
    return float(np.sqrt(np.trapz(vals, dx=g.dt)))


def space_time_norm_h1h(traj: Trajectory, k: int, mask=None) -> float:
    """Seminorm || d/dt . ||_{L^2(0,T; H^k)}."""
    return space_time_norm_l2h(time_derivative(traj), k, mask)


def fractional_time_norm(traj: Trajectory, s: float) -> float:
    """H^s-in-time proxy via the discrete Fourier symbol (1+|w|^2)^{s/2}.

    Diagnostic only; reported wherever the interpolation-scale time spaces
    of the well-posedness framework are quoted.
    """
    g = traj.grid
    v = traj.values
    nt1 = v.shape[0]
    freqs = 2.0 * np.pi * np.fft.rfftfreq(nt1, d=g.dt)
    c = np.fft.rfft(v, axis=0) / nt1
    mult = np.full(len(freqs), 2.0)
    mult[0] = 1.0
    if nt1 % 2 == 0:
        mult[-1] = 1.0
    sym = mult * (1.0 + freqs**2) ** s
    if traj.is_trace:
        dens = np.sum(np.abs(c) ** 2 * g.dx, axis=1)
    else:
        dens = np.sum(np.abs(c) ** 2 * (g.dx * g.wz()), axis=(1, 2))
    return float(np.sqrt(g.params.T * np.sum(sym * dens)))
