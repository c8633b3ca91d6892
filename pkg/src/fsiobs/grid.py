"""Discrete fields on the periodic channel.

x is spectral (real FFT over the torus of length d+2L), z is a uniform
node grid over [0,1] including both walls, handled with second-order
finite differences.  Scalar fields are stored as dense (nx, nz) arrays,
boundary traces as (nx,) arrays on one wall.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ModelParams


@dataclass(frozen=True)
class Grid:
    params: ModelParams
    nx: int
    nz: int
    nt: int

    def __post_init__(self):
        if self.nx % 2 != 0:
            raise ValueError("nx must be even")
        if self.nx < 8:
            raise ValueError("nx must be at least 8")
        if self.nz < 5:
            raise ValueError("nz must be at least 5")
        if self.nt < 2:
            raise ValueError("nt must be at least 2")

    @property
    def torus_len(self) -> float:
        return self.params.torus_len

    @property
    def dx(self) -> float:
        return self.torus_len / self.nx

    @property
    def dz(self) -> float:
        return 1.0 / (self.nz - 1)

    @property
    def dt(self) -> float:
        return self.params.T / self.nt

    @property
    def x(self) -> np.ndarray:
        """Collocation points over one period, starting at -L."""
        return -self.params.L + self.dx * np.arange(self.nx)

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nz)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.params.T, self.nt + 1)

    @property
    def k(self) -> np.ndarray:
        """Physical wavenumbers of the rfft modes, 2*pi*m/torus_len."""
        return 2.0 * np.pi * np.arange(self.nx // 2 + 1) / self.torus_len

    @property
    def n_modes(self) -> int:
        return self.nx // 2 + 1

    def mode_mult(self) -> np.ndarray:
        """Multiplicity of each rfft mode in real-field quadratic sums."""
        m = np.full(self.n_modes, 2.0)
        m[0] = 1.0
        m[-1] = 1.0
        return m

    # --- z-difference operators (dense (nz, nz) matrices) ---

    def dz1_matrix(self) -> np.ndarray:
        """First z-derivative: centered interior, one-sided 2nd order walls."""
        n, h = self.nz, self.dz
        D = np.zeros((n, n))
        for j in range(1, n - 1):
            D[j, j - 1] = -0.5 / h
            D[j, j + 1] = 0.5 / h
        D[0, 0], D[0, 1], D[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
        D[-1, -1], D[-1, -2], D[-1, -3] = 1.5 / h, -2.0 / h, 0.5 / h
        return D

    def dz2_matrix(self) -> np.ndarray:
        """Compact second z-derivative, one-sided 2nd order at walls."""
        n, h = self.nz, self.dz
        D = np.zeros((n, n))
        for j in range(1, n - 1):
            D[j, j - 1] = 1.0 / h**2
            D[j, j] = -2.0 / h**2
            D[j, j + 1] = 1.0 / h**2
        D[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
        D[-1, -4:] = np.array([-1.0, 4.0, -5.0, 2.0]) / h**2
        return D

    def wz(self) -> np.ndarray:
        """Trapezoid quadrature weights over z."""
        w = np.full(self.nz, self.dz)
        w[0] = w[-1] = 0.5 * self.dz
        return w

    # --- control / observation region masks (per cell center) ---

    def omega_mask_x(self) -> np.ndarray:
        """Indicator of omega = (-L, 0) union (d, d+L] at the x nodes.

        On the torus the two pieces form one arc through the identification
        point -L == d+L; membership is decided per collocation point in the
        arc coordinate u = (x - d) mod torus_len, with omega exactly
        0 < u < 2L.  In particular the node at x = -L (which represents
        d+L) belongs to omega, while x = 0 and x = d do not.
        """
        p = self.params
        u = np.mod(self.x - p.d, p.torus_len)
        return (u > 0.0) & (u < 2.0 * p.L)

    def omega_mask(self) -> np.ndarray:
        """(nx, nz) indicator of omega x (0,1); interior of the wall nodes
        is included (the z-section of omega is the full (0,1))."""
        return np.repeat(self.omega_mask_x()[:, None], self.nz, axis=1)


def make_grid(params: ModelParams, nx: int = 64, nz: int = 33, nt: int = 300) -> Grid:
    """Validate resolutions and build the discrete channel grid."""
    return Grid(params=params, nx=nx, nz=nz, nt=nt)


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class Field:
    """One scalar component on the channel, values[i, j] at (x_i, z_j)."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.nx, self.grid.nz):
            raise ValueError(
                f"field shape {v.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.nz})"
            )
        _check_finite(v, "field")
        object.__setattr__(self, "values", v)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.values + other.values, self.grid)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.values - other.values, self.grid)

    def __mul__(self, c: float) -> "Field":
        return Field(self.values * c, self.grid)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Trace:
    """Function on T_L x {0} or T_L x {1}."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.nx,):
            raise ValueError(f"trace shape {v.shape} does not match nx={self.grid.nx}")
        _check_finite(v, "trace")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed snapshots, one per node of the uniform time grid.

    values has shape (nt+1, nx, nz) for field trajectories and (nt+1, nx)
    for trace trajectories.
    """

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        nt1 = self.grid.nt + 1
        if v.shape[0] != nt1:
            raise ValueError(f"expected {nt1} snapshots, got {v.shape[0]}")
        if v.shape[1:] not in ((self.grid.nx, self.grid.nz), (self.grid.nx,)):
            raise ValueError(f"snapshot shape {v.shape[1:]} matches neither fields nor traces")
        _check_finite(v, "trajectory")
        object.__setattr__(self, "values", v)

    @property
    def is_trace(self) -> bool:
        return self.values.ndim == 2

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    def at(self, n: int):
        cls = Trace if self.is_trace else Field
        return cls(self.values[n], self.grid)


# --- spectral transform and derivatives ---


def fourier_x(field) -> np.ndarray:
    """Real FFT over x, normalized so mode 0 is the x-mean.

    Accepts a Field/Trace or a raw array whose first axis is x.
    """
    v = field.values if hasattr(field, "values") else np.asarray(field)
    _check_finite(v, "input")
    return np.fft.rfft(v, axis=0) / v.shape[0]


def inverse_fourier_x(coeffs: np.ndarray, nx: int) -> np.ndarray:
    return np.fft.irfft(coeffs * nx, n=nx, axis=0)


def diff(field: Field, axis: str, order: int = 1) -> Field:
    """Differentiate: spectral in x (order <= 4), FD in z (order <= 2).

    Higher z-orders are obtained by composing diff calls.
    """
    g = field.grid
    if axis == "x":
        if not 1 <= order <= 4:
            raise ValueError("x-derivative order must be 1..4")
        c = fourier_x(field)
        c *= (1j * g.k[:, None]) ** order
        return Field(inverse_fourier_x(c, g.nx), g)
    if axis == "z":
        if order == 1:
            return Field(field.values @ g.dz1_matrix().T, g)
        if order == 2:
            return Field(field.values @ g.dz2_matrix().T, g)
        raise ValueError("z-derivative order must be 1 or 2 (compose for higher)")
    raise ValueError("axis must be 'x' or 'z'")


def diff_trace(tr: Trace, order: int = 1) -> Trace:
    g = tr.grid
    if not 1 <= order <= 4:
        raise ValueError("trace derivative order must be 1..4")
    c = fourier_x(tr)
    c *= (1j * g.k) ** order
    return Trace(inverse_fourier_x(c, g.nx), g)


def trace(field: Field, wall: str) -> Trace:
    """Restrict a field to the bottom (z=0) or top (z=1) wall."""
    if wall == "bottom":
        return Trace(field.values[:, 0], field.grid)
    if wall == "top":
        return Trace(field.values[:, -1], field.grid)
    raise ValueError("wall must be 'bottom' or 'top'")
