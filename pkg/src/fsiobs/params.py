"""Physical and geometric constants of the channel model.

The channel is the periodic strip T_L x (0,1), where T_L is the
one-dimensional torus identified with (-L, d+L).  The extension length is
tied to the time horizon by L = 3*u_bar1*T, and the horizon must exceed the
transit time d/u_bar1 of the reference flow across the physical channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class ModelParams:
    """Constants of the linearized model around the flat steady state.

    Derived quantities:
      nu       = mu_prime + 2*mu     (effective viscosity)
      P_prime  = a*gamma*rho_bar**(gamma-1)   (pressure law derivative)
      L        = 3*u_bar1*T          (extension length, fixed convention)
      torus_len = d + 2*L
    """

    rho_bar: float = 1.0
    u_bar1: float = 1.0
    mu: float = 0.05
    mu_prime: float = 0.1
    a: float = 1.0
    gamma: float = 1.4
    d: float = 1.0
    T: float = 1.5
    T0: float = 0.1
    T1: float = 0.1

    def __post_init__(self):
        if self.rho_bar <= 0:
            raise ValueError("rho_bar must be positive")
        if self.u_bar1 <= 0:
            raise ValueError("u_bar1 must be positive")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.mu_prime + 2.0 * self.mu <= 0:
            raise ValueError("mu_prime + 2*mu must be positive")
        if self.a <= 0:
            raise ValueError("pressure coefficient a must be positive")
        if self.gamma <= 1:
            raise ValueError("adiabatic exponent gamma must exceed 1")
        if self.d <= 0:
            raise ValueError("channel length d must be positive")
        if self.T <= self.d / self.u_bar1:
            raise ValueError(
                "horizon too short: T must exceed d/u_bar1 "
                f"(T={self.T}, d/u_bar1={self.d / self.u_bar1})"
            )
        if self.T0 <= 0 or self.T1 <= 0:
            raise ValueError("ramp times T0, T1 must be positive")
        if 2.0 * self.T0 + 2.0 * self.T1 >= self.T - self.d / self.u_bar1:
            raise ValueError(
                "ramp times too large: need 2*T0 + 2*T1 < T - d/u_bar1"
            )

    @property
    def nu(self) -> float:
        return self.mu_prime + 2.0 * self.mu

    @property
    def P_prime(self) -> float:
        return self.a * self.gamma * self.rho_bar ** (self.gamma - 1.0)

    @property
    def L(self) -> float:
        return 3.0 * self.u_bar1 * self.T

    @property
    def torus_len(self) -> float:
        return self.d + 2.0 * self.L
