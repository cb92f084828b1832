"""Physical parameters of the gas environment and the dimensionless scalings.

All engine arithmetic runs in the scaled variables

    U = P / (M v_beta)        test-particle momentum
    K = Q / (m_star v_beta)   momentum transfer
    W = k / (m v_beta)        gas momentum in the plane perpendicular to K
    S = X / Lambda_th         position

with ``v_beta = sqrt(2 kT / m)`` the most probable gas speed and
``Lambda_th = sqrt(2 pi hbar^2 / (m kT))`` the thermal wavelength of the gas.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Raised when a physical parameter is outside its admissible range."""


@dataclass(frozen=True)
class GasEnvironment:
    """Masses, temperature and density of the gas plus derived scales.

    Immutable; every derived quantity is computed once on construction.
    """

    m: float
    M: float
    kT: float
    n_gas: float
    hbar: float = 1.0
    beta: float = field(init=False)
    m_star: float = field(init=False)
    v_beta: float = field(init=False)
    p_beta: float = field(init=False)
    Lambda_th: float = field(init=False)

    def __post_init__(self):
        for name in ("m", "M", "kT", "hbar"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be positive and finite, got {value!r}")
        # zero density is allowed: it switches the gas off (free evolution)
        if not (np.isfinite(self.n_gas) and self.n_gas >= 0):
            raise ParameterError(f"n_gas must be non-negative and finite, got {self.n_gas!r}")
        set_ = object.__setattr__
        set_(self, "beta", 1.0 / self.kT)
        set_(self, "m_star", self.m * self.M / (self.m + self.M))
        set_(self, "v_beta", math.sqrt(2.0 * self.kT / self.m))
        set_(self, "p_beta", math.sqrt(2.0 * self.m / self.beta))
        set_(self, "Lambda_th", math.sqrt(2.0 * math.pi * self.hbar**2 * self.beta / self.m))

    @property
    def mass_ratio(self) -> float:
        """m / M."""
        return self.m / self.M

    @property
    def Lambda_test(self) -> float:
        """Thermal wavelength of the test particle, sqrt(2 pi hbar^2 beta / M)."""
        return math.sqrt(2.0 * math.pi * self.hbar**2 * self.beta / self.M)

    @property
    def position_phase(self) -> float:
        """Coefficient c in exp(i c S U) for a plane wave in scaled units."""
        return self.M * self.v_beta * self.Lambda_th / self.hbar

    def as_dict(self) -> dict:
        return {"m": self.m, "M": self.M, "kT": self.kT, "n_gas": self.n_gas, "hbar": self.hbar}

    def with_density(self, n_gas: float) -> "GasEnvironment":
        return GasEnvironment(self.m, self.M, self.kT, n_gas, self.hbar)

    # scalings ------------------------------------------------------------

    def to_U(self, P):
        return np.asarray(P, dtype=float) / (self.M * self.v_beta)

    def from_U(self, U):
        return np.asarray(U, dtype=float) * (self.M * self.v_beta)

    def to_K(self, Q):
        return np.asarray(Q, dtype=float) / (self.m_star * self.v_beta)

    def from_K(self, K):
        return np.asarray(K, dtype=float) * (self.m_star * self.v_beta)

    def to_W(self, k):
        return np.asarray(k, dtype=float) / (self.m * self.v_beta)

    def from_W(self, W):
        return np.asarray(W, dtype=float) * (self.m * self.v_beta)

    def to_S(self, X):
        return np.asarray(X, dtype=float) / self.Lambda_th

    def from_S(self, S):
        return np.asarray(S, dtype=float) * self.Lambda_th


def make_environment(m, M, kT, n_gas, hbar=1.0) -> GasEnvironment:
    return GasEnvironment(float(m), float(M), float(kT), float(n_gas), float(hbar))


def hard_sphere_units(mass_ratio: float = 1.0, n_gas: float = 1.0) -> GasEnvironment:
    """hbar = M = 1, kT = 1, n_gas = 1; ``mass_ratio`` is M/m.

    Lengths are then measured in units of the sphere radius R = 1.
    """
    return make_environment(m=1.0 / mass_ratio, M=1.0, kT=1.0, n_gas=n_gas)


def gaussian_units(mass_ratio: float = 1.0, n_gas: float = 1.0) -> GasEnvironment:
    """hbar = m = 1, kT = 1, n_gas = 1, lengths in units of the well width d; ``mass_ratio`` is M/m."""
    return make_environment(m=1.0, M=float(mass_ratio), kT=1.0, n_gas=n_gas)


PRESETS = {
    "hard_sphere": hard_sphere_units,
    "gaussian": gaussian_units,
}
