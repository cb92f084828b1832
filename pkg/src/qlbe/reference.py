"""Closed-form and quadrature predictions of limiting theories.

These are oracles for the simulation: pure collisional decoherence (the
localization rate F), the Caldeira-Leggett energy relaxation, Kramers
diffusion, and free dispersion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import dawsn

from .scattering import NumericalError, ScatteringModel
from .units import GasEnvironment


@dataclass(frozen=True)
class LimitPrediction:
    kind: str
    params: dict = field(default_factory=dict)


def gamma0(env: GasEnvironment, R: float = 1.0) -> float:
    """Hard-sphere rate scale 4 pi n R^2 v_beta."""
    return 4.0 * math.pi * env.n_gas * R**2 * env.v_beta


def _one_minus_sinc(a):
    """1 - sin(a)/a without cancellation at small a."""
    a = np.asarray(a, dtype=float)
    small = np.abs(a) < 1e-2
    a2 = a * a
    series = a2 / 6.0 - a2 * a2 / 120.0 + a2**3 / 5040.0
    safe = np.where(small, 1.0, a)
    return np.where(small, series, 1.0 - np.sin(safe) / safe)


def composite_nodes(edges, n_per):
    """Gauss-Legendre nodes and weights with ``n_per`` points on each panel."""
    t, w = np.polynomial.legendre.leggauss(n_per)
    a, b = np.asarray(edges[:-1]), np.asarray(edges[1:])
    half = 0.5 * (b - a)[:, None]
    return ((a[:, None] + b[:, None]) * 0.5 + half * t).ravel(), (half * w).ravel()


def _speed_panels(model, env, v_max, k_max):
    """Panel edges on [0, v_max] split at amplitude breakpoints and at most ~2 rad of oscillation."""
    n_osc = max(8, int(math.ceil(k_max / 2.0)))
    edges = np.linspace(0.0, v_max, n_osc + 1)
    bp = np.asarray(model.breakpoints(), dtype=float) / env.m
    bp = bp[(bp > 0) & (bp < v_max)]
    return np.unique(np.concatenate([edges, bp]))


def _localization_integral(model, env, x, n_per, n_c, edges):
    """int dv mu(v) v int_{-1}^{1} dc |f(c; m v)|^2 (1 - sinc(2 sin(theta/2) m v x / hbar))."""
    vb = env.v_beta
    v, wv = composite_nodes(edges, n_per)
    c, wc = np.polynomial.legendre.leggauss(n_c)
    s_half = np.sqrt(0.5 * (1.0 - c))
    inner = np.empty(v.size)
    step = max(1, 200_000 // n_c)
    for i in range(0, v.size, step):
        p = env.m * v[i : i + step, None]
        P = np.broadcast_to(p, (p.shape[0], n_c))
        f2 = np.abs(model.amplitude_pc(P, np.broadcast_to(c, P.shape))) ** 2
        inner[i : i + step] = (f2 * _one_minus_sinc(2.0 * s_half * P * x / env.hbar)) @ wc
    mu = 4.0 / math.sqrt(math.pi) * v**2 / vb**3 * np.exp(-((v / vb) ** 2))
    return float(wv @ (mu * v * inner))


def localization_rate_analytic(x, env: GasEnvironment, model: ScatteringModel, rtol=1e-8, n_theta=128, max_doublings=4):
    """F(x) = 2 pi n int dv mu(v) v int dc |f|^2 [1 - sinc(2 sin(theta/2) m v x / hbar)].

    ``x`` is a physical distance. This equals Gamma_eff minus the sinc-weighted
    integral; writing it with 1 - sinc avoids cancellation at small x.
    The speed rule is composite, with panels split at the amplitude's
    interpolation nodes; both orders are doubled until two successive values
    agree to ``rtol``.
    """
    x = float(abs(x))
    if env.n_gas == 0 or x == 0.0:
        return 0.0
    v_max = 6.0 * env.v_beta
    k_max = 2.0 * env.m * v_max * x / env.hbar
    edges = _speed_panels(model, env, v_max, k_max)
    n_c = int(max(n_theta, 1.5 * k_max + 32))
    n_per = 6
    prev = _localization_integral(model, env, x, n_per, n_c, edges)
    for _ in range(max_doublings):
        n_per, n_c = 2 * n_per, 2 * n_c
        cur = _localization_integral(model, env, x, n_per, n_c, edges)
        if abs(cur - prev) <= rtol * abs(cur) + 1e-300:
            return 2.0 * math.pi * env.n_gas * cur
        prev = cur
    raise NumericalError(f"localization-rate quadrature not converged at x={x}")


def localization_rate_hardsphere(S, env: GasEnvironment, R: float = 1.0):
    """F(S) for s-wave hard spheres, S = x / Lambda_th.

    Uses exp(-z^2) erfi(z) = 2 D(z) / sqrt(pi) with Dawson's D, and the
    series 4 - (2/(sqrt(pi) S)) D(2 sqrt(pi) S) ~ (32 pi / 3) S^2 near 0.
    """
    S = np.abs(np.asarray(S, dtype=float))
    z = 2.0 * math.sqrt(math.pi) * S
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    Ss = np.where(small, 1.0, S)
    bracket = 4.0 - 2.0 / (math.sqrt(math.pi) * Ss) * dawsn(zs)
    series = (32.0 * math.pi / 3.0) * S**2 * (1.0 - 0.4 * z**2)
    bracket = np.where(small, series, bracket)
    return 2.0 * math.sqrt(math.pi) * env.n_gas * R**2 * env.v_beta * bracket


def predicted_visibility(t, separation, rate, variant="plain", n_nodes=2001):
    """V(t)/V(0) from the integrated localization rate along a trajectory.

    ``separation(tau)`` gives the packet distance (any units ``rate`` takes)
    and ``rate(s)`` the localization rate. ``variant='plain'`` integrates
    F[S(tau)] dtau; ``'weighted'`` integrates F[S(tau)] tau dtau.
    """
    if t <= 0:
        return 1.0
    tau = np.linspace(0.0, t, n_nodes)
    F = np.asarray(rate(np.abs(separation(tau))), dtype=float)
    if variant == "plain":
        integrand = F
    elif variant == "weighted":
        integrand = F * tau
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return float(math.exp(-integrate.simpson(integrand, x=tau)))


def counter_propagating_separation(sep0, closing_speed, scale=1.0):
    """S(tau) = scale * |sep0 - closing_speed * tau| for packets moving toward each other."""
    return lambda tau: scale * np.abs(sep0 - closing_speed * np.asarray(tau, dtype=float))


def cl_energy_relaxation(t, U0sq, env: GasEnvironment, gamma):
    """<U^2>(t) = eq + (U0sq - eq) exp(-4 gamma t), eq = (3/2) m / M."""
    eq = 1.5 * env.m / env.M
    return eq + (U0sq - eq) * np.exp(-4.0 * gamma * np.asarray(t, dtype=float))


def kramers_variance(t, sigma0_sq, env: GasEnvironment, gamma, length_unit=None):
    """sigma^2(t) = sigma^2(0) + t / (beta M gamma).

    With ``length_unit`` both variances are in units of length_unit^2.
    """
    slope = 1.0 / (env.beta * env.M * gamma)
    if length_unit is not None:
        slope /= length_unit**2
    return sigma0_sq + slope * np.asarray(t, dtype=float)


def kramers_slope(env: GasEnvironment, gamma, length_unit=None, time_unit=1.0):
    """d sigma^2 / dt of the Kramers law, optionally in scaled units."""
    slope = time_unit / (env.beta * env.M * gamma)
    if length_unit is not None:
        slope /= length_unit**2
    return slope


def free_dispersion_variance(t, sigma0_sq, M, hbar=1.0):
    """sigma^2(t) = sigma0^2 + hbar^2 t^2 / (4 M^2 sigma0^2) (physical units)."""
    t = np.asarray(t, dtype=float)
    return sigma0_sq + hbar**2 * t**2 / (4.0 * M**2 * sigma0_sq)


def position_diffusion_slope(env: GasEnvironment, gamma, length_unit=None, time_unit=1.0):
    """Collisional position diffusion hbar^2 beta gamma / (4 M) added to d sigma^2 / dt.

    Momentum-dependent jump amplitudes spread the position by
    hbar^2 sum_Q <(dA_Q/dP)^2>; near equilibrium this equals the
    position-diffusion term of the Lindblad-form Caldeira-Leggett equation.
    """
    slope = time_unit * env.hbar**2 * env.beta * gamma / (4.0 * env.M)
    if length_unit is not None:
        slope /= length_unit**2
    return slope


def brownian_variance_slope(env: GasEnvironment, gamma, length_unit=None, time_unit=1.0):
    """Late-time d sigma^2 / dt: Kramers diffusion plus collisional position diffusion."""
    return kramers_slope(env, gamma, length_unit, time_unit) + position_diffusion_slope(
        env, gamma, length_unit, time_unit
    )
