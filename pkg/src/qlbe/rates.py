"""Total jump rate Gamma(U), thermal collision rate and Brownian relaxation rate.

Rates are in units of inverse time of the environment; momenta in the scaled
variables of :mod:`qlbe.units`.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import erf

from .scattering import NumericalError, ScatteringModel
from .units import GasEnvironment, ParameterError

SIGMA_K = math.sqrt(2.0)
SIGMA_W = 1.0 / math.sqrt(2.0)


def plane_basis(K):
    """Orthonormal basis (e1, e2) of the plane perpendicular to each K.

    Gram-Schmidt seeded with the coordinate axis along the smallest |K|
    component, which is never close to parallel with K.
    """
    K = np.asarray(K, dtype=float)
    khat = K / np.linalg.norm(K, axis=-1, keepdims=True)
    seed = np.zeros_like(K)
    idx = np.argmin(np.abs(K), axis=-1)
    np.put_along_axis(seed, idx[..., None], 1.0, axis=-1)
    e1 = seed - np.sum(seed * khat, axis=-1, keepdims=True) * khat
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(khat, e1)
    return e1, e2


def split_along(U, K):
    """(U_par, U_perp): scalar projection of U on K-hat and the perpendicular vector."""
    U = np.asarray(U, dtype=float)
    K = np.asarray(K, dtype=float)
    khat = K / np.linalg.norm(K, axis=-1, keepdims=True)
    upar = np.sum(U * khat, axis=-1)
    return upar, U - upar[..., None] * khat


def collision_momenta(W_perp, U, K, env: GasEnvironment):
    """Relative momenta (p_out, p_in) = m* v_beta [W - U_perp -+ K/2]."""
    _, uperp = split_along(U, K)
    a = np.asarray(W_perp, dtype=float) - uperp
    half = 0.5 * np.asarray(K, dtype=float)
    s = env.m_star * env.v_beta
    return s * (a - half), s * (a + half)


def g_integrand(W_perp, U, K, env: GasEnvironment, model: ScatteringModel):
    """Integrand of Gamma(U) relative to the Gaussian proposal densities.

    ``W_perp`` holds plane coordinates (..., 2) in the basis of
    :func:`plane_basis`. Returns
    8 pi n v_beta |f|^2 / |K| * exp(-K.U) * exp(-U_par^2).
    """
    K = np.asarray(K, dtype=float)
    kn = np.linalg.norm(K, axis=-1)
    if np.any(kn == 0):
        raise ParameterError("K = 0 is outside the integration domain")
    W_perp = np.asarray(W_perp, dtype=float)
    e1, e2 = plane_basis(K)
    W3 = W_perp[..., 0:1] * e1 + W_perp[..., 1:2] * e2
    U = np.asarray(U, dtype=float)
    upar, _ = split_along(U, K)
    p_out, p_in = collision_momenta(W3, U, K, env)
    f2 = model.abs2(p_in, p_out)
    expo = -np.sum(K * U, axis=-1) - upar**2
    return 8.0 * math.pi * env.n_gas * env.v_beta * f2 / kn * np.exp(expo)


def _draw_K(rng, n):
    K = rng.normal(0.0, SIGMA_K, size=(n, 3))
    tiny = np.linalg.norm(K, axis=1) < 1e-12
    while np.any(tiny):
        K[tiny] = rng.normal(0.0, SIGMA_K, size=(int(tiny.sum()), 3))
        tiny = np.linalg.norm(K, axis=1) < 1e-12
    return K


def _mean_err(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def jump_rate(U, env: GasEnvironment, model: ScatteringModel, n=10_000, rng=None, method="importance"):
    """Monte Carlo estimate (Gamma, stderr) of the total jump rate at U.

    ``importance`` samples K and the plane coordinates from the Gaussian
    proposals and averages :func:`g_integrand`. ``collision`` averages the
    classical collision rate n |v - V| sigma over Maxwellian gas velocities;
    its variance stays small at large |U|, where the importance weights
    concentrate on a thin shell.
    """
    if n < 100:
        raise ParameterError(f"need at least 100 samples, got {n}")
    rng = np.random.default_rng() if rng is None else rng
    U = np.broadcast_to(np.asarray(U, dtype=float), (3,))
    if env.n_gas == 0:
        return 0.0, 0.0
    if method == "importance":
        K = _draw_K(rng, n)
        W = rng.normal(0.0, SIGMA_W, size=(n, 2))
        return _mean_err(g_integrand(W, U, K, env, model))
    if method == "collision":
        y = rng.normal(0.0, SIGMA_W, size=(n, 3))
        r = np.linalg.norm(y - U, axis=1)
        sigma = model.cross_section(env.m_star * env.v_beta * r)
        return _mean_err(env.n_gas * env.v_beta * r * sigma)
    raise ParameterError(f"unknown method {method!r}")


def _quad(fn, lo, hi, rtol, points=None):
    with warnings.catch_warnings():
        # quad reports hitting machine precision as a warning; the result is fine
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(fn, lo, hi, points=points, epsabs=0.0, epsrel=rtol, limit=200)
    return val


def relative_speed_density(r, U):
    """Density of |y - U| for y ~ Normal(0, I/2), U a magnitude."""
    r = np.asarray(r, dtype=float)
    if U < 1e-8:
        return 4.0 / math.sqrt(math.pi) * r**2 * np.exp(-(r**2))
    return r / (U * math.sqrt(math.pi)) * (np.exp(-((r - U) ** 2)) - np.exp(-((r + U) ** 2)))


def collision_rate(U, env: GasEnvironment, model: ScatteringModel, rtol=1e-10):
    """Deterministic quadrature of the collision rate at |U| (rate oracle)."""
    U = float(np.linalg.norm(U)) if np.ndim(U) else float(U)
    if env.n_gas == 0:
        return 0.0
    s = env.m_star * env.v_beta

    def integrand(r):
        return r * float(model.cross_section(np.array(s * r))) * relative_speed_density(r, U)

    lo, hi = max(0.0, U - 8.0), U + 8.0
    pts = [U] if lo < U < hi else None
    val = _quad(integrand, lo, hi, rtol, points=pts)
    return env.n_gas * env.v_beta * val


def hard_sphere_rate(U, env: GasEnvironment, R=1.0):
    """Closed-form collision rate of hard spheres at |U|."""
    U = np.asarray(U, dtype=float)
    pref = 4.0 * math.pi * env.n_gas * R**2 * env.v_beta
    small = U < 1e-6
    Us = np.where(small, 1.0, U)
    big = (Us + 0.5 / Us) * erf(Us) + np.exp(-(Us**2)) / math.sqrt(math.pi)
    lim = 2.0 / math.sqrt(math.pi) * (1.0 + U**2 / 3.0)
    return pref * np.where(small, lim, big)


# ---------------------------------------------------------------------------
# rate table


def env_model_fingerprint(env: GasEnvironment, model: ScatteringModel, extra=None) -> str:
    blob = json.dumps(
        {"env": env.as_dict(), "model": model.kind, "model_fp": model.fingerprint(), "extra": extra},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class RateTable:
    """Gamma(|U|) on a grid with Monte Carlo errors; interpolates log Gamma.

    Beyond the last node Gamma is continued linearly in |U|, the asymptotic
    law for a cross section that levels off at high energy.
    """

    U_grid: np.ndarray
    gamma: np.ndarray
    stderr: np.ndarray
    n_samples: int
    env_fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        U = np.asarray(self.U_grid, dtype=float)
        g = np.asarray(self.gamma, dtype=float)
        e = np.asarray(self.stderr, dtype=float)
        if U.ndim != 1 or U.size < 2 or U[0] != 0.0 or np.any(np.diff(U) <= 0):
            raise ParameterError("U_grid must be ascending and start at 0")
        if g.shape != U.shape or e.shape != U.shape:
            raise ParameterError("gamma/stderr must match the grid")
        object.__setattr__(self, "U_grid", U)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "stderr", e)
        self._check_positive()
        if np.all(g > 0):
            object.__setattr__(self, "_interp", PchipInterpolator(U, np.log(g)))
        else:
            object.__setattr__(self, "_interp", None)

    def _check_positive(self):
        if np.any(self.gamma < 0) or (np.any(self.gamma == 0) and np.any(self.gamma > 0)):
            raise NumericalError("rate table has non-positive entries")

    @property
    def U_max(self) -> float:
        return float(self.U_grid[-1])

    def __call__(self, U_mag):
        U_mag = np.asarray(U_mag, dtype=float)
        if self._interp is None:
            return np.zeros_like(U_mag)
        inside = np.minimum(U_mag, self.U_max)
        out = np.exp(self._interp(inside))
        beyond = U_mag > self.U_max
        if np.any(beyond):
            out = np.where(beyond, self.gamma[-1] * U_mag / self.U_max, out)
        return out

    def rates_for(self, U_vectors):
        return self(np.linalg.norm(np.asarray(U_vectors, dtype=float), axis=-1))

    def require_fingerprint(self, fingerprint: str):
        if fingerprint != self.env_fingerprint:
            raise ParameterError(
                f"rate table fingerprint {self.env_fingerprint} does not match the requested {fingerprint}"
            )

    def save(self, path):
        header = {
            "kind": "rate_table",
            "n_samples": self.n_samples,
            "env_fingerprint": self.env_fingerprint,
            "meta": self.meta,
        }
        with Path(path).open("w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            fh.write("U,gamma,stderr\n")
            np.savetxt(fh, np.column_stack([self.U_grid, self.gamma, self.stderr]), delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path, expected_fingerprint=None) -> "RateTable":
        with Path(path).open() as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path}: missing rate-table header")
            header = json.loads(first[2:])
            fh.readline()
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if header.get("kind") != "rate_table":
            raise ValueError(f"{path}: not a rate table")
        table = cls(
            data[:, 0], data[:, 1], data[:, 2], int(header["n_samples"]), header["env_fingerprint"], header.get("meta", {})
        )
        if expected_fingerprint is not None:
            table.require_fingerprint(expected_fingerprint)
        return table


def rate_grid(U_max, n_grid, U_first=None):
    """0 followed by geometrically spaced magnitudes up to U_max."""
    if U_max <= 0 or n_grid < 8:
        raise ParameterError("need U_max > 0 and n_grid >= 8")
    U_first = min(1e-2, U_max / 100.0) if U_first is None else U_first
    return np.concatenate([[0.0], np.geomspace(U_first, U_max, n_grid - 1)])


def build_rate_table(
    env: GasEnvironment,
    model: ScatteringModel,
    U_max=20.0,
    n_grid=48,
    n_samples=20_000,
    rng=None,
    *,
    seed=None,
    method="auto",
    U_switch=2.0,
) -> RateTable:
    """Tabulate Gamma on :func:`rate_grid`.

    ``method='auto'`` uses the importance-sampled estimator up to
    ``U_switch`` and the collision-rate estimator above it; ``'importance'``
    or ``'collision'`` force one estimator everywhere. Each node gets its own
    random stream spawned from ``seed`` (or from ``rng``).
    """
    grid = rate_grid(U_max, n_grid)
    if seed is None:
        rng = np.random.default_rng() if rng is None else rng
        seed = int(rng.integers(2**63))
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(grid.size)]
    gam = np.empty(grid.size)
    err = np.empty(grid.size)
    for i, (u, r) in enumerate(zip(grid, streams)):
        m = method
        if method == "auto":
            m = "importance" if u <= U_switch else "collision"
        gam[i], err[i] = jump_rate(np.array([0.0, 0.0, u]), env, model, n_samples, r, method=m)
    meta = {"method": method, "U_switch": U_switch, "seed": seed}
    fp = env_model_fingerprint(env, model, {"U_max": U_max, "n_grid": n_grid, "n_samples": n_samples, **meta})
    return RateTable(grid, gam, err, n_samples, fp, meta)


def exact_rate_table(env: GasEnvironment, model: ScatteringModel, U_max=20.0, n_grid=48) -> RateTable:
    """Rate table from the deterministic collision-rate quadrature (zero error bars)."""
    grid = rate_grid(U_max, n_grid)
    gam = np.array([collision_rate(u, env, model) for u in grid])
    meta = {"method": "quadrature"}
    fp = env_model_fingerprint(env, model, {"U_max": U_max, "n_grid": n_grid, **meta})
    return RateTable(grid, gam, np.zeros_like(gam), 0, fp, meta)


# ---------------------------------------------------------------------------
# thermal averages


def effective_collision_rate(env: GasEnvironment, model: ScatteringModel, n=None, rng=None):
    """Gamma_eff = n_gas < v sigma(m v) > over Maxwellian gas speeds.

    With ``n`` a Monte Carlo estimate is returned as (value, stderr);
    without, the speed integral is done by adaptive quadrature.
    """
    if env.n_gas == 0:
        return (0.0, 0.0) if n is not None else 0.0
    if n is not None:
        rng = np.random.default_rng() if rng is None else rng
        v = np.linalg.norm(rng.normal(0.0, SIGMA_W * env.v_beta, size=(int(n), 3)), axis=1)
        val, err = _mean_err(v * model.cross_section(env.m * v))
        return env.n_gas * val, env.n_gas * err

    def integrand(r):
        return r * float(model.cross_section(np.array(env.m * env.v_beta * r))) * relative_speed_density(r, 0.0)

    val = _quad(integrand, 0.0, 10.0, 1e-11)
    return env.n_gas * env.v_beta * val


def _gamma_quadrature(env, model, n_u, n_theta, u_max):
    xu, wu = np.polynomial.legendre.leggauss(n_u)
    u = 0.5 * u_max * (xu + 1.0)
    wu = 0.5 * u_max * wu
    xt, wt = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * math.pi * (xt + 1.0)
    wt = 0.5 * math.pi * wt
    c = np.cos(theta)
    f2 = np.abs(model.amplitude_pc(u[:, None] * env.p_beta, c[None, :])) ** 2
    inner = f2 @ (wt * np.sin(theta) * (1.0 - c))
    integral = np.sum(wu * u**5 * np.exp(-(u**2)) * inner)
    pref = env.n_gas * (8.0 * env.m / (3.0 * env.M)) * math.sqrt(2.0 * math.pi / (env.m * env.beta))
    return pref * integral


def relaxation_rate(
    env: GasEnvironment, model: ScatteringModel, n_u=64, n_theta=128, u_max=6.0, rtol=1e-5, max_doublings=6
):
    """Brownian-limit relaxation rate gamma by Gauss-Legendre quadrature.

    Both orders are doubled once as a convergence check; the speed order keeps
    doubling until successive results agree to ``rtol`` (interpolated phase
    tables are only once differentiable in p, which slows the speed rule).
    """
    coarse = _gamma_quadrature(env, model, n_u, n_theta, u_max)
    n_theta *= 2
    for _ in range(max_doublings):
        n_u *= 2
        fine = _gamma_quadrature(env, model, n_u, n_theta, u_max)
        if abs(fine - coarse) <= rtol * max(abs(fine), 1e-300):
            return fine
        coarse = fine
    raise NumericalError(f"relaxation-rate quadrature not converged at {n_u}x{n_theta} nodes")


def relaxation_rate_mc(env: GasEnvironment, model: ScatteringModel, n=200_000, rng=None):
    """Monte Carlo estimate of the same double integral (oracle for tests)."""
    rng = np.random.default_rng() if rng is None else rng
    # u^5 e^{-u^2} du is a Gamma(3, 1) law in s = u^2 with total mass 1
    u = np.sqrt(rng.gamma(3.0, 1.0, size=n))
    # sin(theta)(1 - cos theta) dtheta is uniform in (1 - cos theta)^2 / 4 with mass 2
    c = 1.0 - 2.0 * np.sqrt(rng.uniform(size=n))
    vals = 2.0 * np.abs(model.amplitude_pc(u * env.p_beta, c)) ** 2
    pref = env.n_gas * (8.0 * env.m / (3.0 * env.M)) * math.sqrt(2.0 * math.pi / (env.m * env.beta))
    mean, err = _mean_err(vals)
    return pref * mean, pref * err
