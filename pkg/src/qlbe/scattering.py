"""Elastic scattering amplitudes f(p_f, p_i) for isotropic interactions.

Three models are provided: s-wave hard spheres, exact partial waves for a
radial potential (phase shifts from a log-derivative propagation), and the
first Born approximation of an attractive Gaussian well.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import spherical_jn, spherical_yn


class NumericalError(RuntimeError):
    """A numerical procedure failed to reach its accuracy target."""


class ContractError(ValueError):
    """Arguments violate a documented precondition."""


# ---------------------------------------------------------------------------
# radial problem


def gaussian_potential(V0: float, d: float):
    """V(r) = -V0 exp(-r^2 / 2 d^2)."""
    return lambda r: -V0 * np.exp(-(r**2) / (2.0 * d * d))


def _propagate_log_derivative(k, ls, reduced_potential, r_min, r_match, h):
    """Johnson log-derivative propagation of u'' = W u from r_min to r_match.

    ``k`` has shape (n_p,), ``ls`` shape (n_l,). Returns y = u'/u at r_match
    with shape (n_p, n_l) for the solution regular at the origin.
    """
    n = int(math.ceil((r_match - r_min) / h / 2.0)) * 2
    r = np.linspace(r_min, r_match, n + 1)
    h = r[1] - r[0]
    k2 = (k**2)[:, None]
    ll = (ls * (ls + 1.0))[None, :]
    U = reduced_potential(r)

    # the odd-point weight W / (1 - h^2 W / 6) is singular where h^2 W = 6;
    # deep inside the centrifugal barrier the regular solution is r^(l+1),
    # so each partial wave starts at the first even node past that region
    r_safe = 2.0 * h * np.sqrt(ls * (ls + 1.0) / 6.0)
    start = np.searchsorted(r, np.maximum(r_safe, r_min))
    start = start + (start % 2)
    start = np.minimum(start, n - 2)
    start_b = np.broadcast_to(start[None, :], (k.size, ls.size))

    y = np.empty((k.size, ls.size))
    h3 = h / 3.0
    for i in range(n + 1):
        W = ll / r[i] ** 2 + U[i] - k2
        if i % 2 == 1:
            kick = 4.0 * h3 * W / (1.0 - h * h * W / 6.0)
        elif i == n:
            kick = h3 * W
        else:
            kick = 2.0 * h3 * W
        if i == 0:
            y[...] = (ls[None, :] + 1.0) / r[0]
            continue
        stepped = y / (1.0 + h * y) + kick
        fresh = start_b == i
        before = start_b > i
        # fresh start: Simpson endpoint weight 1 at an even node
        y = np.where(before, (ls[None, :] + 1.0) / r[i], stepped)
        y = np.where(fresh, (ls[None, :] + 1.0) / r[i] + h3 * W, y)
    return y


def _phase_from_log_derivative(k, ls, y, r_match):
    """Principal-branch phase shift from the log derivative at r_match."""
    x = np.broadcast_to(k[:, None] * r_match, y.shape)
    lb = np.broadcast_to(ls[None, :], y.shape)
    j = spherical_jn(lb, x)
    jp = spherical_jn(lb, x, derivative=True)
    yn = spherical_yn(lb, x)
    ynp = spherical_yn(lb, x, derivative=True)
    kk = k[:, None]
    # Riccati-Bessel functions x j_l(x), x y_l(x) and their r-derivatives
    jh, jhp = x * j, kk * (j + x * jp)
    nh, nhp = x * yn, kk * (yn + x * ynp)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.arctan((jhp - y * jh) / (nhp - y * nh))


def phase_shifts(
    V0,
    d,
    m_star,
    p,
    l_max,
    hbar=1.0,
    *,
    r_min=None,
    r_match=None,
    h=None,
    tol=1e-6,
    max_halvings=6,
):
    """Phase shifts of the Gaussian well at relative momenta ``p`` (mod pi).

    Returns an array of shape (len(p), l_max + 1) on the principal branch
    (-pi/2, pi/2]; use :func:`unwrap_phases` for a branch continuous in p.
    The radial step is halved until the phases change by less than ``tol``.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any(p <= 0):
        raise ContractError("momenta must be positive")
    if l_max < 0:
        raise ContractError("l_max must be non-negative")
    r_min = 1e-4 * d if r_min is None else r_min
    r_match = 10.0 * d if r_match is None else r_match
    pot = gaussian_potential(V0, d)
    reduced = lambda r: 2.0 * m_star * pot(r) / hbar**2  # noqa: E731
    tail = abs(reduced(r_match))
    k = p / hbar
    if tail > 1e-12 * max(1.0, float(np.min(k)) ** 2):
        raise NumericalError(
            f"potential not negligible at matching radius {r_match}: |2 m V / hbar^2| = {tail:.3e}"
        )
    ls = np.arange(l_max + 1, dtype=float)
    if h is None:
        h = min(2e-3 * d, 0.1 / float(np.max(k)))
    prev = _phase_from_log_derivative(k, ls, _propagate_log_derivative(k, ls, reduced, r_min, r_match, h), r_match)
    for _ in range(max_halvings):
        h /= 2.0
        cur = _phase_from_log_derivative(k, ls, _propagate_log_derivative(k, ls, reduced, r_min, r_match, h), r_match)
        # compare modulo pi
        diff = np.abs(np.angle(np.exp(2j * (cur - prev)))) / 2.0
        if np.nanmax(diff) < tol:
            return cur
        prev = cur
    raise NumericalError(
        f"phase shifts not converged after {max_halvings} step halvings (h={h:.2e}, max change {np.nanmax(diff):.2e})"
    )


def unwrap_phases(delta):
    """Unwrap phases mod pi along ascending p, anchored at 0 at the highest p.

    ``delta`` has shape (n_p, n_l). Each step picks the branch closest to the
    neighbour at larger p.
    """
    out = np.array(delta, dtype=float)
    for i in range(out.shape[0] - 2, -1, -1):
        jump = out[i] - out[i + 1]
        out[i] -= np.pi * np.round(jump / np.pi)
    return out


# ---------------------------------------------------------------------------
# phase table


def _legendre_table(c, l_max):
    """P_0..P_lmax at c, stacked on a new last axis."""
    c = np.asarray(c, dtype=float)
    P = np.empty(c.shape + (l_max + 1,))
    P[..., 0] = 1.0
    if l_max >= 1:
        P[..., 1] = c
    for l in range(1, l_max):
        P[..., l + 1] = ((2 * l + 1) * c * P[..., l] - l * P[..., l - 1]) / (l + 1)
    return P


@dataclass(frozen=True, eq=False)
class PhaseShiftTable:
    """Phase shifts delta_l(p) on an ascending momentum grid.

    ``delta`` has shape (n_p, l_max + 1) and is continuous in p. Interpolation
    is monotone cubic in p. Below the grid the threshold law
    delta_l ~ n_l pi - a_l p^(2l+1) is used, above it a 1/p decay to zero.
    """

    p_grid: np.ndarray
    delta: np.ndarray
    hbar: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.p_grid, dtype=float)
        dl = np.asarray(self.delta, dtype=float)
        if p.ndim != 1 or dl.shape[0] != p.size or np.any(np.diff(p) <= 0) or p[0] <= 0:
            raise ContractError("p_grid must be ascending, positive, and match delta rows")
        object.__setattr__(self, "p_grid", p)
        object.__setattr__(self, "delta", dl)
        object.__setattr__(self, "_interp", PchipInterpolator(p, dl, axis=0, extrapolate=False))

    @property
    def l_max(self) -> int:
        return self.delta.shape[1] - 1

    @property
    def levinson(self) -> np.ndarray:
        """Bound-state counts n_l = round(delta_l(p_min) / pi)."""
        return np.rint(self.delta[0] / np.pi).astype(int)

    @property
    def scattering_length(self) -> float:
        """a_0 from delta_0(p) ~ n_0 pi - a_0 p / hbar at the lowest grid momentum."""
        n0 = self.levinson[0]
        return float((n0 * np.pi - self.delta[0, 0]) * self.hbar / self.p_grid[0])

    def max_step(self) -> float:
        """Largest phase change between adjacent grid points."""
        return float(np.max(np.abs(np.diff(self.delta, axis=0))))

    def reduced_phases(self, p):
        """x_l(p) = n_l pi - delta_l(p), shape p.shape + (l_max + 1,).

        Working with the offset from the Levinson value keeps the threshold
        region free of cancellation.
        """
        p = np.asarray(p, dtype=float)
        p_lo, p_hi = self.p_grid[0], self.p_grid[-1]
        n_pi = self.levinson * np.pi
        ls = np.arange(self.l_max + 1)
        flat = p.reshape(-1)
        out = np.empty((flat.size, self.l_max + 1))
        mid = (flat >= p_lo) & (flat <= p_hi)
        if np.any(mid):
            out[mid] = n_pi - self._interp(flat[mid])
        lo = flat < p_lo
        if np.any(lo):
            ratio = (flat[lo] / p_lo)[:, None] ** (2 * ls + 1)
            out[lo] = (n_pi - self.delta[0]) * ratio
        hi = flat > p_hi
        if np.any(hi):
            out[hi] = n_pi - self.delta[-1] * (p_hi / flat[hi])[:, None]
        return out.reshape(p.shape + (self.l_max + 1,))

    def phases(self, p):
        return self.levinson * np.pi - self.reduced_phases(p)

    def partial_amplitudes(self, p):
        """f_l(p) = (hbar/p) e^{i delta_l} sin delta_l, finite at p = 0."""
        p = np.asarray(p, dtype=float)
        x = self.reduced_phases(p)
        # e^{i delta} sin(delta) = -e^{-i x} sin(x) for delta = n pi - x
        safe = np.where(p > 0, p, 1.0)[..., None]
        fl = -(self.hbar / safe) * np.exp(-1j * x) * np.sin(x)
        if np.any(p == 0):
            zero = np.zeros(self.l_max + 1, dtype=complex)
            zero[0] = -self.scattering_length
            fl = np.where((p == 0)[..., None], zero, fl)
        return fl

    def amplitude(self, p, cos_theta):
        """f(p, cos theta) = sum_l (2l+1) f_l(p) P_l(cos theta)."""
        p = np.asarray(p, dtype=float)
        c = np.asarray(cos_theta, dtype=float)
        # phases depend on p only; broadcasting happens after the table lookup
        fl = self.partial_amplitudes(p) * (2.0 * np.arange(self.l_max + 1) + 1.0)
        P = _legendre_table(np.clip(c, -1.0, 1.0), self.l_max)
        return np.sum(fl * P, axis=-1)

    def total_cross_section(self, p):
        p = np.asarray(p, dtype=float)
        fl = self.partial_amplitudes(p)
        weights = 2.0 * np.arange(self.l_max + 1) + 1.0
        return 4.0 * np.pi * np.sum(weights * np.abs(fl) ** 2, axis=-1)

    # persistence ------------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.p_grid).tobytes())
        h.update(np.ascontiguousarray(self.delta).tobytes())
        h.update(repr(self.hbar).encode())
        return h.hexdigest()[:16]

    def save(self, path):
        path = Path(path)
        header = {"kind": "phase_table", "l_max": self.l_max, "hbar": self.hbar, "meta": self.meta}
        cols = ["p"] + [f"delta_{l}" for l in range(self.l_max + 1)]
        with path.open("w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            fh.write(",".join(cols) + "\n")
            data = np.column_stack([self.p_grid, self.delta])
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "PhaseShiftTable":
        path = Path(path)
        with path.open() as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValueError(f"{path}: missing phase-table header")
            header = json.loads(first[2:])
            fh.readline()
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if header.get("kind") != "phase_table" or data.shape[1] != header["l_max"] + 2:
            raise ValueError(f"{path}: not a phase table with l_max={header.get('l_max')}")
        return cls(data[:, 0], data[:, 1:], hbar=header["hbar"], meta=header.get("meta", {}))


def default_p_grid(p_min=1e-3, p_max=50.0, n_low=120, n_high=300):
    low = np.geomspace(p_min, 1.0, n_low, endpoint=False)
    high = np.linspace(1.0, p_max, n_high)
    return np.concatenate([low, high])


def gaussian_phase_table(
    V0,
    d,
    m_star,
    hbar=1.0,
    l_max=30,
    p_grid=None,
    *,
    tol=1e-6,
    max_refine=4,
) -> PhaseShiftTable:
    """Tabulate continuous-branch phase shifts of the Gaussian well.

    Grid intervals across which any phase moves by more than pi/3 are
    bisected (up to ``max_refine`` rounds) so that unwrapping stays reliable.
    """
    p = default_p_grid() if p_grid is None else np.asarray(p_grid, dtype=float)
    raw = phase_shifts(V0, d, m_star, p, l_max, hbar, tol=tol)
    for _ in range(max_refine):
        delta = unwrap_phases(raw)
        steps = np.max(np.abs(np.diff(delta, axis=0)), axis=1)
        bad = np.nonzero(steps > np.pi / 3)[0]
        if bad.size == 0:
            break
        mids = 0.5 * (p[bad] + p[bad + 1])
        new = phase_shifts(V0, d, m_star, mids, l_max, hbar, tol=tol)
        p = np.concatenate([p, mids])
        raw = np.concatenate([raw, new])
        order = np.argsort(p)
        p, raw = p[order], raw[order]
    delta = unwrap_phases(raw)
    if np.max(np.abs(np.diff(delta, axis=0))) > np.pi / 2:
        raise NumericalError("phase grid too coarse: adjacent phases differ by more than pi/2")
    meta = {"potential": "gaussian", "V0": V0, "d": d, "m_star": m_star}
    return PhaseShiftTable(p, delta, hbar=hbar, meta=meta)


def partial_wave_amplitude(table: PhaseShiftTable, p, cos_theta, hbar=None):
    if hbar is not None and hbar != table.hbar:
        raise ContractError("hbar differs from the one the table was built with")
    return table.amplitude(p, cos_theta)


def born_amplitude_gaussian(V0, d, m_star, p, cos_theta, hbar=1.0):
    """Born amplitude of the attractive Gaussian well (positive for V0 > 0)."""
    p = np.asarray(p, dtype=float)
    c = np.asarray(cos_theta, dtype=float)
    f0 = math.sqrt(math.pi / 2.0) * 2.0 * m_star * V0 * d**3 / hbar**2
    return f0 * np.exp(-(d**2) * p**2 * (1.0 - c) / hbar**2)


# ---------------------------------------------------------------------------
# models


def _norm(v):
    return np.sqrt(np.sum(np.square(v), axis=-1))


class ScatteringModel:
    """Isotropic elastic amplitude provider.

    Subclasses implement :meth:`amplitude_pc` (momentum modulus and cosine of
    the scattering angle) and :meth:`cross_section`.
    """

    kind = "abstract"
    elastic_only = True

    def amplitude_pc(self, p, cos_theta):
        raise NotImplementedError

    def cross_section(self, p):
        """Total cross section sigma(p) = int |f|^2 dOmega."""
        raise NotImplementedError

    def breakpoints(self) -> np.ndarray:
        """Momenta where the amplitude is only piecewise smooth (interpolation nodes)."""
        return np.empty(0)

    def params(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        blob = json.dumps({"kind": self.kind, **self.params()}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _p_cos(self, p_in, p_out):
        p_in = np.asarray(p_in, dtype=float)
        p_out = np.asarray(p_out, dtype=float)
        a, b = _norm(p_in), _norm(p_out)
        if self.elastic_only:
            scale = np.maximum(np.maximum(a, b), 1e-300)
            if np.any(np.abs(a - b) > 1e-9 * scale):
                raise ContractError("amplitude requires |p_in| == |p_out| (elastic collision)")
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.sum(p_in * p_out, axis=-1) / (a * b)
        c = np.where(a * b > 0, np.clip(c, -1.0, 1.0), 1.0)
        return a, c

    def amplitude(self, p_in, p_out):
        p, c = self._p_cos(p_in, p_out)
        return self.amplitude_pc(p, c)

    def abs2(self, p_in, p_out):
        return np.abs(self.amplitude(p_in, p_out)) ** 2


class HardSphereSWave(ScatteringModel):
    """s-wave hard spheres: f = -R for every energy and angle."""

    kind = "hard_sphere"
    elastic_only = False

    def __init__(self, R: float = 1.0):
        if R <= 0:
            raise ContractError("R must be positive")
        self.R = float(R)

    def amplitude_pc(self, p, cos_theta):
        shape = np.broadcast_shapes(np.shape(p), np.shape(cos_theta))
        return np.full(shape, -self.R)

    def amplitude(self, p_in, p_out):
        shape = np.broadcast_shapes(np.shape(p_in), np.shape(p_out))[:-1]
        return np.full(shape, -self.R)

    def abs2(self, p_in, p_out):
        shape = np.broadcast_shapes(np.shape(p_in), np.shape(p_out))[:-1]
        return np.full(shape, self.R**2)

    def cross_section(self, p):
        return np.full(np.shape(p), 4.0 * np.pi * self.R**2)

    def params(self):
        return {"R": self.R}


class PartialWave(ScatteringModel):
    """Exact amplitude from a phase-shift table."""

    kind = "partial_wave"

    def __init__(self, table: PhaseShiftTable):
        self.table = table

    def amplitude_pc(self, p, cos_theta):
        return self.table.amplitude(p, cos_theta)

    def amplitude(self, p_in, p_out):
        p, c = self._p_cos(p_in, p_out)
        return self.table.amplitude(p, c)

    def cross_section(self, p):
        return self.table.total_cross_section(p)

    def breakpoints(self):
        return self.table.p_grid

    def params(self):
        return {"table": self.table.fingerprint(), **self.table.meta}


class BornGaussian(ScatteringModel):
    """Born approximation of the Gaussian well; depends only on the transfer."""

    kind = "born_gaussian"
    elastic_only = False

    def __init__(self, V0: float, d: float, m_star: float, hbar: float = 1.0):
        self.V0, self.d, self.m_star, self.hbar = float(V0), float(d), float(m_star), float(hbar)
        self.f0 = math.sqrt(math.pi / 2.0) * 2.0 * self.m_star * self.V0 * self.d**3 / self.hbar**2

    def amplitude_pc(self, p, cos_theta):
        return born_amplitude_gaussian(self.V0, self.d, self.m_star, p, cos_theta, self.hbar)

    def amplitude(self, p_in, p_out):
        q2 = np.sum(np.square(np.asarray(p_out, float) - np.asarray(p_in, float)), axis=-1)
        return self.f0 * np.exp(-(self.d**2) * q2 / (2.0 * self.hbar**2))

    def cross_section(self, p):
        # 2 pi f0^2 int_{-1}^{1} exp(-2 a (1 - c)) dc, a = d^2 p^2 / hbar^2
        p = np.asarray(p, dtype=float)
        a = self.d**2 * p**2 / self.hbar**2
        small = a < 1e-8
        safe = np.where(small, 1.0, a)
        frac = np.where(small, 2.0 - 4.0 * a, -np.expm1(-4.0 * safe) / (2.0 * safe))
        return 2.0 * np.pi * self.f0**2 * frac

    def params(self):
        return {"V0": self.V0, "d": self.d, "m_star": self.m_star, "hbar": self.hbar}


def amplitude(model: ScatteringModel, p_in, p_out):
    """Dispatch f(p_out <- p_in) to ``model``."""
    return model.amplitude(p_in, p_out)


def gaussian_models(V0, d, env, l_max=30, p_grid=None, table=None):
    """(exact, Born) model pair for the Gaussian well in environment ``env``."""
    if table is None:
        table = gaussian_phase_table(V0, d, env.m_star, env.hbar, l_max=l_max, p_grid=p_grid)
    return PartialWave(table), BornGaussian(V0, d, env.m_star, env.hbar)
