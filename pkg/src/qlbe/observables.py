"""Ensemble estimators computed from stored trajectory snapshots."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import EnsembleResult
from .scattering import ContractError
from .units import GasEnvironment


class GridError(ValueError):
    """The position grid does not hold the probability mass."""


@dataclass
class ObservableSeries:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if not (self.times.shape == self.values.shape == self.stderr.shape):
            raise ContractError("times, values and stderr must have equal length")
        if np.any(self.stderr < 0):
            raise ContractError("negative standard error")

    def save(self, path):
        header = {"kind": self.kind, "meta": self.meta}
        data = np.column_stack([self.times, np.real(self.values), self.stderr])
        with Path(path).open("w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True, default=_json_default) + "\n")
            fh.write("time,value,stderr\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "ObservableSeries":
        with Path(path).open() as fh:
            header = json.loads(fh.readline()[2:])
            fh.readline()
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], header["kind"], header.get("meta", {}))


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


def _mean_err(x, axis=-1):
    n = x.shape[axis]
    m = np.mean(x, axis=axis)
    e = np.std(x, axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, e


# ---------------------------------------------------------------------------
# momentum space


def momentum_coherence(ens: EnsembleResult) -> ObservableSeries:
    """C(t) = 2 E|alpha_1 alpha_2^*| for two-branch trajectories."""
    if ens.n_branches != 2:
        raise ContractError(f"coherence needs exactly two branches, got {ens.n_branches}")
    c = 2.0 * np.abs(ens.alphas[:, :, 0] * np.conj(ens.alphas[:, :, 1]))
    m, e = _mean_err(c)
    return ObservableSeries(ens.times, m, e, "coherence")


def coherence_element(ens: EnsembleResult) -> ObservableSeries:
    """|<U_1(0)|rho(t)|U_2(0)>| relative to its initial value.

    Only trajectories that have not jumped still hold the initial momenta,
    so the element is the ensemble mean of alpha_1 alpha_2^* restricted to
    jump-free trajectories.
    """
    if ens.n_branches != 2:
        raise ContractError(f"coherence needs exactly two branches, got {ens.n_branches}")
    prod = ens.alphas[:, :, 0] * np.conj(ens.alphas[:, :, 1]) * (ens.n_jumps == 0)
    m_re, e_re = _mean_err(prod.real)
    m_im, e_im = _mean_err(prod.imag)
    ref = abs(ens.alphas[0, 0, 0] * np.conj(ens.alphas[0, 0, 1]))
    val = np.hypot(m_re, m_im) / ref
    err = np.hypot(e_re, e_im) / ref
    return ObservableSeries(ens.times, val, err, "coherence_element")


def mean_square_momentum(ens: EnsembleResult) -> ObservableSeries:
    """E[sum_i |alpha_i|^2 U_i^2] per snapshot."""
    vals = np.empty((ens.times.size, ens.n_trajectories))
    for k in range(ens.times.size):
        U2 = np.sum(ens.momenta(k) ** 2, axis=-1)
        vals[k] = np.sum(np.abs(ens.alphas[k]) ** 2 * U2, axis=-1)
    m, e = _mean_err(vals)
    return ObservableSeries(ens.times, m, e, "energy")


# ---------------------------------------------------------------------------
# position space


def _check_factorized(ens: EnsembleResult, axis: int):
    other = [a for a in range(3) if a != axis]
    base = ens.base_momenta[:, other]
    if not np.allclose(base, base[0], rtol=0.0, atol=1e-12):
        raise ContractError("branches must share the momentum components transverse to the axis")


def lattice_spacing(ens: EnsembleResult, axis: int = 0) -> float | None:
    """Smallest spacing of the branch momenta along ``axis`` (None for one branch)."""
    u = np.unique(np.round(ens.base_momenta[:, axis], 12))
    if u.size < 2:
        return None
    return float(np.min(np.diff(u)))


def wavefunctions(ens: EnsembleResult, k: int, S, env: GasEnvironment, axis: int = 0, normalize=True):
    """psi_b(S) = norm * sum_j alpha_bj exp(i c S U_bj) for every trajectory b.

    With ``normalize`` the amplitudes are scaled so that |psi|^2 integrates to
    one over a period of the momentum lattice.
    """
    _check_factorized(ens, axis)
    S = np.asarray(S, dtype=float)
    c = env.position_phase
    # all branches of a trajectory share the jump shift, so the lattice part
    # is a single matrix product and the shift a phase per trajectory
    basis = np.exp(1j * c * np.outer(ens.base_momenta[:, axis], S))
    psi = ens.alphas[k] @ basis
    psi *= np.exp(1j * c * np.outer(ens.shifts[k][:, axis], S))
    if normalize:
        du = lattice_spacing(ens, axis)
        if du is not None:
            psi *= math.sqrt(c * du / (2.0 * math.pi))
    return psi


def position_density_matrix(ens: EnsembleResult, t, S, S2=None, env=None, axis=0, normalize=True):
    """rho(S, S') along ``axis`` at snapshot time t."""
    if env is None:
        raise ContractError("environment required for the position phase")
    k = ens.time_index(t)
    psi = wavefunctions(ens, k, S, env, axis, normalize)
    psi2 = psi if S2 is None else wavefunctions(ens, k, S2, env, axis, normalize)
    return psi.T @ psi2.conj() / ens.n_trajectories


def density_diagonal(ens: EnsembleResult, t, S, env, axis=0, normalize=True):
    """(rho(S, S), stderr) along ``axis``."""
    k = ens.time_index(t)
    p = np.abs(wavefunctions(ens, k, S, env, axis, normalize)) ** 2
    return _mean_err(p, axis=0)


def offdiagonal_series(ens: EnsembleResult, s1, s2, env, axis=0) -> ObservableSeries:
    """|rho(s1, s2, t)| for every snapshot, with stderr."""
    vals = np.empty(ens.times.size)
    errs = np.empty(ens.times.size)
    for k in range(ens.times.size):
        a = wavefunctions(ens, k, [s1], env, axis)[:, 0]
        b = wavefunctions(ens, k, [s2], env, axis)[:, 0]
        prod = a * np.conj(b)
        m_re, e_re = _mean_err(prod.real)
        m_im, e_im = _mean_err(prod.imag)
        vals[k] = math.hypot(m_re, m_im)
        errs[k] = math.hypot(e_re, e_im)
    return ObservableSeries(ens.times, vals, errs, "density_slice", {"s1": s1, "s2": s2, "axis": axis})


def spatial_variance(ens: EnsembleResult, S, env, axis=0, mass_tol=1e-3) -> ObservableSeries:
    """Variance of the position marginal (units of Lambda_th^2) on grid S.

    Per-trajectory grid moments give the variance by the delta method.
    """
    S = np.asarray(S, dtype=float)
    du = lattice_spacing(ens, axis)
    if du is not None and S[-1] - S[0] > 2.0 * math.pi / (env.position_phase * du):
        raise GridError("position grid is wider than one period of the momentum lattice")
    w = np.gradient(S)
    vals = np.empty(ens.times.size)
    errs = np.empty(ens.times.size)
    for k in range(ens.times.size):
        p = np.abs(wavefunctions(ens, k, S, env, axis)) ** 2 * w
        m0 = p.sum(axis=1)
        mass = m0.mean()
        if abs(1.0 - mass) > mass_tol:
            raise GridError(f"grid holds probability {mass:.6f} at t={ens.times[k]}")
        m1 = p @ S
        m2 = p @ S**2
        B = m0.size
        a0, a1, a2 = m0.mean(), m1.mean(), m2.mean()
        var = a2 / a0 - (a1 / a0) ** 2
        # gradient of var wrt (a0, a1, a2), combined with the sample covariance
        g = np.array([-a2 / a0**2 + 2 * a1**2 / a0**3, -2 * a1 / a0**2, 1.0 / a0])
        cov = np.cov(np.vstack([m0, m1, m2])) / B if B > 1 else np.zeros((3, 3))
        vals[k] = var
        errs[k] = math.sqrt(max(g @ cov @ g, 0.0))
    return ObservableSeries(ens.times, vals, errs, "variance", {"axis": axis})


def fringe_visibility(S, diag, center=None) -> float:
    """(max - min) / (max + min) around the central maximum; nan if no fringe.

    The central maximum is the local maximum closest to ``center`` (default:
    middle of the grid); the minimum is the deeper of the two adjacent minima.
    """
    S = np.asarray(S, dtype=float)
    d = np.asarray(diag, dtype=float)
    if d.size < 3:
        return float("nan")
    inner = np.arange(1, d.size - 1)
    peaks = inner[(d[1:-1] >= d[:-2]) & (d[1:-1] >= d[2:]) & ((d[1:-1] > d[:-2]) | (d[1:-1] > d[2:]))]
    if peaks.size == 0:
        return float("nan")
    c0 = 0.5 * (S[0] + S[-1]) if center is None else center
    ip = peaks[np.argmin(np.abs(S[peaks] - c0))]
    mins = []
    j = ip
    while j > 0 and d[j - 1] <= d[j]:
        j -= 1
    if 0 < j:
        mins.append(d[j])
    j = ip
    while j < d.size - 1 and d[j + 1] <= d[j]:
        j += 1
    if j < d.size - 1:
        mins.append(d[j])
    if not mins:
        return float("nan")
    dmin = min(mins)
    return float((d[ip] - dmin) / (d[ip] + dmin))


# ---------------------------------------------------------------------------
# fits


@dataclass
class RateFit:
    rate: float
    error: float
    r2: float
    flagged: bool
    window: tuple


def fit_decay_rate(times, values, window=None, stderr=None, r2_min=0.9) -> RateFit:
    """Least-squares slope of -log(values) over ``window`` (inclusive bounds).

    With ``stderr`` the points are weighted by the propagated log errors.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = np.ones(t.size, dtype=bool)
    if window is not None:
        sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    sel &= v > 0
    if sel.sum() < 2:
        raise ContractError("need at least two positive points in the fit window")
    x, y = t[sel], -np.log(v[sel])
    if stderr is not None:
        s = np.asarray(stderr, dtype=float)[sel] / v[sel]
        w = 1.0 / np.maximum(s, 1e-12) ** 2
        if not np.all(np.isfinite(w)) or np.all(s == 0):
            w = np.ones_like(x)
    else:
        w = np.ones_like(x)
    W = w.sum()
    xm, ym = (w @ x) / W, (w @ y) / W
    sxx = w @ (x - xm) ** 2
    slope = (w @ ((x - xm) * (y - ym))) / sxx
    resid = y - ym - slope * (x - xm)
    dof = max(x.size - 2, 1)
    if stderr is not None and np.any(np.asarray(stderr)[sel] > 0):
        chi2 = (w @ resid**2) / dof
        err = math.sqrt(max(chi2, 1.0) / sxx)
    else:
        err = math.sqrt((w @ resid**2) / dof / sxx) if x.size > 2 else 0.0
    ss_tot = w @ (y - ym) ** 2
    r2 = 1.0 - (w @ resid**2) / ss_tot if ss_tot > 0 else 1.0
    win = (float(x[0]), float(x[-1]))
    return RateFit(float(slope), float(err), float(r2), bool(r2 < r2_min), win)


def extract_localization_rate(series: ObservableSeries, window=None) -> RateFit:
    """Decay rate of an off-diagonal magnitude series over the fit window."""
    return fit_decay_rate(series.times, series.values, window, series.stderr)


def save_matrix(path, S, S2, rho, meta=None):
    """Dense text matrix: real part, then imaginary part, with a JSON grid header."""
    header = {"S": np.asarray(S).tolist(), "S2": np.asarray(S2).tolist(), "meta": meta or {}}
    with Path(path).open("w") as fh:
        fh.write("# " + json.dumps(header, default=_json_default) + "\n")
        fh.write("# real\n")
        np.savetxt(fh, np.real(rho), delimiter=",", fmt="%.12g")
        fh.write("# imag\n")
        np.savetxt(fh, np.imag(rho), delimiter=",", fmt="%.12g")


def load_matrix(path):
    with Path(path).open() as fh:
        header = json.loads(fh.readline()[2:])
        rest = fh.read().split("# imag\n")
    re = np.loadtxt(rest[0].replace("# real\n", "").splitlines(), delimiter=",", ndmin=2)
    im = np.loadtxt(rest[1].splitlines(), delimiter=",", ndmin=2)
    return np.asarray(header["S"]), np.asarray(header["S2"]), re + 1j * im
