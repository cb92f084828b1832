"""Quantum-jump trajectories in the momentum basis.

A trajectory is a superposition of N momentum eigenstates. Between jumps the
amplitudes evolve under the free energy and decay with the branch rates;
a jump kicks every branch by the same momentum transfer and reweights the
amplitudes. Ensembles are run in fixed blocks of trajectories, each block
vectorized over its members, with one random stream per trajectory.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .rates import SIGMA_K, SIGMA_W, RateTable, collision_momenta, plane_basis, split_along
from .scattering import BornGaussian, ContractError, HardSphereSWave, NumericalError, PartialWave, ScatteringModel
from .units import GasEnvironment


@dataclass
class MHSettings:
    """Metropolis-Hastings chain settings for the jump momenta.

    ``init`` chooses the chain start: ``collision`` draws an (approximately)
    exact classical collision, ``proposal`` draws from the Gaussian
    importance proposals.
    """

    burn_in: int = 200
    thinning: int = 50
    target_accept: float = 0.35
    adapt_every: int = 25
    init: str = "collision"
    accept_band: tuple = (0.1, 0.7)

    def __post_init__(self):
        if self.burn_in < 0 or self.thinning < 1:
            raise ContractError("burn_in must be >= 0 and thinning >= 1")
        if self.init not in ("collision", "proposal"):
            raise ContractError(f"unknown chain initialization {self.init!r}")


@dataclass
class TrajectoryState:
    alphas: np.ndarray
    momenta: np.ndarray
    t: float = 0.0
    rates: np.ndarray | None = None

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=complex).reshape(-1)
        self.momenta = np.asarray(self.momenta, dtype=float).reshape(-1, 3)
        if self.alphas.size != self.momenta.shape[0]:
            raise ContractError("one amplitude per momentum required")

    @property
    def n_branches(self) -> int:
        return self.alphas.size

    def norm(self) -> float:
        return float(np.sum(np.abs(self.alphas) ** 2))

    def with_rates(self, table: RateTable) -> "TrajectoryState":
        return replace(self, rates=table.rates_for(self.momenta))

    def copy(self) -> "TrajectoryState":
        r = None if self.rates is None else self.rates.copy()
        return TrajectoryState(self.alphas.copy(), self.momenta.copy(), self.t, r)


@dataclass
class JumpParams:
    K: np.ndarray
    W_perp: np.ndarray
    branch: int = 0
    acceptance: float = float("nan")


# ---------------------------------------------------------------------------
# deterministic drift and waiting times (batched over leading axis)


def kinetic_phase_rate(U, env: GasEnvironment):
    """E / hbar for scaled momenta U (..., 3)."""
    return 0.5 * env.M * env.v_beta**2 * np.sum(np.square(U), axis=-1) / env.hbar


def _drift(alphas, omega, rates, tau):
    """Advance (B, N) amplitudes by tau (B,); returns normalized amplitudes and norm^2."""
    tau = np.asarray(tau, dtype=float)[..., None]
    # decay relative to the slowest branch keeps the numbers representable
    gmin = np.min(rates, axis=-1, keepdims=True)
    scale = np.exp(-0.5 * tau * (rates - gmin))
    out = alphas * scale * np.exp(-1j * omega * tau)
    n2 = np.sum(np.abs(out) ** 2, axis=-1)
    out = out / np.sqrt(n2)[..., None]
    norm2 = n2 * np.exp(-tau[..., 0] * gmin[..., 0])
    return out, norm2


def _waiting_times(weights, rates, eta, rtol=1e-12, max_iter=200):
    """Solve sum_i w_i exp(-tau G_i) = eta for each row; inf when no jump occurs.

    Newton from the Jensen lower bound -ln(eta) / sum w G: the left side is
    convex and decreasing, so the iterates rise monotonically to the root.
    """
    weights = np.atleast_2d(weights)
    rates = np.atleast_2d(rates)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    mean_rate = np.sum(weights * rates, axis=-1)
    zero_mass = np.sum(np.where(rates > 0, 0.0, weights), axis=-1)
    never = (mean_rate <= 0) | (zero_mass >= eta)
    tau = np.full(eta.shape, np.inf)
    live = ~never
    if not np.any(live):
        return tau
    w, g, e = weights[live], rates[live], eta[live]
    t = -np.log(e) / np.sum(w * g, axis=-1)
    for _ in range(max_iter):
        ex = w * np.exp(-t[:, None] * g)
        phi = np.sum(ex, axis=-1) - e
        dphi = -np.sum(g * ex, axis=-1)
        step = -phi / dphi
        t = t + step
        # near eta = 1 the residual hits roundoff before the step does
        small = np.abs(phi) <= 8.0 * np.finfo(float).eps * e
        if np.all((np.abs(step) <= rtol * np.maximum(t, 1e-300)) | small):
            break
    else:
        raise NumericalError("waiting-time iteration did not converge")
    tau[live] = t
    return tau


# ---------------------------------------------------------------------------
# jump momenta


class JumpSampler:
    """Samples (K, W_perp) for a jump seeded by branch momentum U.

    The target density is
    (1/|K|) |f(p_out, p_in)|^2 exp(-W^2 - (U_par + |K|/2)^2).
    """

    def __init__(self, env: GasEnvironment, model: ScatteringModel, mh: MHSettings | None = None):
        self.env = env
        self.model = model
        self.mh = mh or MHSettings()
        self.s = env.m_star * env.v_beta
        self._sigma_cap = None
        self._angle_table = None
        if isinstance(model, PartialWave):
            self._build_angle_table()

    # densities ------------------------------------------------------------

    def log_target(self, K, uv, U):
        kn = np.linalg.norm(K, axis=-1)
        e1, e2 = plane_basis(K)
        W = uv[..., 0:1] * e1 + uv[..., 1:2] * e2
        upar, _ = split_along(U, K)
        p_out, p_in = collision_momenta(W, U, K, self.env)
        with np.errstate(divide="ignore"):
            lf = np.log(self.model.abs2(p_in, p_out))
        return lf - np.log(kn) - np.sum(uv**2, axis=-1) - (upar + 0.5 * kn) ** 2

    # chain initializers ---------------------------------------------------

    def _flux_cap(self, r_hi):
        """Upper bound of r sigma(s r) on [0, r_hi] (tabulated running maximum, 10% margin)."""
        m = self.model
        if isinstance(m, (HardSphereSWave, BornGaussian)):
            # sigma is non-increasing in p for both
            return float(r_hi * m.cross_section(0.0))
        if self._sigma_cap is None or self._sigma_cap[0][-1] < r_hi:
            top = max(r_hi, 1.0) * 2.0
            grid = np.linspace(0.0, top, 4001)
            run = np.maximum.accumulate(grid * m.cross_section(self.s * grid))
            self._sigma_cap = (grid, run)
        grid, run = self._sigma_cap
        return float(1.1 * run[min(np.searchsorted(grid, r_hi) + 1, grid.size - 1)])

    def _build_angle_table(self, n_p=400, n_c=513):
        p_hi = self.s * 40.0
        pg = np.geomspace(1e-3, p_hi, n_p)
        cg = np.linspace(-1.0, 1.0, n_c)
        f2 = np.abs(self.model.amplitude_pc(pg[:, None], cg[None, :])) ** 2
        cdf = np.concatenate([np.zeros((n_p, 1)), np.cumsum(0.5 * (f2[:, 1:] + f2[:, :-1]), axis=1)], axis=1)
        cdf /= cdf[:, -1:]
        self._angle_table = (pg, cg, cdf)

    def _sample_cos(self, p, u):
        m = self.model
        if isinstance(m, HardSphereSWave):
            return 2.0 * u - 1.0
        if isinstance(m, BornGaussian):
            a = 2.0 * m.d**2 * p**2 / m.hbar**2
            small = a < 1e-10
            a_s = np.where(small, 1.0, a)
            x = -np.log1p(-u * (-np.expm1(-2.0 * a_s))) / a_s
            return 1.0 - np.where(small, 2.0 * u, x)
        if self._angle_table is None:
            self._build_angle_table()
        pg, cg, cdf = self._angle_table
        idx = np.clip(np.searchsorted(np.log(pg), np.log(np.maximum(p, 1e-300))), 0, pg.size - 1)
        out = np.empty_like(u)
        for j in range(u.size):
            out[j] = np.interp(u[j], cdf[idx[j]], cg)
        return out

    def collision_draw(self, U, rngs):
        """Classical collision draw mapped to (K, W_perp) for each chain.

        The gas velocity is drawn from the Maxwellian weighted by
        |v - V| sigma(m* |v - V|) by rejection, the outgoing direction from
        |f|^2 at fixed energy. Exact for hard spheres and the Born model;
        for tabulated phase shifts the angular law is taken from the nearest
        momentum node.
        """
        J = U.shape[0]
        umag = np.linalg.norm(U, axis=-1)
        r_cap = umag + 6.0
        caps = np.array([self._flux_cap(r) for r in r_cap])
        y = np.empty((J, 3))
        todo = np.arange(J)
        n_cand = 32
        while todo.size:
            cand = np.stack([rngs[j].normal(0.0, SIGMA_W, size=(n_cand, 3)) for j in todo])
            unif = np.stack([rngs[j].random(n_cand) for j in todo])
            r = np.linalg.norm(cand - U[todo, None, :], axis=-1)
            acc = unif * caps[todo, None] < r * self.model.cross_section(self.s * r)
            hit = np.any(acc, axis=1)
            first = np.argmax(acc, axis=1)
            y[todo[hit]] = cand[hit, first[hit]]
            todo = todo[~hit]
        angles = np.stack([rngs[j].random(2) for j in range(J)])
        p_in = self.s * (y - U)
        pm = np.linalg.norm(p_in, axis=-1)
        c = np.clip(self._sample_cos(pm, angles[:, 0]), -1.0, 1.0)
        phi = 2.0 * math.pi * angles[:, 1]
        e1, e2 = plane_basis(p_in)
        sn = np.sqrt(1.0 - c**2)
        n_out = (c[:, None] * p_in / pm[:, None]) + sn[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        p_out = pm[:, None] * n_out
        K = (p_in - p_out) / self.s
        _, uperp = split_along(U, K)
        W = 0.5 * (p_in + p_out) / self.s + uperp
        # remove rounding residue so that W is exactly in the plane
        khat = K / np.linalg.norm(K, axis=-1, keepdims=True)
        W -= np.sum(W * khat, axis=-1, keepdims=True) * khat
        return K, W

    def proposal_draw(self, rngs):
        K = np.stack([rngs[j].normal(0.0, SIGMA_K, size=3) for j in range(len(rngs))])
        uv = np.stack([rngs[j].normal(0.0, SIGMA_W, size=2) for j in range(len(rngs))])
        return K, uv

    # chain ------------------------------------------------------------------

    def sample(self, U, rngs):
        """Run one chain per row of U (J, 3); returns K, W_perp (J, 3) and acceptance (J,)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        J = U.shape[0]
        mh = self.mh
        if mh.init == "collision":
            K, W = self.collision_draw(U, rngs)
            e1, e2 = plane_basis(K)
            uv = np.stack([np.sum(W * e1, axis=-1), np.sum(W * e2, axis=-1)], axis=-1)
        else:
            K, uv = self.proposal_draw(rngs)
        n_steps = mh.burn_in + mh.thinning
        # step sizes adapt in the first half of burn-in only: an adaptation that
        # keeps reacting to the chain position biases the sampled distribution
        adapt_until = mh.burn_in // 2
        z = np.stack([rngs[j].standard_normal((n_steps, 5)) for j in range(J)], axis=1)
        lu = np.log(np.stack([rngs[j].random(n_steps) for j in range(J)], axis=1))
        base = np.array([SIGMA_K] * 3 + [SIGMA_W] * 2) * (2.38 / math.sqrt(5.0))
        scale = np.ones(J)
        lp = self.log_target(K, uv, U)
        window = np.zeros(J)
        accepted = np.zeros(J)
        for step in range(n_steps):
            prop = np.concatenate([K, uv], axis=1) + scale[:, None] * base * z[step]
            Kp, uvp = prop[:, :3], prop[:, 3:]
            ok = np.linalg.norm(Kp, axis=-1) > 1e-12
            lpp = np.where(ok, self.log_target(np.where(ok[:, None], Kp, 1.0), uvp, U), -np.inf)
            acc = lu[step] < lpp - lp
            K = np.where(acc[:, None], Kp, K)
            uv = np.where(acc[:, None], uvp, uv)
            lp = np.where(acc, lpp, lp)
            if step < adapt_until:
                window += acc
                if (step + 1) % mh.adapt_every == 0:
                    rate = window / mh.adapt_every
                    scale *= np.exp(rate - mh.target_accept)
                    window[:] = 0.0
            elif step >= mh.burn_in:
                accepted += acc
        e1, e2 = plane_basis(K)
        W = uv[:, 0:1] * e1 + uv[:, 1:2] * e2
        return K, W, accepted / mh.thinning


def sample_jump_momenta(U_i, env, model, mh: MHSettings | None = None, rng=None, branch=0) -> JumpParams:
    rng = np.random.default_rng() if rng is None else rng
    sampler = JumpSampler(env, model, mh)
    K, W, acc = sampler.sample(np.asarray(U_i, dtype=float)[None, :], [rng])
    lo, hi = sampler.mh.accept_band
    if not lo <= acc[0] <= hi:
        warnings.warn(f"Metropolis-Hastings acceptance {acc[0]:.2f} outside [{lo}, {hi}]", RuntimeWarning)
    return JumpParams(K[0], W[0], branch, float(acc[0]))


def _jump_factors(K, W, U, env, model):
    """Complex factors x_i (unnormalized, scaled by the largest |x_i|) for branches U (J, N, 3)."""
    Kb = np.broadcast_to(K[:, None, :], U.shape)
    Wb = np.broadcast_to(W[:, None, :], U.shape)
    upar, _ = split_along(U, Kb)
    p_out, p_in = collision_momenta(Wb, U, Kb, env)
    f = np.asarray(model.amplitude(p_in, p_out), dtype=complex)
    f = np.broadcast_to(f, upar.shape)
    kn = np.linalg.norm(K, axis=-1)[:, None]
    with np.errstate(divide="ignore"):
        logmag = np.log(np.abs(f)) - 0.5 * (0.5 * kn + upar) ** 2
    top = np.max(logmag, axis=-1, keepdims=True)
    phase = np.where(np.abs(f) > 0, f / np.where(np.abs(f) > 0, np.abs(f), 1.0), 0.0)
    return phase * np.exp(logmag - top)


def _apply_jump(alphas, K, W, U, env, model):
    x = _jump_factors(K, W, U, env, model)
    new = alphas * x
    n2 = np.sum(np.abs(new) ** 2, axis=-1)
    if np.any(n2 == 0) or not np.all(np.isfinite(n2)):
        raise NumericalError("jump annihilated the state")
    return new / np.sqrt(n2)[:, None]


# ---------------------------------------------------------------------------
# single-trajectory operations


def deterministic_step(state: TrajectoryState, tau: float, env: GasEnvironment, table: RateTable | None = None):
    if tau < 0:
        raise ContractError("tau must be non-negative")
    rates = state.rates if state.rates is not None else table.rates_for(state.momenta)
    omega = kinetic_phase_rate(state.momenta, env)
    a, _ = _drift(state.alphas[None], omega[None], rates[None], np.array([tau]))
    return TrajectoryState(a[0], state.momenta.copy(), state.t + tau, rates.copy())


def sample_waiting_time(state: TrajectoryState, eta: float, env: GasEnvironment | None = None) -> float:
    if not 0.0 < eta < 1.0:
        raise ContractError("eta must lie in (0, 1)")
    if state.rates is None:
        raise ContractError("state has no rates attached")
    w = np.abs(state.alphas) ** 2
    return float(_waiting_times(w[None], state.rates[None], np.array([eta]))[0])


def select_jump_branch(state: TrajectoryState, rng) -> int:
    p = np.abs(state.alphas) ** 2 * state.rates
    total = p.sum()
    if not total > 0:
        raise ContractError("no branch can jump: all weighted rates vanish")
    return int(min(np.searchsorted(np.cumsum(p) / total, rng.random(), side="right"), p.size - 1))


def apply_jump(state: TrajectoryState, jp: JumpParams, env, model, table: RateTable | None = None):
    U = state.momenta
    a = _apply_jump(state.alphas[None], jp.K[None], jp.W_perp[None], U[None], env, model)[0]
    U_new = U + (env.m_star / env.M) * jp.K
    rates = table.rates_for(U_new) if table is not None else None
    return TrajectoryState(a, U_new, state.t, rates)


# ---------------------------------------------------------------------------
# ensembles


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a run seeded by ``master_seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


@dataclass
class EnsembleResult:
    """Snapshots of all trajectories.

    Branch momenta are ``base_momenta + shifts[k, b]`` because every jump
    kicks all branches of a trajectory by the same amount.
    """

    times: np.ndarray
    alphas: np.ndarray  # (T, B, N)
    shifts: np.ndarray  # (T, B, 3)
    base_momenta: np.ndarray  # (N, 3)
    n_jumps: np.ndarray  # (T, B) cumulative jump counts
    diagnostics: dict = field(default_factory=dict)
    events: np.ndarray | None = None  # rows (trajectory, t, |K|, branch)

    @property
    def n_trajectories(self) -> int:
        return self.alphas.shape[1]

    @property
    def n_branches(self) -> int:
        return self.alphas.shape[2]

    def momenta(self, k: int) -> np.ndarray:
        return self.base_momenta[None, :, :] + self.shifts[k][:, None, :]

    def state(self, k: int, b: int) -> TrajectoryState:
        return TrajectoryState(self.alphas[k, b].copy(), self.momenta(k)[b], float(self.times[k]))

    def time_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[idx], t, rel_tol=1e-12, abs_tol=1e-12):
            raise ContractError(f"no snapshot at t={t}")
        return idx


def _run_block(initial: TrajectoryState, times, env, model, table, mh, rngs, log_events, index0):
    B = len(rngs)
    N = initial.n_branches
    T = times.size
    base = initial.momenta
    sampler = JumpSampler(env, model, mh)
    kick = env.m_star / env.M

    alphas = np.tile(initial.alphas, (B, 1))
    shift = np.zeros((B, 3))
    t = np.zeros(B)
    eta = np.array([1.0 - r.random() for r in rngs])
    nxt = np.zeros(B, dtype=int)
    jumps = np.zeros(B, dtype=int)
    rates = np.tile(table.rates_for(base), (B, 1))

    out_a = np.empty((T, B, N), dtype=complex)
    out_s = np.empty((T, B, 3))
    out_j = np.empty((T, B), dtype=int)
    acc_sum, acc_n, acc_bad = 0.0, 0, 0
    events = []

    while True:
        act = np.nonzero(nxt < T)[0]
        if act.size == 0:
            break
        U = base[None] + shift[act][:, None, :]
        omega = kinetic_phase_rate(U, env)
        w = np.abs(alphas[act]) ** 2
        tau = _waiting_times(w, rates[act], eta[act])
        dt_snap = times[nxt[act]] - t[act]
        snap = tau >= dt_snap

        if np.any(snap):
            idx = act[snap]
            a, n2 = _drift(alphas[idx], omega[snap], rates[idx], dt_snap[snap])
            alphas[idx] = a
            t[idx] = times[nxt[idx]]
            eta[idx] = np.minimum(eta[idx] / n2, 1.0)
            out_a[nxt[idx], idx] = a
            out_s[nxt[idx], idx] = shift[idx]
            out_j[nxt[idx], idx] = jumps[idx]
            nxt[idx] += 1

        jm = ~snap
        if np.any(jm):
            idx = act[jm]
            a, _ = _drift(alphas[idx], omega[jm], rates[idx], tau[jm])
            t[idx] += tau[jm]
            p = np.abs(a) ** 2 * rates[idx]
            cum = np.cumsum(p, axis=1)
            draws = np.array([rngs[b].random() for b in idx])
            branch = np.minimum(np.sum(cum < (draws * cum[:, -1])[:, None], axis=1), N - 1)
            Ub = U[jm]
            Ui = Ub[np.arange(idx.size), branch]
            K, W, acc = sampler.sample(Ui, [rngs[b] for b in idx])
            alphas[idx] = _apply_jump(a, K, W, Ub, env, model)
            shift[idx] += kick * K
            rates[idx] = table.rates_for(base[None] + shift[idx][:, None, :])
            jumps[idx] += 1
            eta[idx] = np.array([1.0 - rngs[b].random() for b in idx])
            acc_sum += float(acc.sum())
            acc_n += acc.size
            lo, hi = mh.accept_band
            acc_bad += int(np.sum((acc < lo) | (acc > hi)))
            if log_events:
                events.append(np.column_stack([idx + index0, t[idx], np.linalg.norm(K, axis=1), branch]))

    ev = np.concatenate(events) if events else np.empty((0, 4))
    return out_a, out_s, out_j, (acc_sum, acc_n, acc_bad), ev


def evolve_ensemble(
    initial: TrajectoryState,
    times,
    env: GasEnvironment,
    model: ScatteringModel,
    table: RateTable,
    n_trajectories: int,
    seed: int,
    mh: MHSettings | None = None,
    threads: int = 1,
    block_size: int = 256,
    log_events: bool = False,
) -> EnsembleResult:
    """Evolve ``n_trajectories`` copies of ``initial`` and store snapshots at ``times``.

    Trajectory b draws only from its own stream, and blocks are fixed
    independent of ``threads``, so results are identical for any thread count.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0 or np.any(np.diff(times) < 0):
        raise ContractError("snapshot times must be sorted and non-negative")
    if n_trajectories < 1:
        raise ContractError("need at least one trajectory")
    mh = mh or MHSettings()
    n0 = initial.norm()
    if abs(n0 - 1.0) > 1e-10:
        raise ContractError(f"initial state not normalized (norm^2 = {n0})")
    blocks = [range(s, min(s + block_size, n_trajectories)) for s in range(0, n_trajectories, block_size)]

    def work(block):
        rngs = [trajectory_rng(seed, i) for i in block]
        return _run_block(initial, times, env, model, table, mh, rngs, log_events, block.start)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    acc_sum = sum(p[3][0] for p in parts)
    acc_n = sum(p[3][1] for p in parts)
    acc_bad = sum(p[3][2] for p in parts)
    diagnostics = {
        "mh_mean_acceptance": acc_sum / acc_n if acc_n else float("nan"),
        "mh_chains": acc_n,
        "mh_out_of_band": acc_bad,
    }
    if acc_n and acc_bad > 0.01 * acc_n:
        warnings.warn(
            f"{acc_bad} of {acc_n} Metropolis-Hastings chains ended with acceptance outside {mh.accept_band}",
            RuntimeWarning,
        )
    return EnsembleResult(
        times=times,
        alphas=np.concatenate([p[0] for p in parts], axis=1),
        shifts=np.concatenate([p[1] for p in parts], axis=1),
        base_momenta=initial.momenta.copy(),
        n_jumps=np.concatenate([p[2] for p in parts], axis=1),
        diagnostics=diagnostics,
        events=np.concatenate([p[4] for p in parts]) if log_events else None,
    )


def evolve_trajectory(
    initial: TrajectoryState,
    t_final: float,
    snapshot_times,
    env,
    model,
    table: RateTable,
    mh: MHSettings | None = None,
    rng=None,
):
    """Evolve one trajectory and return its states at ``snapshot_times``."""
    snaps = np.asarray(snapshot_times, dtype=float)
    if snaps.size and (snaps[-1] > t_final or snaps[0] < 0):
        raise ContractError("snapshot times must lie within [0, t_final]")
    rng = np.random.default_rng() if rng is None else rng
    a, s, j, _, _ = _run_block(initial, snaps, env, model, table, mh or MHSettings(), [rng], False, 0)
    states = []
    for k, tk in enumerate(snaps):
        U = initial.momenta + s[k, 0]
        states.append(TrajectoryState(a[k, 0], U, float(tk), table.rates_for(U)))
    return states
