import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlbe.engine import (
    EnsembleResult,
    JumpParams,
    JumpSampler,
    MHSettings,
    TrajectoryState,
    _drift,
    _waiting_times,
    apply_jump,
    deterministic_step,
    evolve_ensemble,
    evolve_trajectory,
    kinetic_phase_rate,
    sample_jump_momenta,
    sample_waiting_time,
    select_jump_branch,
    trajectory_rng,
)
from qlbe.rates import exact_rate_table, split_along
from qlbe.scattering import ContractError, HardSphereSWave, gaussian_models
from qlbe.units import gaussian_units, hard_sphere_units


@pytest.fixture(scope="module")
def hs():
    env = hard_sphere_units(1.0)
    model = HardSphereSWave()
    return env, model, exact_rate_table(env, model)


@pytest.fixture(scope="module")
def heavy():
    env = hard_sphere_units(100.0)
    model = HardSphereSWave()
    return env, model, exact_rate_table(env, model)


def _state(rng, n, table, spread=0.5):
    a = rng.normal(size=n) + 1j * rng.normal(size=n)
    return TrajectoryState(a / np.linalg.norm(a), rng.normal(0.0, spread, size=(n, 3))).with_rates(table)


rates_st = st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=1, max_size=6)


@settings(deadline=None)
@given(r=rates_st, seed=st.integers(0, 2**31), tau=st.floats(0.0, 5.0))
def test_drift_keeps_normalization(r, seed, tau):
    rng = np.random.default_rng(seed)
    n = len(r)
    a = rng.normal(size=n) + 1j * rng.normal(size=n)
    a /= np.linalg.norm(a)
    out, norm2 = _drift(a[None], rng.normal(size=(1, n)), np.array([r]), np.array([tau]))
    assert abs(np.sum(np.abs(out) ** 2) - 1.0) <= 1e-12
    expect = np.sum(np.abs(a) ** 2 * np.exp(-tau * np.array(r)))
    assert norm2[0] == pytest.approx(expect, rel=1e-10, abs=1e-300)


@settings(deadline=None)
@given(r=rates_st, seed=st.integers(0, 2**31), e1=st.floats(1e-6, 1 - 1e-6), e2=st.floats(1e-6, 1 - 1e-6))
def test_waiting_time_monotone_and_solves_norm_equation(r, seed, e1, e2):
    rng = np.random.default_rng(seed)
    w = rng.random(len(r)) + 1e-3
    w /= w.sum()
    g = np.array(r)
    lo, hi = sorted((e1, e2))
    t_lo, t_hi = _waiting_times(w[None], g[None], np.array([lo]))[0], _waiting_times(w[None], g[None], np.array([hi]))[0]
    assert t_lo >= t_hi
    assert np.sum(w * np.exp(-t_lo * g)) == pytest.approx(lo, rel=1e-9)


def test_waiting_time_single_branch_is_exponential_quantile():
    t = _waiting_times(np.array([[1.0]]), np.array([[2.5]]), np.array([0.3]))[0]
    assert t == pytest.approx(-math.log(0.3) / 2.5, rel=1e-14)


def test_waiting_time_infinite_without_rate():
    t = _waiting_times(np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]]), np.array([0.4]))[0]
    assert math.isinf(t)


def test_deterministic_step_free_phase(hs):
    env, _, table = hs
    state = TrajectoryState(np.array([0.6, 0.8j]), np.array([[1.0, 0, 0], [-1.0, 0, 0]])).with_rates(table)
    out = deterministic_step(state, 0.01, env)
    # equal |U| means equal rates and energies: amplitudes pick up one common phase
    ratio = out.alphas / state.alphas
    assert np.allclose(ratio, ratio[0]) and abs(out.norm() - 1.0) < 1e-14
    assert ratio[0] == pytest.approx(np.exp(-1j * kinetic_phase_rate(state.momenta[0], env) * 0.01))
    with pytest.raises(ContractError):
        deterministic_step(state, -1.0, env)


def test_waiting_time_contracts(hs):
    _, _, table = hs
    state = TrajectoryState(np.array([1.0]), np.zeros((1, 3)))
    with pytest.raises(ContractError):
        sample_waiting_time(state, 0.5)
    with pytest.raises(ContractError):
        sample_waiting_time(state.with_rates(table), 1.5)


def test_zero_amplitude_branch_never_selected(hs):
    _, _, table = hs
    state = TrajectoryState(np.array([0.0, 1.0, 0.0]), np.array([[3.0, 0, 0], [0.1, 0, 0], [5.0, 0, 0]])).with_rates(table)
    rng = np.random.default_rng(0)
    assert {select_jump_branch(state, rng) for _ in range(500)} == {1}


def test_single_branch_jump_shift(hs):
    env, model, table = hs
    rng = np.random.default_rng(1)
    state = TrajectoryState(np.array([1.0]), np.array([[0.5, 0.2, 0.0]])).with_rates(table)
    jp = sample_jump_momenta(state.momenta[0], env, model, rng=rng)
    out = apply_jump(state, jp, env, model, table)
    assert abs(abs(out.alphas[0]) - 1.0) < 1e-14
    assert np.allclose(out.momenta - state.momenta, 0.5 * jp.K)  # m = M
    assert out.rates[0] == pytest.approx(table.rates_for(out.momenta)[0])


def test_jump_with_equal_momenta_keeps_weights(hs):
    env, model, table = hs
    U = np.tile([[0.3, -0.2, 0.1]], (3, 1))
    a = np.array([0.6, 0.0 + 0.64j, 0.48])
    state = TrajectoryState(a, U).with_rates(table)
    jp = JumpParams(np.array([0.4, 1.0, -0.3]), np.array([0.2, 0.1, 0.0]))
    out = apply_jump(state, jp, env, model, table)
    assert np.allclose(np.abs(out.alphas), np.abs(a))


def test_hard_sphere_jump_ratios_are_gaussian(hs):
    env, model, table = hs
    U = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 0.5, 0]])
    a = np.ones(3) / math.sqrt(3)
    state = TrajectoryState(a, U).with_rates(table)
    K = np.array([0.7, 0.2, 0.0])
    jp = JumpParams(K, np.zeros(3))
    out = apply_jump(state, jp, env, model, table)
    upar, _ = split_along(U, np.broadcast_to(K, U.shape))
    g = np.exp(-0.5 * (0.5 * np.linalg.norm(K) + upar) ** 2)
    assert np.allclose(np.abs(out.alphas) / np.abs(out.alphas[0]), g / g[0])


def test_complex_amplitude_phase_is_kept():
    env = gaussian_units(1.0)
    exact, _ = gaussian_models(20.0, 1.0, env)
    table = exact_rate_table(env, exact, U_max=5.0, n_grid=12)
    U = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    state = TrajectoryState(np.ones(2) / math.sqrt(2), U).with_rates(table)
    out = apply_jump(state, JumpParams(np.array([0.3, 0.8, 0.1]), np.array([0.8, -0.3, 0.0])), env, exact, table)
    assert abs(np.angle(out.alphas[0] * np.conj(out.alphas[1]))) > 1e-6


def test_mh_settings_contracts():
    with pytest.raises(ContractError):
        MHSettings(thinning=0)
    with pytest.raises(ContractError):
        MHSettings(init="nowhere")


def test_sampler_symmetry_hard_sphere():
    # with U along x, the target is invariant under reflection y -> -y of W
    env = hard_sphere_units(1.0)
    sampler = JumpSampler(env, HardSphereSWave(), MHSettings(burn_in=100, thinning=20))
    rngs = [np.random.default_rng([5, j]) for j in range(3000)]
    K, W, acc = sampler.sample(np.tile([[0.8, 0.0, 0.0]], (3000, 1)), rngs)
    for comp in (1, 2):
        assert abs(W[:, comp].mean()) < 4.0 * W[:, comp].std() / math.sqrt(3000)
        assert abs(K[:, comp].mean()) < 4.0 * K[:, comp].std() / math.sqrt(3000)
    lo, hi = MHSettings().accept_band
    assert lo <= acc.mean() <= hi


def test_trajectory_rng_streams():
    a = trajectory_rng(7, 3).random(4)
    assert np.array_equal(a, trajectory_rng(7, 3).random(4))
    assert not np.array_equal(a, trajectory_rng(7, 4).random(4))
    assert not np.array_equal(a, trajectory_rng(8, 3).random(4))


def test_zero_density_is_free_evolution():
    env = hard_sphere_units(1.0).with_density(0.0)
    model = HardSphereSWave()
    table = exact_rate_table(env, model, U_max=5.0, n_grid=8)
    U = np.array([[1.0, 0, 0], [0.0, 2.0, 0]])
    init = TrajectoryState(np.array([0.6, 0.8]), U)
    times = np.array([0.0, 0.3, 1.0])
    ens = evolve_ensemble(init, times, env, model, table, 5, 1)
    assert np.all(ens.n_jumps == 0) and np.all(ens.shifts == 0)
    omega = kinetic_phase_rate(U, env)
    for k, t in enumerate(times):
        assert np.allclose(ens.alphas[k], init.alphas * np.exp(-1j * omega * t))


def test_first_snapshot_equals_initial(hs):
    env, model, table = hs
    init = _state(np.random.default_rng(3), 4, table)
    ens = evolve_ensemble(TrajectoryState(init.alphas, init.momenta), np.array([0.0, 0.05]), env, model, table, 8, 2)
    assert np.allclose(ens.alphas[0], init.alphas) and np.all(ens.shifts[0] == 0)


def test_jump_count_is_poisson_for_heavy_particle(heavy):
    env, model, table = heavy
    U0 = np.array([[0.5, 0.0, 0.0]])
    gam = float(table(0.5))
    ens = evolve_ensemble(TrajectoryState(np.array([1.0]), U0), np.array([0.0, 10.0 / gam]), env, model, table, 1000, 5)
    n = ens.n_jumps[-1]
    assert n.mean() == pytest.approx(10.0, rel=0.05)
    assert n.var() == pytest.approx(10.0, rel=0.2)


def test_branch_count_and_normalization_in_ensemble(heavy):
    env, model, table = heavy
    init = _state(np.random.default_rng(4), 5, table, spread=0.05)
    init = TrajectoryState(init.alphas, init.momenta)
    ens = evolve_ensemble(init, np.linspace(0, 0.2, 6), env, model, table, 50, 6, block_size=16)
    assert ens.alphas.shape == (6, 50, 5)
    assert np.allclose(np.sum(np.abs(ens.alphas) ** 2, axis=-1), 1.0, atol=1e-12)
    assert np.all(np.diff(ens.n_jumps, axis=0) >= 0)


def test_ensemble_thread_and_block_independence(hs):
    env, model, table = hs
    init = TrajectoryState(np.ones(2) / math.sqrt(2), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    times = np.linspace(0, 0.1, 4)
    a = evolve_ensemble(init, times, env, model, table, 40, 9, threads=1, block_size=8)
    b = evolve_ensemble(init, times, env, model, table, 40, 9, threads=4, block_size=8)
    assert np.array_equal(a.alphas, b.alphas) and np.array_equal(a.shifts, b.shifts)


def test_ensemble_contracts(hs):
    env, model, table = hs
    init = TrajectoryState(np.array([1.0]), np.zeros((1, 3)))
    with pytest.raises(ContractError):
        evolve_ensemble(init, np.array([0.2, 0.1]), env, model, table, 2, 0)
    with pytest.raises(ContractError):
        evolve_ensemble(init, np.array([0.1]), env, model, table, 0, 0)
    with pytest.raises(ContractError):
        evolve_ensemble(TrajectoryState(np.array([2.0]), np.zeros((1, 3))), np.array([0.1]), env, model, table, 1, 0)
    with pytest.raises(ContractError):
        TrajectoryState(np.ones(2), np.zeros((3, 3)))


def test_evolve_trajectory_snapshots(hs):
    env, model, table = hs
    init = TrajectoryState(np.array([1.0]), np.array([[0.2, 0, 0]]))
    states = evolve_trajectory(init, 0.2, [0.0, 0.1, 0.2], env, model, table, rng=np.random.default_rng(1))
    assert [s.t for s in states] == [0.0, 0.1, 0.2]
    with pytest.raises(ContractError):
        evolve_trajectory(init, 0.1, [0.0, 0.2], env, model, table)


def test_ensemble_result_time_lookup():
    ens = EnsembleResult(np.array([0.0, 0.5]), np.ones((2, 1, 1)), np.zeros((2, 1, 3)), np.zeros((1, 3)), np.zeros((2, 1)))
    assert ens.time_index(0.5) == 1
    with pytest.raises(ContractError):
        ens.time_index(0.25)
