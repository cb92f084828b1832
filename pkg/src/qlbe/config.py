"""Run configuration: environment, model, initial state, run and output settings.

Configurations are TOML documents; see the files under ``qlbe/presets``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import MHSettings, TrajectoryState
from .rates import RateTable, build_rate_table, env_model_fingerprint, exact_rate_table
from .reference import gamma0
from .scattering import BornGaussian, HardSphereSWave, PartialWave, PhaseShiftTable, gaussian_phase_table
from .units import GasEnvironment, ParameterError, gaussian_units, hard_sphere_units, make_environment


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class CacheError(RuntimeError):
    """A cached table does not match the environment and model it is keyed by."""


PRESET_NAMES = (
    "fig4_gauss_weak",
    "fig4_gauss_strong",
    "fig5_locrate",
    "fig6_interference",
    "fig7_relaxation",
    "fig8_diffusion",
)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def preset_path(name: str) -> Path:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return Path(str(resources.files("qlbe") / "presets" / f"{name}.toml"))


def load_preset(name: str) -> dict:
    return load_toml(preset_path(name))


def _get(block: dict, key: str, section: str, default=None, required=False):
    if key in block:
        return block[key]
    if required:
        raise ConfigError(f"[{section}] missing required field '{key}'")
    return default


# ---------------------------------------------------------------------------
# environment and model


def build_environment(block: dict) -> GasEnvironment:
    preset = block.get("preset")
    try:
        if preset == "hard_sphere":
            return hard_sphere_units(float(block.get("mass_ratio", 1.0)), float(block.get("n_gas", 1.0)))
        if preset == "gaussian":
            return gaussian_units(float(block.get("mass_ratio", 1.0)), float(block.get("n_gas", 1.0)))
        if preset is not None:
            raise ConfigError(f"[environment] unknown preset '{preset}'")
        return make_environment(
            _get(block, "m", "environment", required=True),
            _get(block, "M", "environment", required=True),
            _get(block, "kT", "environment", required=True),
            _get(block, "n_gas", "environment", required=True),
            block.get("hbar", 1.0),
        )
    except ParameterError as exc:
        raise ConfigError(f"[environment] {exc}") from None


def phase_table_key(V0, d, m_star, hbar, l_max) -> str:
    blob = json.dumps({"V0": V0, "d": d, "m_star": m_star, "hbar": hbar, "l_max": l_max}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(block: dict, env: GasEnvironment, cache_dir=None):
    kind = _get(block, "kind", "model", required=True)
    if kind == "hard_sphere":
        return HardSphereSWave(float(block.get("R", 1.0)))
    if kind == "gaussian":
        V0 = float(_get(block, "V0", "model", required=True))
        d = float(block.get("d", 1.0))
        amp = block.get("amplitude", "exact")
        if amp == "born":
            return BornGaussian(V0, d, env.m_star, env.hbar)
        if amp != "exact":
            raise ConfigError(f"[model] amplitude must be 'exact' or 'born', got '{amp}'")
        l_max = int(block.get("l_max", 30))
        key = phase_table_key(V0, d, env.m_star, env.hbar, l_max)
        path = Path(cache_dir) / f"phase-{key}.csv" if cache_dir else None
        if path is not None and path.exists():
            table = PhaseShiftTable.load(path)
            want = {"V0": V0, "d": d, "m_star": env.m_star, "hbar": env.hbar}
            got = {**{k: table.meta.get(k) for k in want}, "hbar": table.hbar}
            if any(got[k] is None or not math.isclose(got[k], v, rel_tol=1e-12) for k, v in want.items()):
                raise CacheError(f"{path}: phase table built for {got}, expected {want}")
        else:
            table = gaussian_phase_table(V0, d, env.m_star, env.hbar, l_max=l_max)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                table.save(path)
        return PartialWave(table)
    raise ConfigError(f"[model] unknown kind '{kind}'")


def build_rates(block: dict, env: GasEnvironment, model, cache_dir=None, U_needed=0.0) -> RateTable:
    U_max = float(block.get("U_max", max(20.0, 1.5 * U_needed)))
    n_grid = int(block.get("n_grid", 48))
    method = block.get("method", "auto")
    if method == "quadrature":
        extra = {"U_max": U_max, "n_grid": n_grid, "method": "quadrature"}
    else:
        n_samples = int(block.get("n_samples", 20_000))
        seed = int(block.get("seed", 12345))
        U_switch = float(block.get("U_switch", 2.0))
        extra = {"U_max": U_max, "n_grid": n_grid, "n_samples": n_samples, "method": method, "U_switch": U_switch, "seed": seed}
    fp = env_model_fingerprint(env, model, extra)
    path = Path(cache_dir) / f"rate-{fp}.csv" if cache_dir else None
    if path is not None and path.exists():
        try:
            return RateTable.load(path, expected_fingerprint=fp)
        except (ParameterError, ValueError) as exc:
            raise CacheError(f"{path}: {exc}") from None
    if method == "quadrature":
        table = exact_rate_table(env, model, U_max, n_grid)
    else:
        table = build_rate_table(env, model, U_max, n_grid, n_samples, seed=seed, method=method, U_switch=U_switch)
    if table.env_fingerprint != fp:
        raise ConfigError("internal: rate-table fingerprint mismatch")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        table.save(path)
    return table


# ---------------------------------------------------------------------------
# initial states


def packet_amplitudes(U, center_S, mean_U, sigma_S, c):
    """Momentum amplitudes of a Gaussian position packet with |psi|^2 std sigma_S."""
    U = np.asarray(U, dtype=float)
    return np.exp(-((c * sigma_S) ** 2) * (U - mean_U) ** 2 - 1j * c * center_S * U)


def _lattice(mean_U, sigma_U, n, span):
    half = span * sigma_U
    return mean_U + np.linspace(-half, half, n) if n > 1 else np.array([mean_U])


def _check_alias(alphas, Ux, c, centers, sigma_S, du, tol=0.02):
    """Reject lattices whose period cannot hold the packets or distorts their widths."""
    period = 2.0 * math.pi / (c * du)
    extent = max(centers) - min(centers) + 12.0 * sigma_S
    if extent > period:
        raise ConfigError(
            f"[initial] momentum grid too coarse: packets span {extent:.4g} but the lattice period is {period:.4g}"
        )
    for cen in centers:
        others = [abs(cen - o) for o in centers if o != cen]
        half = min([6.0 * sigma_S] + [0.5 * o for o in others])
        S = cen + np.linspace(-half, half, 2001)
        p = np.abs(np.exp(1j * c * np.outer(S, Ux)) @ alphas) ** 2
        p /= p.sum()
        m = p @ S
        width = math.sqrt(p @ (S - m) ** 2)
        # a Gaussian cut at +-half has a slightly smaller width
        z = half / sigma_S
        phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        expect = sigma_S * math.sqrt(1.0 - 2.0 * z * phi / math.erf(z / math.sqrt(2.0)))
        if abs(width - expect) > tol * expect:
            raise ConfigError(
                f"[initial] momentum grid too coarse: reconstructed width {width:.4g} vs requested {expect:.4g}"
            )


def build_initial_state(block: dict, env: GasEnvironment) -> TrajectoryState:
    """Initial superposition from a named constructor (positions in Lambda_th units, momenta scaled)."""
    kind = _get(block, "constructor", "initial", required=True)
    c = env.position_phase
    if kind == "eigenstate":
        U = np.asarray(_get(block, "U", "initial", required=True), dtype=float)
        return TrajectoryState(np.array([1.0 + 0j]), U[None, :])
    if kind == "two-eigenstate":
        U0 = float(_get(block, "U0", "initial", required=True))
        a = complex(block.get("alpha", 1.0))
        b = complex(block.get("beta", 1.0))
        amps = np.array([a, b])
        amps /= np.linalg.norm(amps)
        return TrajectoryState(amps, np.array([[U0, 0.0, 0.0], [-U0, 0.0, 0.0]]))
    if kind == "explicit":
        amps = np.array([complex(x[0], x[1]) if isinstance(x, list) else complex(x) for x in block["alphas"]])
        U = np.asarray(block["momenta"], dtype=float)
        norm = np.linalg.norm(amps)
        if abs(norm**2 - 1.0) > 1e-6:
            warnings.warn(f"[initial] amplitudes normalized (norm^2 was {norm**2:.6g})")
        return TrajectoryState(amps / norm, U)

    n = int(_get(block, "N", "initial", required=True))
    span = float(block.get("span", 6.0))
    if n < 1:
        raise ConfigError("[initial] N must be >= 1")
    if span < 5.0:
        raise ConfigError("[initial] span must cover at least 5 momentum-space standard deviations")
    transverse = np.asarray(block.get("transverse", [0.0, 0.0]), dtype=float)

    def finish(Ux, amps):
        amps = amps / np.linalg.norm(amps)
        U = np.column_stack([Ux, np.full(Ux.size, transverse[0]), np.full(Ux.size, transverse[1])])
        return TrajectoryState(amps, U)

    if kind == "gaussian-packet":
        sig = float(_get(block, "sigma", "initial", required=True))
        if sig <= 0:
            raise ConfigError("[initial] sigma must be positive")
        S0 = float(block.get("center", 0.0))
        Um = float(block.get("U_mean", 0.0))
        sU = 1.0 / (2.0 * c * sig)
        Ux = _lattice(Um, sU, n, span)
        amps = packet_amplitudes(Ux, S0, Um, sig, c)
        if n > 1:
            _check_alias(amps, Ux, c, [S0], sig, Ux[1] - Ux[0])
        return finish(Ux, amps)

    if kind == "double-gaussian":
        sig = float(_get(block, "sigma", "initial", required=True))
        centers = [float(x) for x in _get(block, "centers", "initial", required=True)]
        Um = float(block.get("U_mean", 0.0))
        sU = 1.0 / (2.0 * c * sig)
        Ux = _lattice(Um, sU, n, span)
        amps = sum(packet_amplitudes(Ux, s0, Um, sig, c) for s0 in centers)
        if n > 1:
            _check_alias(amps, Ux, c, centers, sig, Ux[1] - Ux[0])
        return finish(Ux, amps)

    if kind == "counter-propagating":
        # packets given in de Broglie units: S_dB = X / lambda, U_dB = P / (M lambda Gamma0)
        lam = float(_get(block, "lambda_ratio", "initial", required=True)) * env.Lambda_th
        g0 = gamma0(env, float(block.get("R", 1.0)))
        S_dB = [float(x) for x in _get(block, "S_dB", "initial", required=True)]
        U_dB = [float(x) for x in _get(block, "U_dB", "initial", required=True)]
        sig = float(_get(block, "sigma_dB", "initial", required=True)) * lam / env.Lambda_th
        centers = [s * lam / env.Lambda_th for s in S_dB]
        means = [u * lam * g0 / env.v_beta for u in U_dB]
        sU = 1.0 / (2.0 * c * sig)
        per = n // len(means)
        if per * len(means) != n:
            raise ConfigError("[initial] N must be divisible by the number of packets")
        du = 2.0 * span * sU / (per - 1) if per > 1 else 1.0
        # both clusters sit on one lattice of spacing du so that psi(S) is periodic
        Ux_parts = [np.round((m + np.linspace(-span * sU, span * sU, per)) / du) * du for m in means]
        Ux = np.concatenate(Ux_parts)
        if np.unique(np.round(Ux / du)).size != Ux.size:
            raise ConfigError("[initial] momentum clusters overlap")
        amps = sum(packet_amplitudes(Ux, s0, m, sig, c) for s0, m in zip(centers, means))
        _check_alias(amps, Ux, c, centers, sig, du)
        return finish(Ux, amps)

    raise ConfigError(f"[initial] unknown constructor '{kind}'")


# ---------------------------------------------------------------------------
# full configuration


@dataclass
class EnsembleConfig:
    raw: dict
    env: GasEnvironment
    model_block: dict
    initial_block: dict
    rates_block: dict
    mh: MHSettings
    trajectories: int
    full_trajectories: int | None
    times: np.ndarray
    time_unit: str
    time_scale: float
    seed: int
    threads: int
    block_size: int
    observables: list
    out_dir: Path
    cache_dir: Path | None
    source: str = ""
    extras: dict = field(default_factory=dict)

    def scaled_times(self):
        return self.times * self.time_scale


def time_scale_for(unit: str, env: GasEnvironment, model_block: dict) -> float:
    """Rate by which times in ``unit`` are divided to give raw times (returns the rate)."""
    if unit == "raw":
        return 1.0
    if unit == "gamma0":
        return gamma0(env, float(model_block.get("R", 1.0)))
    raise ConfigError(f"[run] unknown time_unit '{unit}'")


def parse_config(doc: dict, overrides: dict | None = None, source: str = "") -> EnsembleConfig:
    doc = copy.deepcopy(doc)
    overrides = overrides or {}
    for sec in ("environment", "model", "initial", "run"):
        if sec not in doc:
            raise ConfigError(f"missing section [{sec}]")
    env = build_environment(doc["environment"])
    run = doc["run"]
    if "seed" not in run and overrides.get("seed") is None:
        raise ConfigError("[run] missing required field 'seed'")
    seed = int(overrides.get("seed") if overrides.get("seed") is not None else run["seed"])
    trajectories = int(overrides.get("trajectories") or run.get("trajectories", 0))
    if trajectories < 1:
        raise ConfigError("[run] trajectories must be >= 1")
    unit = run.get("time_unit", "raw")
    rate = time_scale_for(unit, env, doc["model"])
    if "times" in run:
        times = np.asarray(run["times"], dtype=float)
    else:
        t_final = float(_get(run, "t_final", "run", required=True))
        times = np.linspace(0.0, t_final, int(run.get("n_snapshots", 21)))
    t_final = float(run.get("t_final", times[-1] if times.size else 0.0))
    if times.size == 0 or np.any(np.diff(times) < 0) or times[0] < 0 or times[-1] > t_final + 1e-12:
        raise ConfigError("[run] snapshot times must be sorted within [0, t_final]")
    mh_block = doc.get("mh", {})
    try:
        mh = MHSettings(
            burn_in=int(mh_block.get("burn_in", 200)),
            thinning=int(mh_block.get("thinning", 50)),
            target_accept=float(mh_block.get("target_accept", 0.35)),
            init=mh_block.get("init", "collision"),
        )
    except ValueError as exc:
        raise ConfigError(f"[mh] {exc}") from None
    out = doc.get("output", {})
    out_dir = Path(overrides.get("out_dir") or out.get("dir", "qlbe-out"))
    cache = overrides.get("cache_dir") or out.get("cache")
    return EnsembleConfig(
        raw=doc,
        env=env,
        model_block=doc["model"],
        initial_block=doc["initial"],
        rates_block=doc.get("rates", {}),
        mh=mh,
        trajectories=trajectories,
        full_trajectories=run.get("full_trajectories"),
        times=times / rate,
        time_unit=unit,
        time_scale=rate,
        seed=seed,
        threads=int(overrides.get("threads") or run.get("threads", 1)),
        block_size=int(run.get("block_size", 256)),
        observables=list(doc.get("observables", [])),
        out_dir=out_dir,
        cache_dir=Path(cache) if cache else None,
        source=source,
        extras=doc.get("oracle", {}),
    )


def load_config(path=None, preset=None, overrides=None) -> EnsembleConfig:
    if (path is None) == (preset is None):
        raise ConfigError("give exactly one of a config file or a preset name")
    if preset is not None:
        return parse_config(load_preset(preset), overrides, source=f"preset:{preset}")
    return parse_config(load_toml(path), overrides, source=str(path))
