"""Command-line driver: ``qlbe run | tables | oracle``."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import observables as obs
from .config import (
    CacheError,
    ConfigError,
    EnsembleConfig,
    build_initial_state,
    build_model,
    build_rates,
    load_config,
)
from .engine import EnsembleResult, evolve_ensemble
from .rates import collision_rate, effective_collision_rate, hard_sphere_rate, relaxation_rate
from .reference import (
    brownian_variance_slope,
    cl_energy_relaxation,
    counter_propagating_separation,
    free_dispersion_variance,
    kramers_variance,
    localization_rate_analytic,
    localization_rate_hardsphere,
    predicted_visibility,
)
from .scattering import ContractError, HardSphereSWave, NumericalError
from .units import ParameterError

EXIT_CONFIG = 2
EXIT_CACHE = 3
EXIT_FILESYSTEM = 4
EXIT_NUMERICAL = 5


def log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _grid(spec, name):
    if spec is None:
        raise ConfigError(f"[observables] '{name}' needs a grid S = [min, max, n]")
    if len(spec) == 3 and float(spec[2]).is_integer() and spec[2] >= 2:
        return np.linspace(float(spec[0]), float(spec[1]), int(spec[2]))
    raise ConfigError(f"[observables] grid for '{name}' must be [min, max, n] with n >= 2")


def _series_in_unit(s: obs.ObservableSeries, cfg: EnsembleConfig) -> obs.ObservableSeries:
    meta = {**s.meta, "time_unit": cfg.time_unit}
    return obs.ObservableSeries(s.times * cfg.time_scale, s.values, s.stderr, s.kind, meta)


def _fit(series: obs.ObservableSeries, window):
    fit = obs.fit_decay_rate(series.times, series.values, window, series.stderr)
    if fit.flagged:
        log(f"warning: poor exponential fit (R^2={fit.r2:.3f}) for {series.kind}")
    return {"rate": fit.rate, "error": fit.error, "r2": fit.r2, "flagged": fit.flagged, "window": list(fit.window)}


def compute_observables(cfg: EnsembleConfig, ens: EnsembleResult, out_dir: Path) -> dict:
    """Write one file per requested observable; return manifest entries."""
    results = {}
    env = cfg.env
    for i, req in enumerate(cfg.observables):
        kind = req.get("kind")
        name = req.get("name", f"{kind}" if kind else f"obs{i}")
        entry = {"kind": kind, "files": []}
        window = req.get("window")
        if kind in ("coherence", "coherence_element", "energy", "variance"):
            if kind == "coherence":
                s = obs.momentum_coherence(ens)
            elif kind == "coherence_element":
                s = obs.coherence_element(ens)
            elif kind == "energy":
                s = obs.mean_square_momentum(ens)
            else:
                s = obs.spatial_variance(ens, _grid(req.get("S"), name), env, int(req.get("axis", 0)))
            s = _series_in_unit(s, cfg)
            path = out_dir / f"{name}.csv"
            s.save(path)
            entry["files"].append(path.name)
            if window is not None and kind.startswith("coherence"):
                entry["fit"] = _fit(s, window)
            if window is not None and kind == "variance":
                sel = (s.times >= window[0]) & (s.times <= window[1])
                slope, icpt = np.polyfit(s.times[sel], s.values[sel], 1)
                entry["fit"] = {"slope": float(slope), "intercept": float(icpt), "window": list(window)}
        elif kind == "offdiagonal":
            fits = []
            for j, (s1, s2) in enumerate(req.get("pairs", [])):
                s = _series_in_unit(obs.offdiagonal_series(ens, float(s1), float(s2), env), cfg)
                path = out_dir / f"{name}-{j}.csv"
                s.save(path)
                entry["files"].append(path.name)
                if window is not None:
                    s0 = s.values[0]
                    rel = obs.ObservableSeries(s.times, s.values / s0, s.stderr / s0, s.kind, s.meta)
                    fits.append({"separation": abs(float(s1) - float(s2)), **_fit(rel, window)})
            if fits:
                entry["fits"] = fits
        elif kind in ("density", "diagonal", "visibility"):
            S = _grid(req.get("S"), name)
            t_req = req.get("times", [req["time"]] if "time" in req else None)
            if t_req is None:
                raise ConfigError(f"[observables] '{name}' needs 'times' or 'time'")
            vis = []
            for j, tu in enumerate(t_req):
                t = float(tu) / cfg.time_scale
                if kind == "density":
                    rho = obs.position_density_matrix(ens, t, S, env=env)
                    path = out_dir / f"{name}-{j}.csv"
                    obs.save_matrix(path, S, S, rho, {"time": float(tu), "time_unit": cfg.time_unit})
                else:
                    m, e = obs.density_diagonal(ens, t, S, env)
                    path = out_dir / f"{name}-{j}.csv"
                    with path.open("w") as fh:
                        fh.write("# " + json.dumps({"time": float(tu), "time_unit": cfg.time_unit}) + "\n")
                        fh.write("S,value,stderr\n")
                        np.savetxt(fh, np.column_stack([S, m, e]), delimiter=",", fmt="%.17g")
                    if kind == "visibility":
                        vis.append({"time": float(tu), "visibility": obs.fringe_visibility(S, m, req.get("center"))})
                entry["files"].append(path.name)
            if vis:
                entry["visibility"] = vis
        else:
            raise ConfigError(f"[observables] unknown kind '{kind}'")
        results[name] = entry
    return results


def _jump_stats(ens: EnsembleResult) -> dict:
    j = ens.n_jumps[-1]
    return {
        "mean": float(j.mean()),
        "min": int(j.min()),
        "max": int(j.max()),
        "total": int(j.sum()),
    }


def _fingerprint_config(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def prepare(cfg: EnsembleConfig):
    """Model, initial state and rate table for a configuration (cached tables reused)."""
    model = build_model(cfg.model_block, cfg.env, cfg.cache_dir)
    initial = build_initial_state(cfg.initial_block, cfg.env)
    U_needed = float(np.max(np.linalg.norm(initial.momenta, axis=1)))
    table = build_rates(cfg.rates_block, cfg.env, model, cfg.cache_dir, U_needed)
    return model, initial, table


def run(cfg: EnsembleConfig) -> dict:
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, initial, table = prepare(cfg)
    t_setup = time.perf_counter() - t0
    log(f"setup done in {t_setup:.1f} s; running {cfg.trajectories} trajectories with {initial.n_branches} branches")
    t1 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ens = evolve_ensemble(
            initial, cfg.times, cfg.env, model, table, cfg.trajectories, cfg.seed, cfg.mh, cfg.threads, cfg.block_size
        )
    for w in caught:
        log(f"warning: {w.message}")
    t_run = time.perf_counter() - t1
    results = compute_observables(cfg, ens, out_dir)
    manifest = {
        "config": cfg.raw,
        "config_fingerprint": _fingerprint_config(cfg.raw),
        "source": cfg.source,
        "seed": cfg.seed,
        "trajectories": cfg.trajectories,
        "full_trajectories": cfg.full_trajectories,
        "branches": initial.n_branches,
        "time_unit": cfg.time_unit,
        "time_scale": cfg.time_scale,
        "environment": cfg.env.as_dict(),
        "model": model.params(),
        "fingerprints": {"model": model.fingerprint(), "rate_table": table.env_fingerprint},
        "jumps": _jump_stats(ens),
        "diagnostics": ens.diagnostics,
        "observables": results,
    }
    with (out_dir / "manifest.json").open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=obs._json_default)
        fh.write("\n")
    # wall time depends on the machine, so it lives apart from the reproducible outputs
    with (out_dir / "timing.json").open("w") as fh:
        json.dump({"setup_s": t_setup, "run_s": t_run, "threads": cfg.threads}, fh, indent=2)
        fh.write("\n")
    log(f"ensemble done in {t_run:.1f} s; results in {out_dir}")
    return manifest


def tables(cfg: EnsembleConfig) -> dict:
    if cfg.cache_dir is None:
        raise ConfigError("[output] 'cache' directory required to prebuild tables (or pass --cache-dir)")
    model, initial, table = prepare(cfg)
    info = {"model": model.fingerprint(), "rate_table": table.env_fingerprint, "cache": str(cfg.cache_dir)}
    log(json.dumps(info))
    return info


def _write_columns(path: Path, header: dict, names, cols):
    with path.open("w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True, default=obs._json_default) + "\n")
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt="%.17g")


def _initial_variance(initial, cfg, S):
    ens = EnsembleResult(
        np.zeros(1), initial.alphas[None, None, :], np.zeros((1, 1, 3)), initial.momenta, np.zeros((1, 1), dtype=int)
    )
    return float(obs.spatial_variance(ens, S, cfg.env).values[0])


def oracle(cfg: EnsembleConfig) -> list:
    """Dump reference curves relevant to the configuration."""
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model_block, cfg.env, cfg.cache_dir)
    initial = build_initial_state(cfg.initial_block, cfg.env)
    env = cfg.env
    ob = cfg.extras
    written = []
    scale = cfg.time_scale
    t_unit = cfg.times * scale

    U = np.linspace(0.0, float(ob.get("U_max", 10.0)), int(ob.get("n_U", 41)))
    gam = np.array([collision_rate(u, env, model) for u in U])
    cols, names = [U, gam / scale], ["U", "rate"]
    if isinstance(model, HardSphereSWave):
        cols.append(np.array([hard_sphere_rate(u, env, model.R) for u in U]) / scale)
        names.append("rate_closed_form")
    _write_columns(out_dir / "oracle-rate.csv", {"time_unit": cfg.time_unit}, names, cols)
    written.append("oracle-rate.csv")

    if "S" in ob:
        S = _grid(ob["S"], "oracle")
        x = S * env.Lambda_th
        F = np.array([localization_rate_analytic(xi, env, model) for xi in x]) / scale
        cols, names = [S, F], ["S", "rate"]
        if isinstance(model, HardSphereSWave):
            cols.append(localization_rate_hardsphere(S, env, model.R) / scale)
            names.append("rate_closed_form")
        geff = effective_collision_rate(env, model) / scale
        _write_columns(out_dir / "oracle-localization.csv", {"gamma_eff": geff, "time_unit": cfg.time_unit}, names, cols)
        written.append("oracle-localization.csv")

    kinds = {o.get("kind"): o for o in cfg.observables}
    if "energy" in kinds:
        gamma = relaxation_rate(env, model)
        U0sq = float(np.sum(np.abs(initial.alphas) ** 2 * np.sum(initial.momenta**2, axis=1)))
        curve = cl_energy_relaxation(cfg.times, U0sq, env, gamma)
        _write_columns(
            out_dir / "oracle-energy.csv",
            {"gamma": gamma / scale, "time_unit": cfg.time_unit},
            ["time", "U2"],
            [t_unit, curve],
        )
        written.append("oracle-energy.csv")
    if "variance" in kinds:
        S = _grid(kinds["variance"].get("S"), "variance")
        v0 = _initial_variance(initial, cfg, S)
        if env.n_gas > 0:
            gamma = relaxation_rate(env, model)
            curve = kramers_variance(cfg.times, v0, env, gamma, env.Lambda_th)
            extra = v0 + brownian_variance_slope(env, gamma, env.Lambda_th) * cfg.times
            head = {"gamma": gamma / scale, "law": "kramers"}
        else:
            L = env.Lambda_th
            curve = free_dispersion_variance(cfg.times, v0 * L**2, env.M, env.hbar) / L**2
            extra = curve
            head = {"law": "free"}
        _write_columns(
            out_dir / "oracle-variance.csv",
            {**head, "time_unit": cfg.time_unit},
            ["time", "variance", "with_position_diffusion"],
            [t_unit, curve, extra],
        )
        written.append("oracle-variance.csv")
    if cfg.initial_block.get("constructor") == "counter-propagating":
        ib = cfg.initial_block
        lam_ratio = float(ib["lambda_ratio"])
        S_dB = [float(s) for s in ib["S_dB"]]
        U_dB = [float(u) for u in ib["U_dB"]]
        sep = counter_propagating_separation(abs(S_dB[1] - S_dB[0]), abs(U_dB[1] - U_dB[0]), lam_ratio)
        if isinstance(model, HardSphereSWave):
            def F(S):
                return localization_rate_hardsphere(S, env, model.R) / scale
        else:
            def F(S):
                return np.array([localization_rate_analytic(s * env.Lambda_th, env, model) for s in np.ravel(S)]) / scale
        rows = [[tu, predicted_visibility(tu, sep, F, "plain"), predicted_visibility(tu, sep, F, "weighted")] for tu in t_unit]
        rows = np.array(rows)
        _write_columns(
            out_dir / "oracle-visibility.csv",
            {"time_unit": cfg.time_unit},
            ["time", "plain", "weighted"],
            [rows[:, 0], rows[:, 1], rows[:, 2]],
        )
        written.append("oracle-visibility.csv")
    for name in written:
        log(f"wrote {out_dir / name}")
    return written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlbe", description="Quantum-jump Monte Carlo for a test particle in an ideal gas")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "run an ensemble and write observables"),
        ("tables", "prebuild phase-shift and rate tables"),
        ("oracle", "write reference-theory curves"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", nargs="?", help="TOML configuration file")
        sp.add_argument("--preset", help="use a shipped preset instead of a file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trajectories", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--cache-dir")
        sp.add_argument("--desk", action="store_true", help="use the preset's reduced trajectory count")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "trajectories": args.trajectories,
        "threads": args.threads,
        "out_dir": args.out_dir,
        "cache_dir": args.cache_dir,
    }
    try:
        cfg = load_config(args.config, args.preset, overrides)
        if args.desk and args.trajectories is None:
            desk = cfg.raw["run"].get("desk_trajectories")
            if desk is None:
                raise ConfigError("[run] no 'desk_trajectories' for --desk")
            cfg.trajectories = int(desk)
        if args.command == "run":
            run(cfg)
        elif args.command == "tables":
            tables(cfg)
        else:
            oracle(cfg)
    except (ConfigError, ParameterError, ContractError, obs.GridError) as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except CacheError as exc:
        log(f"cache error: {exc}")
        return EXIT_CACHE
    except OSError as exc:
        log(f"filesystem error: {exc}")
        return EXIT_FILESYSTEM
    except NumericalError as exc:
        log(f"numerical error: {exc}")
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
