"""Command-line entry point: ``dpmixcox {fit,simulate,simex}``.

Exit codes: 0 success, 1 internal error, 2 bad input or config,
3 convergence warning (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import ModelConfig, PriorSpec, read_dataset
from .errors import DataError
from .inference import prior_sensitivity, sensitivity_priors, summarize, write_table
from .mcmc import run_chains, write_draws_csv
from .simex import SimexConfig, fit_simex, simex_bootstrap_se
from .simulation import ESTIMATORS, HarnessConfig, SimScenario, parse_kv, run_scenario, scenario_from_config

log = logging.getLogger("dpmixcox")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2, 3
RHAT_WARN = 1.1
ESS_WARN = 100.0


class InputError(Exception):
    pass


_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)} | {"chains": "int"}
_PRIOR_KEYS = {f.name: f.type for f in fields(PriorSpec)}
_SIMEX_KEYS = {"lambda_grid": "comma list", "B": "int", "bootstrap": "int"}
_CASTS = {"int": int, "float": float, "str": str, "bool": lambda v: v.strip().lower() in ("1", "true", "yes")}

FIT_KEYS = """config keys (key = value, one per line, # comments):
  model:  m_intervals, k_trunc, n_iter, n_burn, thin, knot_method (quantile|equal_length),
          store_x, adapt, atom_steps, alpha_steps, chains
  prior:  a_h, b_h, mu_beta, sigma2_beta, mu_x, sigma2_x, beta_x_family (normal|cauchy),
          mu_alpha, sigma2_alpha, a0, eta0, b0, gamma0
  output: bf_method (kde|normal), bandwidth"""

SIMULATE_KEYS = """config keys (key = value, one per line, # comments):
  scenario: scenario (built-in 1-11 as the base), name, latent (gamma|lognormal|uniform),
            shape, scale, mu, sigma, upper, params, beta_x, beta_z (comma list), n,
            censor_frac, n_reps, weibull_shape, weibull_scale, area, seed
  model:    m_intervals, k_trunc, n_iter, n_burn, thin, knot_method, atom_steps, alpha_steps
  prior:    a_h, b_h, mu_beta, sigma2_beta, mu_x, sigma2_x, beta_x_family, mu_alpha,
            sigma2_alpha, a0, eta0, b0, gamma0
  simex:    lambda_grid (comma list starting at 0), B"""

SIMEX_KEYS = """config keys (key = value, one per line, # comments):
  lambda_grid (comma list, must start at 0), B (remeasurements per lambda), bootstrap (resamples)"""


def _cast(value: str, kind):
    kind = str(kind)
    for name, fn in _CASTS.items():
        if name in kind:
            return fn(value)
    return value


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _split(cfg: dict, allowed: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if k in allowed:
            try:
                out[k] = _cast(v, allowed[k])
            except ValueError as exc:
                raise InputError(f"config key {k}: {exc}") from exc
    return out


def _check_keys(cfg: dict, *groups) -> None:
    known = set().union(*groups)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")


def _model_prior(cfg: dict, seed: int):
    m = _split(cfg, _MODEL_KEYS)
    chains = int(m.pop("chains", 2))
    try:
        return ModelConfig(**{**m, "seed": seed}), PriorSpec(**_split(cfg, _PRIOR_KEYS)), chains
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _simex_config(cfg: dict, seed: int) -> tuple[SimexConfig, int]:
    kw = {}
    if "lambda_grid" in cfg:
        try:
            kw["lambda_grid"] = tuple(float(v) for v in cfg["lambda_grid"].split(",") if v.strip())
        except ValueError as exc:
            raise InputError(f"lambda_grid: {exc}") from exc
    if "B" in cfg:
        kw["B"] = int(cfg["B"])
    try:
        return SimexConfig(seed=seed, **kw), int(cfg.get("bootstrap", 0))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _resolve_seed(seed):
    if seed is None:
        seed = secrets.randbits(32)
        print(f"seed: {seed}", file=sys.stderr)
    return int(seed)


def _load(path):
    try:
        return read_dataset(path)
    except (OSError, DataError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write_manifest(out: Path, args, seed, started, settings: dict) -> None:
    manifest = {
        "subcommand": args.command,
        "config": None if getattr(args, "config", None) is None else str(args.config),
        "input": str(getattr(args, "data", "")) or None,
        "output_dir": str(out),
        "seed": seed,
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
        "settings": settings,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------- subcommands


def cmd_fit(args) -> int:
    started = time.time()
    cfg = _read_config(args.config)
    _check_keys(cfg, _MODEL_KEYS, _PRIOR_KEYS, {"bf_method", "bandwidth"})
    seed = _resolve_seed(args.seed)
    data = _load(args.data)
    config, prior, chains = _model_prior(cfg, seed)
    if args.chains is not None:
        chains = args.chains
    flags = {k: getattr(args, k) for k in ("n_iter", "n_burn", "thin") if getattr(args, k) is not None}
    try:
        config = config.replace(**flags)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    bf_method = cfg.get("bf_method", "kde")
    bandwidth = float(cfg["bandwidth"]) if "bandwidth" in cfg else args.bandwidth
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    draws, diag = run_chains(data, config, prior, chains, workers=args.threads)
    write_draws_csv(draws, out / "posterior-draws.csv")
    cols = {name: np.concatenate([ch.columns()[name] for ch in draws]) for name in draws[0].columns()}
    names = ["beta_x"] + [f"beta_z{j + 1}" for j in range(data.n_covariates)]
    summary = summarize(cols, names, prior=prior, method=bf_method, bandwidth=bandwidth)
    summary.to_csv(out / "summary.csv")
    print(summary.pretty())
    (out / "bayes-factor.json").write_text(json.dumps(asdict(summary.bf), indent=2))
    (out / "diagnostics.json").write_text(json.dumps(_jsonable(diag), indent=2))

    if args.prior_sensitivity:
        sets = []
        for label, p in sensitivity_priors(prior):
            ds, _ = run_chains(data, config, p, chains, workers=args.threads)
            sets.append((label, p, np.concatenate([d.beta_x for d in ds])))
        rows = prior_sensitivity(sets, method=bf_method)
        write_table(rows, out / "prior-sensitivity.csv")
        print()
        print("\n".join(f"{r['prior']:12s} coef={r['coef']: .4f} bf10={r['bf10']:.4g}" for r in rows))

    _write_manifest(out, args, seed, started, {"model": asdict(config), "prior": asdict(prior), "chains": chains})
    warn = [n for n, d in diag.items()
            if (d["rhat"] is not None and d["rhat"] > RHAT_WARN) or (d["ess"] is not None and d["ess"] < ESS_WARN)]
    if any(ch.acceptance.get("near_overflow") for ch in draws):
        warn.append("overflow guard")
    if warn:
        print(f"warning: convergence diagnostics flag {', '.join(warn)}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = _read_config(args.config)
    _check_keys(cfg, _MODEL_KEYS, _PRIOR_KEYS, _SIMEX_KEYS, {f.name for f in fields(SimScenario)},
                {"scenario", "shape", "scale", "mu", "sigma", "upper"})
    sc_keys = {k: v for k, v in cfg.items() if k not in _MODEL_KEYS and k not in _PRIOR_KEYS and k not in _SIMEX_KEYS}
    if args.scenario is not None:
        sc_keys.setdefault("scenario", str(args.scenario))
    try:
        sc = scenario_from_config(sc_keys)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    seed = _resolve_seed(args.seed if args.seed is not None else (sc.seed if "seed" in cfg else None))
    overrides = {"seed": seed}
    if args.reps is not None:
        overrides["n_reps"] = args.reps
    if args.censoring is not None:
        overrides["censor_frac"] = args.censoring
    try:
        sc = sc.replace(**overrides)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad or not estimators:
        raise InputError(f"unknown estimator(s) {', '.join(bad) or '(none)'}; valid names: {', '.join(ESTIMATORS)}")

    harness = HarnessConfig.parity() if args.parity else HarnessConfig()
    model_kw = _split(cfg, _MODEL_KEYS)
    model_kw.pop("chains", None)
    simex_cfg, _ = _simex_config(cfg, seed)
    try:
        harness = HarnessConfig(mcmc=harness.mcmc.replace(**model_kw), prior=PriorSpec(**_split(cfg, _PRIOR_KEYS)),
                                simex=simex_cfg)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if args.parity:
        sc = sc.replace(n_reps=args.reps if args.reps is not None else 1000)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_scenario(sc, estimators, harness, workers=args.threads)
    table.to_csv(out / "metrics.csv")
    table.raw_to_csv(out / "raw-estimates.csv")
    for r in table.rows:
        print(f"{r['estimator']:12s} {r['param']:8s} mean={r['mean']: .4f} bias={r['bias']: .4f} "
              f"mse={r['mse']:.4f} fails={r['n_fail']}")
    _write_manifest(out, args, seed, started, {
        "scenario": asdict(sc), "estimators": estimators, "parity": bool(args.parity),
        "mcmc": asdict(harness.mcmc), "prior": asdict(harness.prior), "simex": asdict(harness.simex),
    })
    return EXIT_OK


def cmd_simex(args) -> int:
    started = time.time()
    cfg = _read_config(args.config)
    _check_keys(cfg, _SIMEX_KEYS)
    seed = _resolve_seed(args.seed)
    config, boot = _simex_config(cfg, seed)
    if args.bootstrap is not None:
        boot = args.bootstrap
    data = _load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit = fit_simex(data, config)
    with open(out / "simex-curve.csv", "w") as fh:
        fh.write(",".join(["lambda"] + fit.names + ["dropped"]) + "\n")
        for lam, row, dropped in fit.curve_rows():
            fh.write(",".join([repr(float(lam))] + [repr(float(v)) for v in row] + [str(dropped)]) + "\n")
    se = simex_bootstrap_se(data, config, R=boot) if boot else np.full(fit.coef.size, np.nan)
    rows = [{"param": n, "coef": float(c), "hr": float(np.exp(c)), "se": float(s)}
            for n, c, s in zip(fit.names, fit.coef, se)]
    write_table(rows, out / "simex-summary.csv")
    for r in rows:
        print(f"{r['param']:8s} coef={r['coef']: .4f} se={r['se']:.4f}")
    print("error variance uses the overall mean count", file=sys.stderr)
    _write_manifest(out, args, seed, started, {"simex": asdict(config), "bootstrap": boot})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmixcox", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    threads = os.cpu_count() or 1

    f = sub.add_parser("fit", help="fit the joint model to a dataset", epilog=FIT_KEYS, formatter_class=fmt)
    f.add_argument("data", help="CSV (time,event,w[,area],z1..zJ) or JSON records")
    f.add_argument("--config", help="key = value settings file")
    f.add_argument("--out", default="fit-output")
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int, default=threads)
    f.add_argument("--chains", type=int)
    f.add_argument("--n-iter", dest="n_iter", type=int)
    f.add_argument("--n-burn", dest="n_burn", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--bandwidth", type=float, help="override the KDE bandwidth for BF10")
    f.add_argument("--prior-sensitivity", action="store_true", help="refit under the five sensitivity priors")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation study", epilog=SIMULATE_KEYS, formatter_class=fmt)
    s.add_argument("config", nargs="?", help="scenario settings file")
    s.add_argument("--scenario", type=int, help="built-in scenario 1-11 (config keys override it)")
    s.add_argument("--out", default="sim-output")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=threads)
    s.add_argument("--reps", type=int)
    s.add_argument("--estimators", default="true,naive,simex,bayes_gamma,dp_mix",
                   help=f"comma list from {', '.join(ESTIMATORS)}")
    s.add_argument("--censoring", type=float, help="target censored fraction")
    s.add_argument("--parity", action="store_true", help="full-length chains and 1000 replicates")
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("simex", help="Poisson-gamma SIMEX fit", epilog=SIMEX_KEYS, formatter_class=fmt)
    x.add_argument("data")
    x.add_argument("--config")
    x.add_argument("--out", default="simex-output")
    x.add_argument("--seed", type=int)
    x.add_argument("--bootstrap", type=int, help="bootstrap resamples for standard errors")
    x.set_defaults(func=cmd_simex)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "simulate" and args.config is None and args.scenario is None:
        print("error: give a scenario config file or --scenario", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
