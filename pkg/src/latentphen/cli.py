"""Command-line surface: simulate, fit, diagnose, report.

One declarative JSON config document drives every command; ``--seed``,
``--out``, ``--threads`` and ``--backend`` override it. Exit codes: 0 ok,
1 diagnostic warning (high Pareto k or a flagged backend divergence),
2 input/validation error, 3 optimizer divergence abort.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .advi import AdviConfig, AdviDivergenceError, fit as advi_fit, sample_posterior
from .data import default_priors
from .diagnostics import K_WARN, compare, psis_loo, rhat_ess, summarize, waic
from .draws import PosteriorDraws
from .gibbs import McmcConfig, run_chains
from .simulate import Covariate, SimulationConfig, default_true_params, simulate_cohort

_EXIT_OK = 0
_EXIT_WARN = 1
_EXIT_INPUT = 2
_EXIT_DIVERGED = 3


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return _EXIT_INPUT


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return json.loads(p.read_text())


def _effective_config(args) -> dict:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    cfg.setdefault("threads", 1)
    if getattr(args, "backend", None) is not None:
        cfg["backend"] = args.backend
    cfg["out"] = args.out
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, command: str, cfg: dict, cfg_hash: str,
                started: float, outputs: list[str], **extra) -> None:
    doc = {
        "latentphen_version": io.VERSION,
        "command": command,
        "seed": cfg["seed"],
        "config_sha256": cfg_hash,
        "wall_clock_s": time.time() - started,
        "outputs": outputs,
        "config": {k: v for k, v in cfg.items() if k != "out"},
    }
    doc.update(extra)
    (out / "meta.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _build_simulation(cfg: dict) -> SimulationConfig:
    section = cfg.get("simulate", {})
    covs = section.get("covariates")
    if covs is None:
        covariates = (Covariate("normal"), Covariate("bernoulli", 0.2),
                      Covariate("normal"))
    else:
        covariates = tuple(
            Covariate(c["kind"], float(c.get("value", 0.0))) for c in covs)
    if "true_params" in section:
        true_params = io.params_from_dict(section["true_params"])
    else:
        true_params = default_true_params()
    return SimulationConfig(
        n_patients=int(section.get("n_patients", 5000)),
        true_params=true_params,
        covariate_spec=covariates,
        seed=int(cfg["seed"]),
        re_bounds=tuple(section.get("re_bounds", (-1.0, 1.0))),
        regenerate_re=bool(section.get("regenerate_re", True)),
    )


def cmd_simulate(args) -> int:
    cfg = _effective_config(args)
    try:
        sim = _build_simulation(cfg)
    except (ValueError, KeyError) as exc:
        return _fail(f"invalid simulation config: {exc}")
    started = time.time()
    cfg_hash = io.config_hash(cfg)
    out = _out_dir(cfg)
    data, pheno, re = simulate_cohort(sim)
    io.write_cohort_csv(out / "cohort.csv", data, cfg["seed"], cfg_hash)
    io.write_truth_json(out / "truth.json", sim.true_params, pheno, re,
                        cfg["seed"], cfg_hash)
    _write_meta(out, "simulate", cfg, cfg_hash, started,
                ["cohort.csv", "truth.json"])
    print(f"wrote cohort.csv and truth.json to {out}")
    return _EXIT_OK


def _resolve_priors(cfg: dict, n_covariates: int):
    if "priors" in cfg:
        priors = io.priors_from_dict(cfg["priors"])
        if priors.n_covariates != n_covariates:
            raise ValueError(
                f"priors are for M={priors.n_covariates} covariates, "
                f"cohort has M={n_covariates}")
        return priors
    defaults = cfg.get("prior_defaults", {})
    return default_priors(n_covariates, **defaults)


def cmd_fit(args) -> int:
    cfg = _effective_config(args)
    cohort_path = args.cohort or cfg.get("fit", {}).get("cohort")
    if not cohort_path:
        return _fail("no cohort file given (use --cohort or config fit.cohort)")
    if not Path(cohort_path).is_file():
        return _fail(f"cohort file not found: {cohort_path}")
    backend = cfg.get("backend", "gibbs")
    if backend not in ("gibbs", "advi"):
        return _fail(f"unknown backend {backend!r}")
    cfg["fit"] = dict(cfg.get("fit", {}), cohort=str(cohort_path))

    try:
        data, _ = io.read_cohort_csv(cohort_path)
        priors = _resolve_priors(cfg, data.n_covariates)
    except ValueError as exc:
        return _fail(str(exc))

    started = time.time()
    cfg_hash = io.config_hash(cfg)
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    store_re = bool(cfg.get("fit", {}).get("store_re", False))

    if backend == "gibbs":
        section = dict(cfg.get("gibbs", {}))
        section["seed"] = seed
        section["store_re"] = store_re
        try:
            mcmc = McmcConfig(**section)
            draws = run_chains(mcmc, priors, data, threads=int(cfg["threads"]))
        except (TypeError, ValueError) as exc:
            return _fail(f"gibbs configuration: {exc}")
        io.write_draws_jsonl(out / "draws.jsonl", draws, seed, cfg_hash, "gibbs")
        outputs = ["draws.jsonl"]
        if args.csv:
            io.write_draws_csv(out / "draws.csv", draws, seed, cfg_hash)
            outputs.append("draws.csv")
        _write_meta(out, "fit", cfg, cfg_hash, started, outputs,
                    backend="gibbs", acceptance=draws.acceptance)
        print(f"gibbs: {draws.n_draws} draws over {draws.n_chains} chains -> {out}")
        return _EXIT_OK

    section = dict(cfg.get("advi", {}))
    n_draws = int(section.pop("n_draws", 1000))
    section["seed"] = seed
    try:
        advi_cfg = AdviConfig(**section)
    except (TypeError, ValueError) as exc:
        return _fail(f"advi configuration: {exc}")
    try:
        q, trace = advi_fit(advi_cfg, priors, data)
    except AdviDivergenceError as exc:
        io.write_trace_csv(out / "trace.csv", exc.trace, seed, cfg_hash)
        _write_meta(out, "fit", cfg, cfg_hash, started, ["trace.csv"],
                    backend="advi", stop_reason="divergence")
        print(f"error: ADVI diverged: {exc}", file=sys.stderr)
        return _EXIT_DIVERGED
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    draws = sample_posterior(q, n_draws, rng, data, store_re=store_re)
    io.write_draws_jsonl(out / "draws.jsonl", draws, seed, cfg_hash, "advi")
    io.write_trace_csv(out / "trace.csv", trace, seed, cfg_hash)
    outputs = ["draws.jsonl", "trace.csv"]
    if args.csv:
        io.write_draws_csv(out / "draws.csv", draws, seed, cfg_hash)
        outputs.append("draws.csv")
    _write_meta(out, "fit", cfg, cfg_hash, started, outputs, backend="advi",
                stop_reason=trace.stop_reason,
                iterations=int(trace.iterations[-1]))
    print(f"advi: stopped by {trace.stop_reason} at iteration "
          f"{int(trace.iterations[-1])}, {n_draws} posterior draws -> {out}")
    return _EXIT_OK


def _read_pooled_draws(paths) -> PosteriorDraws:
    pooled = None
    offset = 0
    for path in paths:
        if not Path(path).is_file():
            raise FileNotFoundError(f"draws file not found: {path}")
        draws, _ = io.read_draws_jsonl(path)
        if pooled is None:
            pooled = draws
            offset = int(draws.chain_id.max()) + 1
            continue
        if pooled.layout != draws.layout:
            raise ValueError(f"{path}: model shape differs from the first draws file")
        pooled = PosteriorDraws(
            layout=pooled.layout,
            theta=np.vstack([pooled.theta, draws.theta]),
            pointwise_loglik=np.vstack([pooled.pointwise_loglik,
                                        draws.pointwise_loglik]),
            chain_id=np.concatenate([pooled.chain_id, draws.chain_id + offset]),
            re_mean=(np.concatenate([pooled.re_mean, draws.re_mean])
                     if pooled.re_mean is not None and draws.re_mean is not None
                     else None),
            re_sd=(np.concatenate([pooled.re_sd, draws.re_sd])
                   if pooled.re_sd is not None and draws.re_sd is not None
                   else None),
            acceptance={},
        )
        offset = int(pooled.chain_id.max()) + 1
    return pooled


def cmd_diagnose(args) -> int:
    cfg = _effective_config(args)
    started = time.time()
    out = _out_dir(cfg)
    try:
        draws = _read_pooled_draws(args.draws)
        result = psis_loo(draws, retain_weights=False)
        elpd_waic, p_waic = waic(draws)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    cfg_hash = io.config_hash(cfg)
    seed = cfg["seed"]
    io.write_psis_csv(out / "psis.csv", result, seed, cfg_hash)
    io.write_waic_json(out / "waic.json", elpd_waic, p_waic, seed, cfg_hash)
    rows = [(name, *rhat_ess(draws, name)) for name in draws.layout.fixed_names]
    io.write_rhat_csv(out / "rhat.csv", rows, seed, cfg_hash)
    n_high = int(np.sum(result.pareto_k > K_WARN))
    _write_meta(out, "diagnose", cfg, cfg_hash, started,
                ["psis.csv", "waic.json", "rhat.csv"],
                inputs=[str(p) for p in args.draws],
                n_pareto_k_above_warn=n_high)
    print(f"elpd_loo {result.elpd_loo:.2f} (se {result.elpd_loo_se:.2f}), "
          f"elpd_waic {elpd_waic:.2f}, {n_high} observations with k > {K_WARN}")
    return _EXIT_WARN if n_high else _EXIT_OK


def cmd_report(args) -> int:
    cfg = _effective_config(args)
    started = time.time()
    out = _out_dir(cfg)
    cfg_hash = io.config_hash(cfg)
    seed = cfg["seed"]
    try:
        draws_a, _ = io.read_draws_jsonl(args.draws_a)
        report_a = summarize(draws_a)
        outputs = ["summary.csv"]
        io.write_summary_csv(out / "summary.csv", report_a, seed, cfg_hash)
        diverged = False
        if args.draws_b is not None:
            draws_b, _ = io.read_draws_jsonl(args.draws_b)
            report_b = summarize(draws_b)
            table = compare(report_a, report_b,
                            multiple=float(cfg.get("report", {}).get("multiple", 5.0)))
            io.write_summary_csv(out / "summary_b.csv", report_b, seed, cfg_hash)
            io.write_comparison_csv(out / "comparison.csv", table, seed, cfg_hash)
            outputs += ["summary_b.csv", "comparison.csv"]
            diverged = table.any_diverged()
            if diverged:
                print(f"divergence flagged for: {', '.join(table.diverged_names())}")
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    _write_meta(out, "report", cfg, cfg_hash, started, outputs,
                inputs=[str(args.draws_a)]
                + ([str(args.draws_b)] if args.draws_b else []))
    print(f"wrote {', '.join(outputs)} to {out}")
    return _EXIT_WARN if diverged else _EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentphen",
        description="Bayesian latent-class phenotyping: synthetic cohorts, "
                    "Gibbs and variational fits, fit diagnostics and reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if threads:
            p.add_argument("--threads", type=int, help="worker cap (chains)")

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    common(p, threads=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a cohort with one backend")
    common(p)
    p.add_argument("--backend", choices=("gibbs", "advi"))
    p.add_argument("--cohort", help="cohort CSV (overrides config fit.cohort)")
    p.add_argument("--csv", action="store_true",
                   help="also export draws as CSV (no loglik matrix)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="PSIS-LOO, WAIC, R-hat/ESS")
    common(p, threads=False)
    p.add_argument("draws", nargs="+", help="draws.jsonl files (pooled)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="posterior summary and comparison tables")
    common(p, threads=False)
    p.add_argument("draws_a", help="draws.jsonl")
    p.add_argument("draws_b", nargs="?", default=None,
                   help="second draws.jsonl to compare against")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    except json.JSONDecodeError as exc:
        return _fail(f"malformed JSON config: {exc}")


if __name__ == "__main__":
    sys.exit(main())
