"""File formats: cohort CSV, truth sidecar, draws JSONL/CSV, report CSVs.

Every artifact starts with a metadata header (version, seed, config hash).
Floats are serialized with ``repr`` (shortest round-trip form), so rereading
a file reproduces the exact binary values and identical runs produce
byte-identical files.

Cohort CSV schema: ``patient_id, x_1..x_M, r_1..r_J, y_1..y_J, w_1..w_K,
p_1..p_L``; biomarker cells whose availability indicator is 0 hold the
literal ``NA``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .advi import ElboTrace
from .data import CohortData, GaussianPrior, ParameterState, ParamLayout, PriorSpec
from .diagnostics import (
    ComparisonTable,
    PsisResult,
    SummaryReport,
    SummaryRow,
    K_WARN,
    K_GOOD,
    K_BAD,
)
from .draws import PosteriorDraws

__all__ = [
    "VERSION",
    "config_hash",
    "write_cohort_csv",
    "read_cohort_csv",
    "write_truth_json",
    "params_to_dict",
    "params_from_dict",
    "priors_to_dict",
    "priors_from_dict",
    "write_draws_jsonl",
    "read_draws_jsonl",
    "write_draws_csv",
    "write_trace_csv",
    "write_summary_csv",
    "read_summary_csv",
    "write_comparison_csv",
    "write_psis_csv",
    "write_waic_json",
    "write_rhat_csv",
]

VERSION = "0.1.0"


def _fmt(x) -> str:
    return repr(float(x))


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form; excludes output paths and thread
    counts so relocated or reparallelized runs keep the same identity."""
    scrubbed = {k: v for k, v in config.items() if k not in ("out", "threads")}
    canon = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _header_lines(seed, cfg_hash: str) -> list[str]:
    return [
        f"# latentphen-version: {VERSION}",
        f"# seed: {seed}",
        f"# config-sha256: {cfg_hash}",
    ]


def _read_header(lines: list[str]) -> dict:
    out = {}
    for line in lines:
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        out[key.strip()] = value.strip()
    return out


# -- cohort ------------------------------------------------------------------


def write_cohort_csv(path, data: CohortData, seed, cfg_hash: str) -> None:
    n, m = data.n_patients, data.n_covariates
    j, k, l = data.n_markers, data.n_codes, data.n_meds
    cols = (["patient_id"]
            + [f"x_{c + 1}" for c in range(m)]
            + [f"r_{c + 1}" for c in range(j)]
            + [f"y_{c + 1}" for c in range(j)]
            + [f"w_{c + 1}" for c in range(k)]
            + [f"p_{c + 1}" for c in range(l)])
    lines = _header_lines(seed, cfg_hash)
    lines.append(",".join(cols))
    for i in range(n):
        row = [str(i)]
        row += [_fmt(v) for v in data.covariates[i]]
        row += [str(int(v)) for v in data.avail[i]]
        row += [_fmt(data.markers[i, c]) if data.avail[i, c] else "NA"
                for c in range(j)]
        row += [str(int(v)) for v in data.codes[i]]
        row += [str(int(v)) for v in data.meds[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cohort_csv(path) -> tuple[CohortData, dict]:
    lines = Path(path).read_text().splitlines()
    header = _read_header(lines)
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        raise ValueError(f"{path}: no data rows")
    cols = body[0].split(",")

    def count(prefix):
        return sum(1 for c in cols if c.startswith(prefix))

    m, j, k, l = count("x_"), count("r_"), count("y_"), 0
    if j != count("y_"):
        raise ValueError(f"{path}: r_*/y_* column counts differ")
    k, l = count("w_"), count("p_")
    expected = (["patient_id"]
                + [f"x_{c + 1}" for c in range(m)]
                + [f"r_{c + 1}" for c in range(j)]
                + [f"y_{c + 1}" for c in range(j)]
                + [f"w_{c + 1}" for c in range(k)]
                + [f"p_{c + 1}" for c in range(l)])
    if cols != expected:
        raise ValueError(f"{path}: header {cols} does not match the cohort schema")

    rows = body[1:]
    n = len(rows)
    covariates = np.empty((n, m))
    avail = np.empty((n, j), dtype=np.int8)
    markers = np.zeros((n, j))
    codes = np.empty((n, k), dtype=np.int8)
    meds = np.empty((n, l), dtype=np.int8)
    bad_rows = []
    for i, raw in enumerate(rows):
        parts = raw.split(",")
        if len(parts) != len(cols):
            bad_rows.append(i)
            continue
        pos = 1
        covariates[i] = [float(v) for v in parts[pos:pos + m]]; pos += m
        avail[i] = [int(v) for v in parts[pos:pos + j]]; pos += j
        for c in range(j):
            cell = parts[pos + c]
            if cell == "NA":
                if avail[i, c]:
                    bad_rows.append(i)
                markers[i, c] = 0.0
            else:
                markers[i, c] = float(cell)
        pos += j
        codes[i] = [int(v) for v in parts[pos:pos + k]]; pos += k
        meds[i] = [int(v) for v in parts[pos:pos + l]]
    if bad_rows:
        raise ValueError(f"{path}: malformed rows at indices {bad_rows[:20]}")
    return CohortData(covariates=covariates, avail=avail, markers=markers,
                      codes=codes, meds=meds), header


# -- parameter/prior serialization ------------------------------------------


def params_to_dict(params: ParameterState) -> dict:
    return {
        "pheno_coef": params.pheno_coef.tolist(),
        "avail_coef": params.avail_coef.tolist(),
        "marker_coef": params.marker_coef.tolist(),
        "marker_var": params.marker_var.tolist(),
        "code_coef": params.code_coef.tolist(),
        "med_coef": params.med_coef.tolist(),
        "pheno_re": params.pheno_re.tolist(),
    }


def params_from_dict(d: dict) -> ParameterState:
    return ParameterState(
        pheno_coef=np.asarray(d["pheno_coef"], dtype=float),
        avail_coef=np.asarray(d["avail_coef"], dtype=float).reshape(
            len(d["marker_var"]), -1),
        marker_coef=np.asarray(d["marker_coef"], dtype=float).reshape(
            len(d["marker_var"]), -1),
        marker_var=np.asarray(d["marker_var"], dtype=float),
        code_coef=np.asarray(d["code_coef"], dtype=float).reshape(
            len(d["code_coef"]), -1) if d["code_coef"] else np.empty((0, 0)),
        med_coef=np.asarray(d["med_coef"], dtype=float).reshape(
            len(d["med_coef"]), -1) if d["med_coef"] else np.empty((0, 0)),
        pheno_re=np.asarray(d["pheno_re"], dtype=float),
    )


def priors_to_dict(priors: PriorSpec) -> dict:
    def fam(p: GaussianPrior):
        return {"mean": p.mean.tolist(), "var": p.var.tolist()}

    return {
        "pheno": fam(priors.pheno),
        "avail": fam(priors.avail),
        "marker": fam(priors.marker),
        "code": fam(priors.code),
        "med": fam(priors.med),
        "var_shape": priors.var_shape,
        "var_scale": priors.var_scale,
        "re_bounds": list(priors.re_bounds),
    }


def priors_from_dict(d: dict) -> PriorSpec:
    def fam(entry):
        return GaussianPrior(np.asarray(entry["mean"], dtype=float),
                             np.asarray(entry["var"], dtype=float))

    return PriorSpec(
        pheno=fam(d["pheno"]), avail=fam(d["avail"]), marker=fam(d["marker"]),
        code=fam(d["code"]), med=fam(d["med"]),
        var_shape=float(d["var_shape"]), var_scale=float(d["var_scale"]),
        re_bounds=tuple(d["re_bounds"]),
    )


def write_truth_json(path, true_params: ParameterState, true_pheno, true_re,
                     seed, cfg_hash: str) -> None:
    doc = {
        "latentphen_version": VERSION,
        "seed": int(seed),
        "config_sha256": cfg_hash,
        "true_params": params_to_dict(true_params),
        "true_pheno": [int(v) for v in true_pheno],
        "true_re": [float(v) for v in true_re],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


# -- draws --------------------------------------------------------------------


def write_draws_jsonl(path, draws: PosteriorDraws, seed, cfg_hash: str,
                      backend: str) -> None:
    layout = draws.layout
    header = {
        "format": "latentphen-draws",
        "version": VERSION,
        "seed": int(seed),
        "config_sha256": cfg_hash,
        "backend": backend,
        "n_covariates": layout.n_covariates,
        "n_markers": layout.n_markers,
        "n_codes": layout.n_codes,
        "n_meds": layout.n_meds,
        "n_patients": layout.n_patients,
        "re_enabled": layout.re_enabled,
        "re_bounds": list(layout.re_bounds),
        "acceptance": draws.acceptance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for s in range(draws.n_draws):
            rec = {
                "chain": int(draws.chain_id[s]),
                "theta": draws.theta[s].tolist(),
            }
            if draws.re_mean is not None:
                rec["re_mean"] = float(draws.re_mean[s])
                rec["re_sd"] = float(draws.re_sd[s])
            if draws.re_draws is not None:
                rec["re"] = draws.re_draws[s].tolist()
            rec["loglik"] = draws.pointwise_loglik[s].tolist()
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_draws_jsonl(path) -> tuple[PosteriorDraws, dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "latentphen-draws":
            raise ValueError(f"{path}: not a latentphen draws file")
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise ValueError(f"{path}: contains a header but no draws")
    layout = ParamLayout(
        n_covariates=header["n_covariates"], n_markers=header["n_markers"],
        n_codes=header["n_codes"], n_meds=header["n_meds"],
        n_patients=header["n_patients"], re_enabled=header["re_enabled"],
        re_bounds=tuple(header["re_bounds"]),
    )
    theta = np.asarray([r["theta"] for r in records], dtype=float)
    loglik = np.asarray([r["loglik"] for r in records], dtype=float)
    chain = np.asarray([r["chain"] for r in records], dtype=np.int64)
    re_mean = re_sd = re_draws = None
    if "re_mean" in records[0]:
        re_mean = np.asarray([r["re_mean"] for r in records], dtype=float)
        re_sd = np.asarray([r["re_sd"] for r in records], dtype=float)
    if "re" in records[0]:
        re_draws = np.asarray([r["re"] for r in records], dtype=float)
    draws = PosteriorDraws(layout=layout, theta=theta, pointwise_loglik=loglik,
                           chain_id=chain, re_mean=re_mean, re_sd=re_sd,
                           re_draws=re_draws, acceptance=header.get("acceptance", {}))
    return draws, header


def write_draws_csv(path, draws: PosteriorDraws, seed, cfg_hash: str) -> None:
    """Wide CSV export of the fixed-parameter draws (no loglik matrix)."""
    names = draws.layout.fixed_names
    cols = ["chain", "draw"] + list(names)
    if draws.re_mean is not None:
        cols += ["re_mean", "re_sd"]
    lines = _header_lines(seed, cfg_hash)
    lines.append(",".join(cols))
    counter: dict[int, int] = {}
    for s in range(draws.n_draws):
        cid = int(draws.chain_id[s])
        idx = counter.get(cid, 0)
        counter[cid] = idx + 1
        row = [str(cid), str(idx)] + [_fmt(v) for v in draws.theta[s]]
        if draws.re_mean is not None:
            row += [_fmt(draws.re_mean[s]), _fmt(draws.re_sd[s])]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


# -- traces, reports, diagnostics artifacts -----------------------------------


def write_trace_csv(path, trace: ElboTrace, seed, cfg_hash: str) -> None:
    lines = _header_lines(seed, cfg_hash)
    lines.append(f"# stop-reason: {trace.stop_reason}")
    lines.append("iteration,elbo,rel_change,elbo_se")
    for i in range(trace.iterations.shape[0]):
        lines.append(",".join([
            str(int(trace.iterations[i])), _fmt(trace.elbo[i]),
            _fmt(trace.rel_change[i]), _fmt(trace.elbo_se[i]),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_csv(path, report: SummaryReport, seed, cfg_hash: str) -> None:
    lines = _header_lines(seed, cfg_hash)
    lines.append("name,mean,lower,upper")
    for r in report.rows:
        lines.append(f"{r.name},{_fmt(r.mean)},{_fmt(r.lower)},{_fmt(r.upper)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary_csv(path) -> tuple[SummaryReport, dict]:
    lines = Path(path).read_text().splitlines()
    header = _read_header(lines)
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    rows = []
    for ln in body[1:]:
        name, mean, lower, upper = ln.split(",")
        rows.append(SummaryRow(name=name, mean=float(mean),
                               lower=float(lower), upper=float(upper)))
    return SummaryReport(rows=tuple(rows)), header


def write_comparison_csv(path, table: ComparisonTable, seed, cfg_hash: str) -> None:
    lines = _header_lines(seed, cfg_hash)
    lines.append(f"# divergence-multiple: {_fmt(table.multiple)}")
    lines.append("name,mean_a,lower_a,upper_a,mean_b,lower_b,upper_b,diverged")
    for r in table.rows:
        lines.append(",".join([
            r.name, _fmt(r.mean_a), _fmt(r.lower_a), _fmt(r.upper_a),
            _fmt(r.mean_b), _fmt(r.lower_b), _fmt(r.upper_b),
            "1" if r.diverged else "0",
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def _k_bucket(k: float) -> str:
    if k < K_GOOD:
        return "good"
    if k <= K_BAD:
        return "moderate"
    return "bad"


def write_psis_csv(path, result: PsisResult, seed, cfg_hash: str) -> None:
    degenerate = set(result.degenerate.tolist())
    lines = _header_lines(seed, cfg_hash)
    lines.append(f"# elpd-loo: {_fmt(result.elpd_loo)}")
    lines.append(f"# elpd-loo-se: {_fmt(result.elpd_loo_se)}")
    lines.append("patient_id,pareto_k,elpd_pointwise,bucket,degenerate")
    for i, k in enumerate(result.pareto_k):
        lines.append(",".join([
            str(i), _fmt(k), _fmt(result.elpd_pointwise[i]), _k_bucket(k),
            "1" if i in degenerate else "0",
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_waic_json(path, elpd_waic: float, p_waic: float, seed,
                    cfg_hash: str) -> None:
    doc = {
        "latentphen_version": VERSION,
        "seed": int(seed),
        "config_sha256": cfg_hash,
        "elpd_waic": elpd_waic,
        "p_waic": p_waic,
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def write_rhat_csv(path, rows: list[tuple[str, float, float]], seed,
                   cfg_hash: str) -> None:
    lines = _header_lines(seed, cfg_hash)
    lines.append("quantity,rhat,ess")
    for name, rhat, ess in rows:
        lines.append(f"{name},{_fmt(rhat)},{_fmt(ess)}")
    Path(path).write_text("\n".join(lines) + "\n")
