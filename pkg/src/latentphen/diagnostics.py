"""Goodness-of-fit and convergence diagnostics.

Covers importance-sampling leave-one-out with Pareto-smoothed weights,
WAIC, rank-normalized split R-hat with bulk effective sample size, and the
posterior summary / backend-comparison reports (per-indicator sensitivity
and specificity plus per-biomarker mean shifts, all computed on the
per-draw transformed scale and only then averaged).

The generalized Pareto tail fit is the empirical-Bayes profile estimator of
Zhang & Stephens (2009): a fixed grid over the transformed parameter b,
anchored at the first-quartile order statistic, weighted by profile
likelihood; the resulting shape is regularized toward 1/2 with a
10-pseudo-observation prior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, ndtri

from .data import CohortData
from .draws import PosteriorDraws

__all__ = [
    "PsisResult",
    "SummaryRow",
    "SummaryReport",
    "ComparisonRow",
    "ComparisonTable",
    "fit_generalized_pareto",
    "gpd_quantile",
    "psis_smooth",
    "psis_loo",
    "waic",
    "rhat_ess",
    "summarize",
    "compare",
]

K_GOOD = 0.5
K_WARN = 0.7
K_BAD = 1.0


# -- generalized Pareto tail fitting -----------------------------------------


def fit_generalized_pareto(exceedances: np.ndarray) -> tuple[float, float]:
    """Estimate (shape k, scale sigma) of a GPD from positive exceedances.

    Positive k means a heavy tail. Requires at least 5 points.
    """
    x = np.sort(np.asarray(exceedances, dtype=float))
    n = x.shape[0]
    if n < 5:
        raise ValueError("generalized Pareto fit needs at least 5 tail samples")
    if x[0] <= 0:
        raise ValueError("exceedances must be strictly positive")

    prior_bs = 3.0
    prior_k_obs = 10.0
    m = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]

    k_grid = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-b / k_grid) - k_grid - 1.0)
    with np.errstate(over="ignore"):  # distant grid points get weight 0
        weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = weights >= 10.0 * np.finfo(float).eps
    weights = weights[keep] / weights[keep].sum()
    b_post = float(np.sum(b[keep] * weights))

    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k_obs * 0.5) / (n + prior_k_obs)
    return k_post, float(sigma)


def gpd_quantile(p, k: float, sigma: float) -> np.ndarray:
    """Inverse CDF of the GPD with location 0 (continuous in k at 0)."""
    p = np.asarray(p, dtype=float)
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios.

    The largest ceil(min(S/5, 3*sqrt(S))) ratios are replaced by expected
    order statistics of a GPD fitted to their exceedances over the tail
    threshold, truncated at the largest raw ratio; the output is normalized
    to logsumexp zero. Returns (log_weights, k_hat); k_hat is -inf for a
    constant column (degenerate) and +inf when the tail cannot be fitted.
    """
    x = np.asarray(log_ratios, dtype=float).copy()
    s = x.shape[0]
    x -= np.max(x)
    if np.all(x == x[0]):
        return x - logsumexp(x), float("-inf")

    tail_size = int(np.ceil(min(0.2 * s, 3.0 * np.sqrt(s))))
    order = np.argsort(x)
    cutoff = max(x[order[-tail_size - 1]], np.log(np.finfo(float).tiny))
    (tail_idx,) = np.where(x > cutoff)
    if tail_idx.shape[0] <= 4:
        return x - logsumexp(x), float("inf")

    tail = x[tail_idx]
    tail_order = np.argsort(tail)
    exceed = np.exp(tail[tail_order]) - np.exp(cutoff)
    k_hat, sigma = fit_generalized_pareto(exceed)
    if np.isfinite(k_hat):
        probs = (np.arange(tail.shape[0]) + 0.5) / tail.shape[0]
        smoothed = np.log(gpd_quantile(probs, k_hat, sigma) + np.exp(cutoff))
        x[tail_idx[tail_order]] = smoothed
        np.minimum(x, 0.0, out=x)  # never exceed the largest raw ratio
    return x - logsumexp(x), float(k_hat)


# -- leave-one-out and WAIC ----------------------------------------------------


@dataclass(frozen=True)
class PsisResult:
    """Per-observation Pareto shapes plus the smoothed-importance LOO score."""

    pareto_k: np.ndarray
    elpd_loo: float
    elpd_loo_se: float
    elpd_pointwise: np.ndarray
    smoothed_log_weights: np.ndarray | None = None
    degenerate: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def k_buckets(self) -> dict[str, int]:
        """Counts in the {k<0.5, 0.5<=k<=1, k>1} partition."""
        k = self.pareto_k
        return {
            "good": int(np.sum(k < K_GOOD)),
            "moderate": int(np.sum((k >= K_GOOD) & (k <= K_BAD))),
            "bad": int(np.sum(k > K_BAD)),
        }


def _loglik_matrix(draws) -> np.ndarray:
    if isinstance(draws, PosteriorDraws):
        return draws.pointwise_loglik
    mat = np.asarray(draws, dtype=float)
    if mat.ndim != 2:
        raise ValueError("expected a PosteriorDraws or an (S, N) log-lik matrix")
    return mat


def psis_loo(draws, retain_weights: bool = True) -> PsisResult:
    """Pareto-smoothed importance-sampling leave-one-out estimate.

    Importance ratios per patient are the reciprocal likelihoods of the
    stored draws. Fewer than 100 draws triggers a warning; fewer than 5 is
    an error (no tail to fit). Constant log-likelihood columns are reported
    with k = -inf and listed in ``degenerate``.
    """
    loglik = _loglik_matrix(draws)
    s, n = loglik.shape
    if s < 5:
        raise ValueError(f"need at least 5 draws for PSIS-LOO, got {s}")
    if s < 100:
        warnings.warn(f"PSIS-LOO with only {s} draws is unreliable", stacklevel=2)

    pareto_k = np.empty(n)
    pointwise = np.empty(n)
    log_weights = np.empty((s, n)) if retain_weights else None
    degenerate = []
    for i in range(n):
        lw, k = psis_smooth(-loglik[:, i])
        pareto_k[i] = k
        pointwise[i] = logsumexp(lw + loglik[:, i])
        if log_weights is not None:
            log_weights[:, i] = lw
        if k == float("-inf"):
            degenerate.append(i)

    elpd = float(np.sum(pointwise))
    se = float(np.sqrt(n * np.var(pointwise, ddof=1))) if n > 1 else float("nan")
    return PsisResult(
        pareto_k=pareto_k,
        elpd_loo=elpd,
        elpd_loo_se=se,
        elpd_pointwise=pointwise,
        smoothed_log_weights=log_weights,
        degenerate=np.asarray(degenerate, dtype=np.int64),
    )


def waic(draws) -> tuple[float, float]:
    """(elpd_waic, p_waic): pointwise lpd penalized by the posterior
    variance of the log likelihood."""
    loglik = _loglik_matrix(draws)
    s = loglik.shape[0]
    if s < 2:
        raise ValueError("WAIC needs at least 2 draws")
    lpd = logsumexp(loglik, axis=0) - np.log(s)
    penalty = np.var(loglik, axis=0, ddof=1)
    return float(np.sum(lpd - penalty)), float(np.sum(penalty))


# -- R-hat and effective sample size --------------------------------------------


def _chain_matrix(draws: PosteriorDraws, quantity) -> np.ndarray:
    if isinstance(quantity, str):
        x = draws.column(quantity)
    else:
        x = draws.theta[:, int(quantity)]
    chains = np.unique(draws.chain_id)
    per_chain = [x[draws.chain_id == c] for c in chains]
    length = min(len(p) for p in per_chain)
    return np.vstack([p[:length] for p in per_chain])


def _split_chains(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, half:2 * half]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = x.ravel()
    ranks = np.argsort(np.argsort(flat)) + 1.0
    z = ndtri((ranks - 0.375) / (flat.shape[0] + 0.25))
    return z.reshape(x.shape)


def _basic_rhat(x: np.ndarray) -> float:
    m, n = x.shape
    chain_means = x.mean(axis=1)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    b = n * float(np.var(chain_means, ddof=1))
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def _bulk_ess(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = float(np.mean(chain_var))
    if w == 0.0:
        return float("nan")
    mean_acov = acov.mean(axis=0)
    if m > 1:
        b = n * float(np.var(x.mean(axis=1), ddof=1))
        var_plus = (n - 1) / n * w + b / n
    else:
        var_plus = (n - 1) / n * w

    rho = np.zeros(n)
    rho[0] = 1.0
    rho[1] = 1.0 - (w - mean_acov[1]) / var_plus
    t = 1
    while t < n - 4:
        even = 1.0 - (w - mean_acov[t + 1]) / var_plus
        odd = 1.0 - (w - mean_acov[t + 2]) / var_plus
        if even + odd < 0:
            break
        rho[t + 1] = even
        rho[t + 2] = odd
        t += 2
    max_t = t

    # Geyer: sums of adjacent pairs, forced monotone nonincreasing.
    pair = rho[: max_t + 1][: (max_t + 1) // 2 * 2].reshape(-1, 2).sum(axis=1)
    pair = np.minimum.accumulate(pair)
    pair = np.maximum(pair, 0.0)
    tau = -1.0 + 2.0 * float(np.sum(pair))
    tau = max(tau, 1.0 / np.log10(m * n + 10.0))
    return float(m * n / tau)


def rhat_ess(draws: PosteriorDraws, quantity) -> tuple[float, float]:
    """Rank-normalized split R-hat and bulk ESS of one scalar quantity.

    ``quantity`` is a layout name (or integer column). R-hat is NaN for a
    single chain; bitwise-identical chains report exactly 1.0 (there is no
    between-chain disagreement to measure). Constant draws return
    (1.0, NaN).
    """
    x = _chain_matrix(draws, quantity)
    m = x.shape[0]
    if np.all(x == x.ravel()[0]):
        return 1.0, float("nan")

    split = _split_chains(x)
    z = _rank_normalize(split)
    ess = _bulk_ess(z)
    if m < 2:
        return float("nan"), ess
    if all(np.array_equal(x[0], x[c]) for c in range(1, m)):
        return 1.0, ess
    return _basic_rhat(z), ess


# -- posterior summaries and backend comparison ---------------------------------


@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"row {self.name}: lower > upper")


@dataclass(frozen=True)
class SummaryReport:
    rows: tuple[SummaryRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def row(self, name: str) -> SummaryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    mean_a: float
    lower_a: float
    upper_a: float
    mean_b: float
    lower_b: float
    upper_b: float
    diverged: bool


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]
    multiple: float

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def any_diverged(self) -> bool:
        return any(r.diverged for r in self.rows)

    def diverged_names(self) -> list[str]:
        return [r.name for r in self.rows if r.diverged]


def _expit(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _oriented_theta(draws: PosteriorDraws, anchor_marker: int) -> np.ndarray:
    """Per-draw label anchoring: draws whose anchor-biomarker shift is
    negative are relabeled (class 1 = class with the larger shift)."""
    layout = draws.layout
    width = layout.n_covariates + 2
    names = draws.layout.fixed_names
    shift_col = names.index(f"marker_coef_{anchor_marker + 1}_{width - 1}")
    flip = draws.theta[:, shift_col] < 0
    theta = draws.theta.copy()
    if not flip.any():
        return theta
    s = layout.slices
    theta[flip, s["pheno_coef"]] = -theta[flip, s["pheno_coef"]]
    for fam, count in (("avail_coef", layout.n_markers),
                       ("marker_coef", layout.n_markers),
                       ("code_coef", layout.n_codes),
                       ("med_coef", layout.n_meds)):
        start = s[fam].start
        for j in range(count):
            icpt = start + j * width
            phen = icpt + width - 1
            theta[flip, icpt] += theta[flip, phen]
            theta[flip, phen] = -theta[flip, phen]
    return theta


def _row_from_draws(name: str, values: np.ndarray) -> SummaryRow:
    lo, hi = np.percentile(values, [2.5, 97.5])
    return SummaryRow(name=name, mean=float(values.mean()),
                      lower=float(lo), upper=float(hi))


def summarize(draws: PosteriorDraws, data: CohortData | None = None,
              anchor_marker: int | None = None) -> SummaryReport:
    """Posterior mean and 95% interval for every derived clinical quantity.

    Rows: sensitivity/specificity per clinical code and per medication
    (reference patient, covariates at zero) and the mean shift per
    biomarker. All transforms are applied per draw before averaging.
    """
    layout = draws.layout
    if data is not None and data.n_patients != draws.n_patients:
        raise ValueError("draws and cohort disagree on the number of patients")
    if anchor_marker is None:
        anchor_marker = layout.n_markers - 1
    width = layout.n_covariates + 2
    theta = _oriented_theta(draws, anchor_marker)
    s = layout.slices

    rows: list[SummaryRow] = []
    for fam, count, label in (("code_coef", layout.n_codes, "code"),
                              ("med_coef", layout.n_meds, "med")):
        start = s[fam].start
        for j in range(count):
            icpt = theta[:, start + j * width]
            phen = theta[:, start + j * width + width - 1]
            rows.append(_row_from_draws(f"{label}_{j + 1}_sensitivity",
                                        _expit(icpt + phen)))
            rows.append(_row_from_draws(f"{label}_{j + 1}_specificity",
                                        1.0 - _expit(icpt)))
    start = s["marker_coef"].start
    for j in range(layout.n_markers):
        shift = theta[:, start + j * width + width - 1]
        rows.append(_row_from_draws(f"marker_{j + 1}_shift", shift))
    return SummaryReport(rows=tuple(rows))


def compare(report_a: SummaryReport, report_b: SummaryReport,
            multiple: float = 5.0, floor: float = 1e-6) -> ComparisonTable:
    """Side-by-side report with a divergence flag per row.

    A row diverges when the means differ by more than ``multiple`` times
    the average of the two 95%-interval half-widths (floored to avoid
    zero-width degenerate rows).
    """
    if report_a.names() != report_b.names():
        raise ValueError("summary reports have different row sets; "
                         "cannot compare across model shapes")
    rows = []
    for ra, rb in zip(report_a.rows, report_b.rows):
        half_a = 0.5 * (ra.upper - ra.lower)
        half_b = 0.5 * (rb.upper - rb.lower)
        pooled = max(0.5 * (half_a + half_b), floor)
        diverged = abs(ra.mean - rb.mean) > multiple * pooled
        rows.append(ComparisonRow(
            name=ra.name, mean_a=ra.mean, lower_a=ra.lower, upper_a=ra.upper,
            mean_b=rb.mean, lower_b=rb.lower, upper_b=rb.upper, diverged=diverged,
        ))
    return ComparisonTable(rows=tuple(rows), multiple=multiple)
