"""Generative model core: marginalized likelihood, prior, joint, gradient.

Each patient carries a binary latent phenotype D. Conditional on D and the
covariates, availability/code/medication indicators are Bernoulli with
logit-linear means on the design (1, x, D), and each available biomarker is
Gaussian with a logit-free linear mean on the same design and residual
variance ``marker_var[j]``. The patient likelihood marginalizes D over its
two values; all mixing happens in log space via log-sum-exp.

Per-patient contributions are independent; reductions over patients use a
fixed (sequential numpy) summation order so results are reproducible under
any caller-side parallelism.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .data import CohortData, ParameterState, ParamLayout, PriorSpec

__all__ = [
    "expit",
    "log_lik_patient",
    "log_lik_all",
    "class_posterior",
    "class_posterior_all",
    "log_prior",
    "log_joint",
    "grad_log_joint",
    "sensitivity",
    "specificity",
]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def expit(x):
    """Inverse logit 1/(1+exp(-x)), branch-stable for large |x|.

    Accepts scalars or arrays; never overflows (exp is only taken of
    non-positive values).
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out


def _bernoulli_loglik(z, lp):
    """log Bernoulli(z | expit(lp)) = z*lp - log(1 + exp(lp)), elementwise."""
    return z * lp - np.logaddexp(0.0, lp)


def _normal_loglik(resid, var):
    return -_HALF_LOG_2PI - 0.5 * np.log(var) - resid * resid / (2.0 * var)


def _invgamma_logpdf(x, shape, scale):
    return shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def _gaussian_logpdf_sum(value, mean, var):
    resid = value - mean
    return float(np.sum(-_HALF_LOG_2PI - 0.5 * np.log(var) - resid * resid / (2.0 * var)))


def _class_log_terms(
    params: ParameterState,
    design: np.ndarray,
    avail: np.ndarray,
    avail_mask: np.ndarray,
    markers: np.ndarray,
    codes: np.ndarray,
    meds: np.ndarray,
    pheno_re: np.ndarray,
):
    """Per-patient log terms for D=0 and D=1 (the two mixture components).

    Each term is log P(D=d) plus the log density of every observed block
    given D=d; biomarker cells enter only where available.
    """
    score = design @ params.pheno_coef + pheno_re
    t1 = _bernoulli_loglik(1.0, score)
    t0 = _bernoulli_loglik(0.0, score)

    for j in range(params.n_markers):
        base = design @ params.avail_coef[j, :-1]
        rj = avail[:, j]
        t0 = t0 + _bernoulli_loglik(rj, base)
        t1 = t1 + _bernoulli_loglik(rj, base + params.avail_coef[j, -1])

        mean = design @ params.marker_coef[j, :-1]
        mj = avail_mask[:, j]
        yj = markers[:, j]
        var = params.marker_var[j]
        t0 = t0 + mj * _normal_loglik(yj - mean, var)
        t1 = t1 + mj * _normal_loglik(yj - mean - params.marker_coef[j, -1], var)

    for k in range(params.n_codes):
        base = design @ params.code_coef[k, :-1]
        wk = codes[:, k]
        t0 = t0 + _bernoulli_loglik(wk, base)
        t1 = t1 + _bernoulli_loglik(wk, base + params.code_coef[k, -1])

    for l in range(params.n_meds):
        base = design @ params.med_coef[l, :-1]
        pl = meds[:, l]
        t0 = t0 + _bernoulli_loglik(pl, base)
        t1 = t1 + _bernoulli_loglik(pl, base + params.med_coef[l, -1])

    return t0, t1


def class_log_terms(params: ParameterState, data: CohortData):
    """(t0, t1) arrays of length N; log_lik_all = logaddexp(t0, t1)."""
    return _class_log_terms(
        params, data.design, data.avail, data.avail_mask,
        data.markers, data.codes, data.meds, params.pheno_re,
    )


def log_lik_all(params: ParameterState, data: CohortData) -> np.ndarray:
    """Marginal (over D) log likelihood per patient, length N."""
    t0, t1 = class_log_terms(params, data)
    return np.logaddexp(t0, t1)


def log_lik_patient(params: ParameterState, data: CohortData, i: int) -> float:
    """Marginal log likelihood of patient ``i``."""
    n = data.n_patients
    if not -n <= i < n:
        raise IndexError(f"patient index {i} out of range for N={n}")
    i = i % n
    sl = slice(i, i + 1)
    t0, t1 = _class_log_terms(
        params, data.design[sl], data.avail[sl], data.avail_mask[sl],
        data.markers[sl], data.codes[sl], data.meds[sl], params.pheno_re[sl],
    )
    return float(np.logaddexp(t0, t1)[0])


def class_posterior_all(params: ParameterState, data: CohortData) -> np.ndarray:
    """P(D_i = 1 | observed blocks, params) for every patient."""
    t0, t1 = class_log_terms(params, data)
    return expit(t1 - t0)


def class_posterior(params: ParameterState, data: CohortData, i: int) -> float:
    n = data.n_patients
    if not -n <= i < n:
        raise IndexError(f"patient index {i} out of range for N={n}")
    i = i % n
    sl = slice(i, i + 1)
    t0, t1 = _class_log_terms(
        params, data.design[sl], data.avail[sl], data.avail_mask[sl],
        data.markers[sl], data.codes[sl], data.meds[sl], params.pheno_re[sl],
    )
    return float(expit(t1 - t0)[0])


def log_prior(params: ParameterState, priors: PriorSpec) -> float:
    """Sum of the independent log prior densities.

    Returns -inf (rejection, not an error) when a parameter lies outside
    its support: non-positive variances, or random effects outside the
    prior bounds.
    """
    if (params.marker_var <= 0).any():
        return -np.inf
    a, b = priors.re_bounds
    eta = params.pheno_re
    if priors.re_enabled:
        if (eta < a).any() or (eta > b).any():
            return -np.inf
    elif (eta != a).any():
        # Disabled random effect is a point mass at the common bound.
        return -np.inf

    total = _gaussian_logpdf_sum(params.pheno_coef, priors.pheno.mean, priors.pheno.var)
    for j in range(params.n_markers):
        total += _gaussian_logpdf_sum(params.avail_coef[j], priors.avail.mean, priors.avail.var)
        total += _gaussian_logpdf_sum(params.marker_coef[j], priors.marker.mean, priors.marker.var)
        total += float(_invgamma_logpdf(params.marker_var[j], priors.var_shape, priors.var_scale))
    for k in range(params.n_codes):
        total += _gaussian_logpdf_sum(params.code_coef[k], priors.code.mean, priors.code.var)
    for l in range(params.n_meds):
        total += _gaussian_logpdf_sum(params.med_coef[l], priors.med.mean, priors.med.var)
    if priors.re_enabled:
        total += -np.log(b - a) * eta.shape[0]
    return total


def log_joint(params: ParameterState, priors: PriorSpec, data: CohortData | None) -> float:
    """log prior plus the sum of per-patient marginal log likelihoods."""
    lp = log_prior(params, priors)
    if not np.isfinite(lp) or data is None or data.n_patients == 0:
        return lp
    return lp + float(np.sum(log_lik_all(params, data)))


def grad_log_prior(params: ParameterState, priors: PriorSpec,
                   layout: ParamLayout) -> np.ndarray:
    """Gradient of log_prior in layout order (zero for the uniform terms)."""
    g = np.zeros(layout.n_params)
    s = layout.slices
    g[s["pheno_coef"]] = -(params.pheno_coef - priors.pheno.mean) / priors.pheno.var
    g[s["avail_coef"]] = (-(params.avail_coef - priors.avail.mean)
                          / priors.avail.var).ravel()
    g[s["marker_coef"]] = (-(params.marker_coef - priors.marker.mean)
                           / priors.marker.var).ravel()
    var = params.marker_var
    g[s["marker_var"]] = -(priors.var_shape + 1.0) / var + priors.var_scale / (var * var)
    if params.n_codes:
        g[s["code_coef"]] = (-(params.code_coef - priors.code.mean)
                             / priors.code.var).ravel()
    if params.n_meds:
        g[s["med_coef"]] = (-(params.med_coef - priors.med.mean)
                            / priors.med.var).ravel()
    return g


def grad_log_lik(params: ParameterState, data: CohortData, layout: ParamLayout,
                 rows: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the summed marginal log likelihood, layout order.

    ``rows`` restricts the sum to a patient subset (minibatching); random
    effect partials are then placed at those patients' coordinates and all
    other patients' coordinates stay zero. No prior terms are included.
    """
    design = data.design
    avail, avail_mask = data.avail, data.avail_mask
    markers, codes, meds = data.markers, data.codes, data.meds
    re = params.pheno_re
    if rows is not None:
        design = design[rows]
        avail, avail_mask = avail[rows], avail_mask[rows]
        markers, codes, meds = markers[rows], codes[rows], meds[rows]
        re = re[rows]

    t0, t1 = _class_log_terms(params, design, avail, avail_mask,
                              markers, codes, meds, re)
    denom = np.logaddexp(t0, t1)
    w1 = np.exp(t1 - denom)
    w0 = np.exp(t0 - denom)

    g = np.zeros(layout.n_params)
    s = layout.slices
    width = layout.n_covariates + 2

    prevalence = expit(design @ params.pheno_coef + re)
    g[s["pheno_coef"]] = design.T @ (w1 - prevalence)
    if layout.re_enabled:
        re_grad = w1 - prevalence
        if rows is None:
            g[s["pheno_re"]] = re_grad
        else:
            full = np.zeros(layout.n_patients)
            full[rows] = re_grad
            g[s["pheno_re"]] = full

    def bernoulli_block(z, coef):
        lp0 = design @ coef[:-1]
        lp1 = lp0 + coef[-1]
        resid = w0 * (z - expit(lp0)) + w1 * (z - expit(lp1))
        out = np.empty(width)
        out[:-1] = design.T @ resid
        out[-1] = w1 @ (z - expit(lp1))
        return out

    ga = np.empty((params.n_markers, width))
    gm = np.empty((params.n_markers, width))
    gv = np.empty(params.n_markers)
    for j in range(params.n_markers):
        ga[j] = bernoulli_block(avail[:, j], params.avail_coef[j])

        mj = avail_mask[:, j]
        var = params.marker_var[j]
        mean = design @ params.marker_coef[j, :-1]
        e0 = markers[:, j] - mean
        e1 = e0 - params.marker_coef[j, -1]
        gm[j, :-1] = design.T @ (mj * (w0 * e0 + w1 * e1)) / var
        gm[j, -1] = (mj * w1) @ e1 / var

        n_obs = float(np.sum(mj))
        sq = (mj * (w0 * e0 * e0 + w1 * e1 * e1)).sum()
        gv[j] = -0.5 * n_obs / var + sq / (2.0 * var * var)
    g[s["avail_coef"]] = ga.ravel()
    g[s["marker_coef"]] = gm.ravel()
    g[s["marker_var"]] = gv

    if params.n_codes:
        g[s["code_coef"]] = np.concatenate([
            bernoulli_block(codes[:, k], params.code_coef[k])
            for k in range(params.n_codes)
        ])
    if params.n_meds:
        g[s["med_coef"]] = np.concatenate([
            bernoulli_block(meds[:, l], params.med_coef[l])
            for l in range(params.n_meds)
        ])
    return g


def grad_log_joint(
    params: ParameterState,
    priors: PriorSpec,
    data: CohortData,
    layout: ParamLayout | None = None,
) -> np.ndarray:
    """Exact gradient of log_joint on the constrained scale.

    The flat output follows ``ParamLayout`` order (pheno_coef, avail_coef,
    marker_coef, marker_var, code_coef, med_coef, then pheno_re when the
    random effect is enabled). Raises on boundary parameters, where the
    one-sided support makes the derivative undefined.
    """
    if layout is None:
        layout = ParamLayout.for_model(data, priors)
    a, b = priors.re_bounds
    if (params.marker_var <= 0).any():
        raise ValueError("marker_var must be strictly positive for gradients")
    if layout.re_enabled and ((params.pheno_re <= a).any() or (params.pheno_re >= b).any()):
        raise ValueError("pheno_re must lie strictly inside its prior bounds")
    return grad_log_prior(params, priors, layout) + grad_log_lik(params, data, layout)


def sensitivity(beta0: float, beta1: float) -> float:
    """True-positive rate of a binary indicator: expit(beta0 + beta1)."""
    return expit(beta0 + beta1)


def specificity(beta0: float) -> float:
    """True-negative rate of a binary indicator: 1 - expit(beta0)."""
    return 1.0 - expit(beta0)
