"""Fused numba kernels for the sampler's hot paths.

The marginal Metropolis moves spend almost all their time summing
log-add-exp mixtures over patients; fusing the passes removes the
temporaries and ufunc overhead of the equivalent numpy expressions.
fastmath stays off so operations keep IEEE order and runs stay
bit-reproducible.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def class_terms(design, fam_coefs, indicators, markers, avail_mask,
                marker_coefs, marker_vars, pheno_coef, pheno_re,
                t0_out, t1_out, c0p_out, c1p_out, c0f_out, c1f_out,
                c0m_out, c1m_out):
    """Per-class log terms for every patient plus all per-block caches.

    Returns the summed log-add-exp of the two class terms (the marginal
    log likelihood of the whole cohort).
    """
    n, m1 = design.shape
    n_fam = fam_coefs.shape[0]
    n_markers = marker_coefs.shape[0]
    total = 0.0
    for i in range(n):
        s = pheno_re[i]
        for c in range(m1):
            s += design[i, c] * pheno_coef[c]
        sp = np.logaddexp(0.0, s)
        t0 = -sp
        t1 = s - sp
        c0p_out[i] = t0
        c1p_out[i] = t1
        for q in range(n_fam):
            lp = 0.0
            for c in range(m1):
                lp += design[i, c] * fam_coefs[q, c]
            lp1 = lp + fam_coefs[q, m1]
            zi = indicators[i, q]
            v0 = zi * lp - np.logaddexp(0.0, lp)
            v1 = zi * lp1 - np.logaddexp(0.0, lp1)
            c0f_out[i, q] = v0
            c1f_out[i, q] = v1
            t0 += v0
            t1 += v1
        for q in range(n_markers):
            if avail_mask[i, q] != 0.0:
                mu = 0.0
                for c in range(m1):
                    mu += design[i, c] * marker_coefs[q, c]
                e0 = markers[i, q] - mu
                e1 = e0 - marker_coefs[q, m1]
                var = marker_vars[q]
                cst = -0.5 * np.log(2.0 * np.pi * var)
                v0 = cst - e0 * e0 / (2.0 * var)
                v1 = cst - e1 * e1 / (2.0 * var)
            else:
                v0 = 0.0
                v1 = 0.0
            c0m_out[i, q] = v0
            c1m_out[i, q] = v1
            t0 += v0
            t1 += v1
        t0_out[i] = t0
        t1_out[i] = t1
        total += np.logaddexp(t0, t1)
    return total


@numba.njit(cache=True)
def family_update_eval(design, coef, z, t0, t1, c0col, c1col, p0_out, p1_out):
    """Evaluate one Bernoulli family's proposed contribution.

    Fills the proposed per-class contributions and returns the summed
    marginal log likelihood with this family's cached column replaced.
    """
    n, m1 = design.shape
    total = 0.0
    for i in range(n):
        lp = 0.0
        for c in range(m1):
            lp += design[i, c] * coef[c]
        lp1 = lp + coef[m1]
        zi = z[i]
        p0 = zi * lp - np.logaddexp(0.0, lp)
        p1 = zi * lp1 - np.logaddexp(0.0, lp1)
        p0_out[i] = p0
        p1_out[i] = p1
        total += np.logaddexp(t0[i] - c0col[i] + p0, t1[i] - c1col[i] + p1)
    return total


@numba.njit(cache=True)
def pheno_update_eval(design, coef, pheno_re, t0, t1, c0p, c1p, p0_out, p1_out):
    """Same as family_update_eval for the phenotype-prevalence block."""
    n, m1 = design.shape
    total = 0.0
    for i in range(n):
        s = pheno_re[i]
        for c in range(m1):
            s += design[i, c] * coef[c]
        sp = np.logaddexp(0.0, s)
        p0 = -sp
        p1 = s - sp
        p0_out[i] = p0
        p1_out[i] = p1
        total += np.logaddexp(t0[i] - c0p[i] + p0, t1[i] - c1p[i] + p1)
    return total
