"""Data-augmented Metropolis-within-Gibbs sampler.

The latent phenotype is drawn exactly from its two-term full conditional
each iteration; biomarker regressions use exact conjugate draws given the
augmented assignment; every logistic block moves by Gaussian random-walk
Metropolis with Robbins-Monro scale adaptation during warmup (frozen
afterwards to preserve detailed balance). Patient random effects update in
parallel with a shared adapted scale and proposals reflected into their
prior bounds.

Update order per iteration: phenotype assignment, biomarker regressions,
phenotype coefficients, availability blocks, code blocks, medication
blocks, random effects. Chains run independently (optionally in worker
processes) with RNG streams spawned deterministically from the seed, and
draws are assembled in chain order, so results do not depend on the
thread cap.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import _kernels as kernels
from .data import CohortData, ParameterState, ParamLayout, PriorSpec
from .draws import PosteriorDraws
from .model import (
    _bernoulli_loglik,
    _class_log_terms,
    class_posterior,
    expit,
    log_joint,
    log_prior,
)

__all__ = [
    "McmcConfig",
    "McmcInitError",
    "sample_D_conditional",
    "update_beta_Y_tau2",
    "update_logistic_block",
    "run_chains",
]


class McmcInitError(RuntimeError):
    """Raised when a chain cannot start from a finite log joint."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_warmup: int = 1000
    n_samples: int = 2000
    thin: int = 1
    rw_scales: float | Mapping[str, float] = 0.2
    adapt_target: float = 0.234
    adapt_target_scalar: float = 0.44
    seed: int = 0
    store_re: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.n_samples % self.thin:
            raise ValueError("n_samples must be a multiple of thin")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be non-negative")
        for name in ("adapt_target", "adapt_target_scalar"):
            t = getattr(self, name)
            if not 0.1 < t < 0.9:
                raise ValueError(f"{name} must lie in (0.1, 0.9)")


def sample_D_conditional(params: ParameterState, data: CohortData, i: int,
                         rng: np.random.Generator) -> int:
    """Draw the latent phenotype of patient ``i`` from its full conditional."""
    return int(rng.random() < class_posterior(params, data, i))


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold proposals back into [lo, hi] (triangular reflection)."""
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + width - np.abs(y - width)


def _conjugate_marker_draw(design_d, rows, y, tau2, priors, rng):
    """Gaussian coefficient draw given tau2, then InverseGamma given the
    new coefficients, on available rows only."""
    mean0 = priors.marker.mean
    prec0 = 1.0 / priors.marker.var
    n_obs = int(rows.sum())
    if n_obs == 0:
        coef = rng.normal(mean0, np.sqrt(priors.marker.var))
        var = 1.0 / rng.gamma(priors.var_shape, 1.0 / priors.var_scale)
        return coef, var, 0
    u = design_d[rows]
    a = u.T @ u / tau2 + np.diag(prec0)
    rhs = u.T @ y / tau2 + mean0 * prec0
    chol = np.linalg.cholesky(a)
    mean = np.linalg.solve(a, rhs)
    z = rng.standard_normal(mean.shape[0])
    coef = mean + np.linalg.solve(chol.T, z)
    resid = y - u @ coef
    shape = priors.var_shape + 0.5 * n_obs
    scale = priors.var_scale + 0.5 * float(resid @ resid)
    var = 1.0 / rng.gamma(shape, 1.0 / scale)
    return coef, var, n_obs


def update_beta_Y_tau2(params: ParameterState, data: CohortData, pheno: np.ndarray,
                       priors: PriorSpec, rng: np.random.Generator):
    """Exact conjugate update of every (marker_coef[j], marker_var[j]).

    ``pheno`` is the current latent assignment (length N, 0/1). Biomarkers
    with no available rows fall back to a prior draw. Returns the updated
    (marker_coef, marker_var) arrays.
    """
    design_d = np.column_stack([data.design, np.asarray(pheno, dtype=float)])
    coef_out = np.empty_like(params.marker_coef)
    var_out = np.empty_like(params.marker_var)
    for j in range(data.n_markers):
        rows = data.avail[:, j].astype(bool)
        coef_out[j], var_out[j], _ = _conjugate_marker_draw(
            design_d, rows, data.markers[rows, j], params.marker_var[j], priors, rng,
        )
    return coef_out, var_out


def _gaussian_block_logpdf(value, prior):
    resid = value - prior.mean
    return float(np.sum(-0.5 * resid * resid / prior.var))  # constants cancel in MH


def _mh_vector_step(value, target, prior, scale, rng):
    """One random-walk Metropolis step on a coefficient block.

    ``target`` maps block values to the block's conditional log likelihood;
    ``scale`` may be a scalar or a per-coordinate vector. Returns
    (new_value, acceptance_probability, accepted).
    """
    z = rng.standard_normal(value.shape[0])
    if isinstance(scale, tuple):
        s, chol = scale
        step = s * (chol @ z) if chol is not None else s * z
    else:
        step = scale * z
    proposal = value + step
    cur = target(value) + _gaussian_block_logpdf(value, prior)
    prop = target(proposal) + _gaussian_block_logpdf(proposal, prior)
    delta = prop - cur
    alpha = float(np.exp(min(0.0, delta)))
    if np.log(rng.random()) < delta:
        return proposal, alpha, True
    return value, alpha, False


class _BlockMoments:
    """Welford running covariance of a block during warmup.

    Its Cholesky factor preconditions the random-walk proposal, so blocks
    with tight intercepts, loose phenotype coefficients and correlated
    coordinates all mix; isotropic proposals are used until enough warmup
    samples accumulate. Frozen (like the scales) after warmup.
    """

    MIN_COUNT = 50

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self._chol: np.ndarray | None = None
        self._chol_at = -1

    def update(self, value: np.ndarray) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, value - self.mean)

    def reset(self) -> None:
        """Drop accumulated moments (poorly-mixed early warmup pollutes the
        covariance estimate and would freeze the stickiness in)."""
        self.count = 0
        self.mean[:] = 0.0
        self.m2[:] = 0.0
        self._chol = None
        self._chol_at = -1

    def chol(self) -> np.ndarray | None:
        """Cholesky factor of the running covariance (None while warming)."""
        if self.count < self.MIN_COUNT:
            return None
        if self._chol_at != self.count:
            cov = self.m2 / (self.count - 1) + 1e-6 * np.eye(self.dim)
            self._chol = np.linalg.cholesky(cov)
            self._chol_at = self.count
        return self._chol


def update_logistic_block(params: ParameterState, block, priors: PriorSpec,
                          data: CohortData, rng: np.random.Generator, *,
                          scale: float = 0.2, pheno: np.ndarray | None = None):
    """Random-walk Metropolis step on one logistic block.

    ``block`` is ``"pheno_coef"``, ``"pheno_re"``, or a ``(family, index)``
    pair with family in {"avail_coef", "code_coef", "med_coef"}. When
    ``pheno`` (the augmented assignment) is given, the conditional
    likelihood given that assignment is used — the sampler's fast path;
    otherwise the acceptance ratio uses the marginalized joint. Returns
    (new_block_value, accepted); for ``"pheno_re"`` every patient moves
    independently and ``accepted`` is a boolean vector.
    """
    a, b = priors.re_bounds

    if block == "pheno_re":
        if not priors.re_enabled:
            raise ValueError("random effect is disabled (re_bounds collapse)")
        lp_fixed = data.design @ params.pheno_coef
        proposal = _reflect(params.pheno_re + scale * rng.standard_normal(data.n_patients), a, b)
        if pheno is not None:
            z = np.asarray(pheno, dtype=float)
            delta = (_bernoulli_loglik(z, lp_fixed + proposal)
                     - _bernoulli_loglik(z, lp_fixed + params.pheno_re))
        else:
            t0, t1 = _class_log_terms(params, data.design, data.avail, data.avail_mask,
                                      data.markers, data.codes, data.meds, params.pheno_re)
            u0, u1 = _class_log_terms(params, data.design, data.avail, data.avail_mask,
                                      data.markers, data.codes, data.meds, proposal)
            delta = np.logaddexp(u0, u1) - np.logaddexp(t0, t1)
        accepted = np.log(rng.random(data.n_patients)) < delta
        return np.where(accepted, proposal, params.pheno_re), accepted

    if block == "pheno_coef":
        value, prior = params.pheno_coef, priors.pheno
        make = lambda v: params.replace(pheno_coef=v)
        if pheno is not None:
            z = np.asarray(pheno, dtype=float)
            target = lambda v: float(np.sum(_bernoulli_loglik(
                z, data.design @ v + params.pheno_re)))
    else:
        family, idx = block
        value = getattr(params, family)[idx]
        prior = {"avail_coef": priors.avail, "code_coef": priors.code,
                 "med_coef": priors.med}[family]
        column = {"avail_coef": data.avail, "code_coef": data.codes,
                  "med_coef": data.meds}[family][:, idx]

        def make(v):
            rows = getattr(params, family).copy()
            rows[idx] = v
            return params.replace(**{family: rows})

        if pheno is not None:
            z = column.astype(float)
            phenof = np.asarray(pheno, dtype=float)
            target = lambda v: float(np.sum(_bernoulli_loglik(
                z, data.design @ v[:-1] + phenof * v[-1])))

    if pheno is None:
        target = lambda v: (log_joint(make(v), priors, data)
                            - log_prior(make(v), priors)
                            - _gaussian_block_logpdf(v, prior))
        # log_prior of unchanged blocks cancels in the MH ratio; subtracting
        # the full prior and re-adding this block's kernel keeps one code path.
        new_value, _, accepted = _mh_vector_step(value, target, prior, scale, rng)
        return new_value, accepted

    new_value, _, accepted = _mh_vector_step(value, target, prior, scale, rng)
    return new_value, accepted


class _ChainRunner:
    """Mutable single-chain state; everything vectorized over patients."""

    def __init__(self, chain_id: int, seed_seq: np.random.SeedSequence,
                 config: McmcConfig, priors: PriorSpec, data: CohortData,
                 layout: ParamLayout):
        self.chain_id = chain_id
        self.rng = np.random.default_rng(seed_seq)
        self.config = config
        self.priors = priors
        self.data = data
        self.layout = layout
        self.re_enabled = priors.re_enabled

        n, m = data.n_patients, data.n_covariates
        self.design = data.design
        self.design_d = np.column_stack([self.design, np.zeros(n)])
        self.codes_f = data.codes.astype(float)
        self.meds_f = data.meds.astype(float)
        self.avail_f = data.avail.astype(float)
        self.indicators = np.hstack([self.avail_f, self.codes_f, self.meds_f])

        self._init_state()
        self._init_scales()
        self._alloc_buffers()
        self._check_start()

        self.block_alpha: dict[str, list[float]] = {k: [] for k in self.scales}
        self.warmup_alpha: dict[str, list[float]] = {k: [] for k in self.scales}
        self.adapt_step = 0

    # -- initialization ----------------------------------------------------

    def _init_state(self):
        rng, priors, data = self.rng, self.priors, self.data

        # Prior draws with the scale shrunk to 0.1: overdispersed across
        # chains but anchored at the prior means, which keeps the
        # informative biomarker-shift prior pointing at the intended mode.
        def family_init(prior, count):
            return rng.normal(prior.mean, 0.1 * np.sqrt(prior.var),
                              size=(count, len(prior)))

        self.pheno_coef = family_init(priors.pheno, 1)[0]
        self.avail_coef = family_init(priors.avail, data.n_markers)
        self.marker_coef = family_init(priors.marker, data.n_markers)
        self.code_coef = family_init(priors.code, data.n_codes)
        self.med_coef = family_init(priors.med, data.n_meds)
        c, d = priors.var_shape, priors.var_scale
        self.marker_var = np.full(data.n_markers, d / (c - 1.0) if c > 1.0 else d)
        a, b = priors.re_bounds
        self.pheno_re = np.full(data.n_patients, 0.5 * (a + b))
        # Covariate-free start for the latent class: any code or medication.
        # The first sweep's conditional updates run against this heuristic
        # assignment (the class draw comes last in each iteration), and the
        # phenotype intercept starts at the matching prevalence so the first
        # class draw cannot collapse back to a 50/50 split (which would hand
        # basin selection to chance and risk settling in the relabeled mode).
        self.pheno = (data.codes.any(axis=1) | data.meds.any(axis=1)).astype(float)
        self.design_d[:, -1] = self.pheno
        heur = float(np.clip(self.pheno.mean(), 0.01, 0.5))
        self.pheno_coef[0] += np.log(heur / (1.0 - heur))
        self.n_markers = data.n_markers
        self.n_codes = data.n_codes
        self.n_meds = data.n_meds

    def _init_scales(self):
        cfg = self.config.rw_scales
        base = cfg if isinstance(cfg, (int, float)) else 0.2
        keys = ["pheno_coef"]
        keys += [f"avail_coef_{j + 1}" for j in range(self.data.n_markers)]
        keys += [f"code_coef_{k + 1}" for k in range(self.data.n_codes)]
        keys += [f"med_coef_{l + 1}" for l in range(self.data.n_meds)]
        if self.re_enabled:
            keys.append("pheno_re")
        # Composite cross-family blocks: the class-membership field couples
        # every family's coefficient on the same design column (and couples
        # the phenotype coefficients to the prevalence intercept), creating
        # stiff directions a family-at-a-time sweep cannot travel. One
        # composite block per design column moves them jointly.
        data = self.data
        width = data.n_covariates + 2
        pr = self.priors
        self.composites = {}
        for col in range(width - 1):
            self.composites[f"col_{col}"] = (col, col)  # (pheno coord, column)
        self.composites["shift_block"] = (0, width - 1)
        self.column_keys = [k for k in self.composites if k != "shift_block"]
        self.sweep_index = 0
        keys += list(self.composites)

        self.log_scales = {k: np.log(float(base)) for k in keys}
        if isinstance(cfg, Mapping):
            for k, v in cfg.items():
                if k not in self.log_scales:
                    raise ValueError(f"unknown rw_scales block {k!r}")
                self.log_scales[k] = np.log(float(v))
        self.scales = self.log_scales  # alias used for bookkeeping keys
        self.moments = {k: _BlockMoments(width if k != "pheno_coef" else width - 1)
                        for k in keys if k != "pheno_re" and k not in self.composites}
        comp_dim = 1 + 2 * data.n_markers + data.n_codes + data.n_meds
        self.composite_prior = {}
        for key, (pheno_idx, col) in self.composites.items():
            self.moments[key] = _BlockMoments(comp_dim)
            self.composite_prior[key] = (
                np.concatenate([
                    pr.pheno.mean[pheno_idx:pheno_idx + 1],
                    np.repeat(pr.avail.mean[col], data.n_markers),
                    np.repeat(pr.marker.mean[col], data.n_markers),
                    np.repeat(pr.code.mean[col], data.n_codes),
                    np.repeat(pr.med.mean[col], data.n_meds),
                ]),
                np.concatenate([
                    pr.pheno.var[pheno_idx:pheno_idx + 1],
                    np.repeat(pr.avail.var[col], data.n_markers),
                    np.repeat(pr.marker.var[col], data.n_markers),
                    np.repeat(pr.code.var[col], data.n_codes),
                    np.repeat(pr.med.var[col], data.n_meds),
                ]),
            )

    def _state(self) -> ParameterState:
        return ParameterState(
            pheno_coef=self.pheno_coef, avail_coef=self.avail_coef,
            marker_coef=self.marker_coef, marker_var=self.marker_var,
            code_coef=self.code_coef, med_coef=self.med_coef,
            pheno_re=self.pheno_re,
        )

    def _check_start(self):
        lp = log_prior(self._state(), self.priors)
        lj = log_joint(self._state(), self.priors, self.data)
        if not np.isfinite(lj):
            raise McmcInitError(
                f"chain {self.chain_id}: non-finite log joint at initialization",
                diagnostics={
                    "chain": self.chain_id,
                    "log_prior": lp,
                    "log_joint": lj,
                    "marker_var": self.marker_var.tolist(),
                },
            )

    # -- cached per-class terms ----------------------------------------------
    #
    # t0/t1 hold each patient's log term for class 0/1 (prior factor plus
    # every observed block). Bernoulli-family and biomarker contributions
    # live in stacked (N, F) caches: a single-family move touches one
    # column, a composite move rebuilds everything with a handful of 2-D
    # operations. Logistic blocks and the random effects move against the
    # marginalized joint (class summed out), which removes class-resampling
    # noise from their mixing; the exact class draw feeds only the
    # conjugate biomarker update that needs the augmentation.

    def _pheno_contrib(self, coef, re):
        s = self.design @ coef + re
        sp = np.logaddexp(0.0, s)
        return -sp, s - sp

    def _family_contrib(self, z, coef):
        lp0 = self.design @ coef[:-1]
        lp1 = lp0 + coef[-1]
        return (z * lp0 - np.logaddexp(0.0, lp0),
                z * lp1 - np.logaddexp(0.0, lp1))

    def _marker_contrib(self, j, coef=None, var=None):
        coef = self.marker_coef[j] if coef is None else coef
        var = self.marker_var[j] if var is None else var
        mask = self.avail_f[:, j]
        e0 = self.data.markers[:, j] - self.design @ coef[:-1]
        e1 = e0 - coef[-1]
        const = -0.5 * np.log(2.0 * np.pi * var)
        return (mask * (const - e0 * e0 / (2.0 * var)),
                mask * (const - e1 * e1 / (2.0 * var)))

    def _family_matrix(self, avail=None, code=None, med=None) -> np.ndarray:
        parts = [self.avail_coef if avail is None else avail,
                 self.code_coef if code is None else code,
                 self.med_coef if med is None else med]
        stack = [p for p in parts if p.size]
        if not stack:
            return np.empty((0, self.data.n_covariates + 2))
        return np.vstack(stack)

    def _alloc_buffers(self):
        n = self.data.n_patients
        f = self.data.n_markers + self.data.n_codes + self.data.n_meds
        j = self.data.n_markers

        def one():
            return {
                "t0": np.empty(n), "t1": np.empty(n),
                "c0p": np.empty(n), "c1p": np.empty(n),
                "C0f": np.empty((n, f)), "C1f": np.empty((n, f)),
                "C0m": np.empty((n, j)), "C1m": np.empty((n, j)),
            }

        self._active = one()
        self._scratch = one()
        self._p0 = np.empty(n)
        self._p1 = np.empty(n)

    def _terms_into(self, buf, pheno_coef, fam_matrix, marker_coef, marker_var,
                    pheno_re) -> float:
        return kernels.class_terms(
            self.design, fam_matrix, self.indicators, self.data.markers,
            self.avail_f, marker_coef, np.asarray(marker_var, dtype=float),
            pheno_coef, pheno_re,
            buf["t0"], buf["t1"], buf["c0p"], buf["c1p"],
            buf["C0f"], buf["C1f"], buf["C0m"], buf["C1m"],
        )

    def _refresh_cache(self):
        self.cur_sum = self._terms_into(
            self._active, self.pheno_coef, self._family_matrix(),
            self.marker_coef, self.marker_var, self.pheno_re)

    # Attribute views over the active buffer keep the update code readable.
    @property
    def t0(self):
        return self._active["t0"]

    @t0.setter
    def t0(self, v):
        self._active["t0"] = v

    @property
    def t1(self):
        return self._active["t1"]

    @t1.setter
    def t1(self, v):
        self._active["t1"] = v

    @property
    def c0_pheno(self):
        return self._active["c0p"]

    @c0_pheno.setter
    def c0_pheno(self, v):
        self._active["c0p"] = v

    @property
    def c1_pheno(self):
        return self._active["c1p"]

    @c1_pheno.setter
    def c1_pheno(self, v):
        self._active["c1p"] = v

    @property
    def C0f(self):
        return self._active["C0f"]

    @property
    def C1f(self):
        return self._active["C1f"]

    @property
    def C0m(self):
        return self._active["C0m"]

    @property
    def C1m(self):
        return self._active["C1m"]

    def _draw_pheno(self):
        p1 = expit(self.t1 - self.t0)
        self.pheno = (self.rng.random(self.data.n_patients) < p1).astype(float)
        self.design_d[:, -1] = self.pheno

    def _update_markers(self):
        for j in range(self.data.n_markers):
            rows = self.data.avail[:, j].astype(bool)
            coef, var, _ = _conjugate_marker_draw(
                self.design_d, rows, self.data.markers[rows, j],
                self.marker_var[j], self.priors, self.rng,
            )
            self.marker_coef[j] = coef
            self.marker_var[j] = var
            new0, new1 = self._marker_contrib(j)
            self.t0 += new0 - self.C0m[:, j]
            self.t1 += new1 - self.C1m[:, j]
            self.C0m[:, j] = new0
            self.C1m[:, j] = new1
        self.cur_sum = float(np.sum(np.logaddexp(self.t0, self.t1)))

    def _pheno_block_update(self, adapt: bool):
        key = "pheno_coef"
        value = self.pheno_coef
        s = np.exp(self.log_scales[key])
        chol = self.moments[key].chol()
        z = self.rng.standard_normal(value.shape[0])
        proposal = value + (s * (chol @ z) if chol is not None else s * z)
        new_sum = kernels.pheno_update_eval(
            self.design, proposal, self.pheno_re, self.t0, self.t1,
            self.c0_pheno, self.c1_pheno, self._p0, self._p1)
        delta = (new_sum - self.cur_sum
                 + _gaussian_block_logpdf(proposal, self.priors.pheno)
                 - _gaussian_block_logpdf(value, self.priors.pheno))
        alpha = float(np.exp(min(0.0, delta)))
        if np.log(self.rng.random()) < delta:
            self.pheno_coef = proposal
            self.t0 += self._p0 - self.c0_pheno
            self.t1 += self._p1 - self.c1_pheno
            self.c0_pheno[:] = self._p0
            self.c1_pheno[:] = self._p1
            self.cur_sum = new_sum
        self._adapt(key, alpha, self.config.adapt_target, adapt)
        if adapt:
            self.moments[key].update(self.pheno_coef)

    def _family_block_update(self, key, fcol, z_col, value, prior, adapt: bool):
        s = np.exp(self.log_scales[key])
        chol = self.moments[key].chol()
        z = self.rng.standard_normal(value.shape[0])
        proposal = value + (s * (chol @ z) if chol is not None else s * z)
        new_sum = kernels.family_update_eval(
            self.design, proposal, z_col, self.t0, self.t1,
            np.ascontiguousarray(self.C0f[:, fcol]),
            np.ascontiguousarray(self.C1f[:, fcol]), self._p0, self._p1)
        delta = (new_sum - self.cur_sum
                 + _gaussian_block_logpdf(proposal, prior)
                 - _gaussian_block_logpdf(value, prior))
        alpha = float(np.exp(min(0.0, delta)))
        if np.log(self.rng.random()) < delta:
            value = proposal
            self.t0 += self._p0 - self.C0f[:, fcol]
            self.t1 += self._p1 - self.C1f[:, fcol]
            self.C0f[:, fcol] = self._p0
            self.C1f[:, fcol] = self._p1
            self.cur_sum = new_sum
        self._adapt(key, alpha, self.config.adapt_target, adapt)
        if adapt:
            self.moments[key].update(value)
        return value

    def _update_re(self, adapt: bool):
        a, b = self.priors.re_bounds
        scale = np.exp(self.log_scales["pheno_re"])
        proposal = _reflect(self.pheno_re + scale * self.rng.standard_normal(
            self.data.n_patients), a, b)
        p0, p1 = self._pheno_contrib(self.pheno_coef, proposal)
        b0 = self.t0 - self.c0_pheno
        b1 = self.t1 - self.c1_pheno
        delta = np.logaddexp(b0 + p0, b1 + p1) - np.logaddexp(self.t0, self.t1)
        accepted = np.log(self.rng.random(self.data.n_patients)) < delta
        self.pheno_re = np.where(accepted, proposal, self.pheno_re)
        c0 = np.where(accepted, p0, self.c0_pheno)
        c1 = np.where(accepted, p1, self.c1_pheno)
        self.t0 = b0 + c0
        self.t1 = b1 + c1
        self.c0_pheno, self.c1_pheno = c0, c1
        self.cur_sum = float(np.sum(np.logaddexp(self.t0, self.t1)))
        alpha = float(np.mean(np.exp(np.minimum(delta, 0.0))))
        self._adapt("pheno_re", alpha, self.config.adapt_target_scalar, adapt)

    def _adapt(self, key, alpha, target, adapt: bool):
        if adapt:
            # decaying gain with a floor: pure decay freezes before the
            # covariance preconditioners settle and leaves scales biased
            gamma = max((self.adapt_step + 1) ** -0.6, 0.05)
            self.log_scales[key] = float(np.clip(
                self.log_scales[key] + gamma * (alpha - target), -12.0, 3.0))
            self.warmup_alpha[key].append(alpha)
        else:
            self.block_alpha[key].append(alpha)

    def _update_composite(self, key: str, adapt: bool):
        """Joint move of one phenotype coordinate and every family's
        coefficient on one design column, preconditioned by their warmup
        covariance (changes every block's contribution, so the per-class
        terms are rebuilt in full)."""
        data = self.data
        pheno_idx, col = self.composites[key]
        value = np.concatenate([
            self.pheno_coef[pheno_idx:pheno_idx + 1], self.avail_coef[:, col],
            self.marker_coef[:, col], self.code_coef[:, col], self.med_coef[:, col],
        ])
        s = np.exp(self.log_scales[key])
        chol = self.moments[key].chol()
        z = self.rng.standard_normal(value.shape[0])
        proposal = value + (s * (chol @ z) if chol is not None else 0.1 * s * z)

        j, k = data.n_markers, data.n_codes
        pheno_coef = self.pheno_coef.copy()
        pheno_coef[pheno_idx] = proposal[0]
        avail = self.avail_coef.copy()
        avail[:, col] = proposal[1:1 + j]
        marker = self.marker_coef.copy()
        marker[:, col] = proposal[1 + j:1 + 2 * j]
        code = self.code_coef.copy()
        code[:, col] = proposal[1 + 2 * j:1 + 2 * j + k]
        med = self.med_coef.copy()
        med[:, col] = proposal[1 + 2 * j + k:]

        new_sum = self._terms_into(
            self._scratch, pheno_coef, self._family_matrix(avail, code, med),
            marker, self.marker_var, self.pheno_re)
        prior_mean, prior_var = self.composite_prior[key]
        prior_delta = float(np.sum(
            -0.5 * (proposal - prior_mean) ** 2 / prior_var
            + 0.5 * (value - prior_mean) ** 2 / prior_var))
        delta = new_sum - self.cur_sum + prior_delta
        alpha = float(np.exp(min(0.0, delta)))
        if np.log(self.rng.random()) < delta:
            self.pheno_coef = pheno_coef
            self.avail_coef = avail
            self.marker_coef = marker
            self.code_coef = code
            self.med_coef = med
            self._active, self._scratch = self._scratch, self._active
            self.cur_sum = new_sum
            value = proposal
        self._adapt(key, alpha, self.config.adapt_target, adapt)
        if adapt:
            self.moments[key].update(value)

    def step(self, adapt: bool, first: bool = False):
        """One full sweep.

        The class assignment is redrawn exactly from the cached terms right
        before the conjugate biomarker update that consumes it (on the very
        first sweep the heuristic initialization is consumed instead); all
        remaining blocks move against the marginalized joint.
        """
        if not first:
            self._draw_pheno()
        self._update_markers()
        self._pheno_block_update(adapt)
        j_count, k_count = self.data.n_markers, self.data.n_codes
        for j in range(j_count):
            self.avail_coef[j] = self._family_block_update(
                f"avail_coef_{j + 1}", j, self.avail_f[:, j],
                self.avail_coef[j], self.priors.avail, adapt)
        for k in range(k_count):
            self.code_coef[k] = self._family_block_update(
                f"code_coef_{k + 1}", j_count + k, self.codes_f[:, k],
                self.code_coef[k], self.priors.code, adapt)
        for l in range(self.data.n_meds):
            self.med_coef[l] = self._family_block_update(
                f"med_coef_{l + 1}", j_count + k_count + l, self.meds_f[:, l],
                self.med_coef[l], self.priors.med, adapt)
        # The prevalence/shift composite runs every sweep (it carries the
        # class-label anchoring); column composites rotate, one per sweep.
        self._update_composite("shift_block", adapt)
        if self.column_keys:
            key = self.column_keys[self.sweep_index % len(self.column_keys)]
            self._update_composite(key, adapt)
        self.sweep_index += 1
        if self.re_enabled:
            self._update_re(adapt)
        if adapt:
            self.adapt_step += 1

    # -- main loop -----------------------------------------------------------

    def run(self):
        cfg = self.config
        n_store = cfg.n_samples // cfg.thin
        n_fixed = self.layout.n_fixed
        n = self.data.n_patients
        theta = np.empty((n_store, n_fixed))
        loglik = np.empty((n_store, n))
        re_mean = np.empty(n_store) if self.re_enabled else None
        re_sd = np.empty(n_store) if self.re_enabled else None
        re_draws = np.empty((n_store, n)) if (self.re_enabled and cfg.store_re) else None

        # Proposal covariances are re-estimated on the second half of warmup
        # only: the first half mixes too poorly to measure block geometry.
        # Cached class terms are rebuilt periodically to bound float drift
        # from incremental updates.
        self._refresh_cache()
        total = 0
        for t in range(cfg.n_warmup):
            if t == cfg.n_warmup // 2:
                for mom in self.moments.values():
                    mom.reset()
                # restart the adaptation clock so scales can re-tune to the
                # refreshed preconditioners at full gain
                self.adapt_step = 0
            self.step(adapt=True, first=(t == 0))
            total += 1
            if total % 50 == 0:
                self._refresh_cache()

        row = 0
        for t in range(1, cfg.n_samples + 1):
            self.step(adapt=False, first=(cfg.n_warmup == 0 and t == 1))
            total += 1
            if total % 50 == 0:
                self._refresh_cache()
            if t % cfg.thin == 0:
                theta[row] = np.concatenate([
                    self.pheno_coef, self.avail_coef.ravel(), self.marker_coef.ravel(),
                    self.marker_var, self.code_coef.ravel(), self.med_coef.ravel(),
                ])
                loglik[row] = np.logaddexp(self.t0, self.t1)
                if self.re_enabled:
                    re_mean[row] = float(self.pheno_re.mean())
                    re_sd[row] = float(self.pheno_re.std())
                    if re_draws is not None:
                        re_draws[row] = self.pheno_re
                row += 1

        acceptance = {k: float(np.mean(v)) if v else float("nan")
                      for k, v in self.block_alpha.items()}
        # mean acceptance over the last quarter of warmup, where adaptation
        # is still live and should be tracking its target
        warmup_acceptance = {
            k: float(np.mean(v[-(max(1, len(v) // 4)):])) if v else float("nan")
            for k, v in self.warmup_alpha.items()
        }
        return {
            "theta": theta, "loglik": loglik, "re_mean": re_mean, "re_sd": re_sd,
            "re_draws": re_draws, "acceptance": acceptance,
            "warmup_acceptance": warmup_acceptance, "chain_id": self.chain_id,
        }


def _run_chain(args):
    chain_id, seed_seq, config, priors, data = args
    layout = ParamLayout.for_model(data, priors)
    runner = _ChainRunner(chain_id, seed_seq, config, priors, data, layout)
    return runner.run()


def run_chains(config: McmcConfig, priors: PriorSpec, data: CohortData,
               threads: int = 1) -> PosteriorDraws:
    """Run all chains (warmup with adaptation, then recorded sampling).

    Per-chain RNG streams derive from SeedSequence(config.seed).spawn, and
    chain results are concatenated in chain order, so any ``threads``
    value yields identical output.
    """
    priors.validate_against(data)
    layout = ParamLayout.for_model(data, priors)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    jobs = [(cid, seeds[cid], config, priors, data) for cid in range(config.n_chains)]

    if threads > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, config.n_chains)) as pool:
            results = list(pool.map(_run_chain, jobs))
    else:
        results = [_run_chain(job) for job in jobs]

    theta = np.vstack([r["theta"] for r in results])
    loglik = np.vstack([r["loglik"] for r in results])
    chain_id = np.concatenate([
        np.full(r["theta"].shape[0], r["chain_id"], dtype=np.int64) for r in results
    ])
    re_enabled = priors.re_enabled
    re_mean = np.concatenate([r["re_mean"] for r in results]) if re_enabled else None
    re_sd = np.concatenate([r["re_sd"] for r in results]) if re_enabled else None
    re_draws = (np.vstack([r["re_draws"] for r in results])
                if re_enabled and config.store_re else None)
    acceptance = {k: [r["acceptance"][k] for r in results] for k in results[0]["acceptance"]}
    acceptance["warmup"] = {
        k: [r["warmup_acceptance"][k] for r in results]
        for k in results[0]["warmup_acceptance"]
    }

    return PosteriorDraws(
        layout=layout, theta=theta, pointwise_loglik=loglik, chain_id=chain_id,
        re_mean=re_mean, re_sd=re_sd, re_draws=re_draws, acceptance=acceptance,
    )
