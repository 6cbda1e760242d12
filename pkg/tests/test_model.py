"""Model-core tests: scalar-density oracles, enumeration, finite differences."""

import numpy as np
import pytest
from scipy import stats

from latentphen.data import (
    CohortData,
    GaussianPrior,
    ParameterState,
    ParamLayout,
    PriorSpec,
    default_priors,
)
from latentphen.model import (
    class_posterior,
    class_posterior_all,
    expit,
    grad_log_joint,
    log_joint,
    log_lik_all,
    log_lik_patient,
    log_prior,
    sensitivity,
    specificity,
)
from latentphen.simulate import default_scenario, simulate_cohort


def tiny_cohort(n=4, m=1, j=1, k=1, l=1, seed=0):
    rng = np.random.default_rng(seed)
    return CohortData(
        covariates=rng.standard_normal((n, m)),
        avail=(rng.random((n, j)) < 0.7).astype(int),
        markers=rng.standard_normal((n, j)) * 2.0,
        codes=(rng.random((n, k)) < 0.3).astype(int),
        meds=(rng.random((n, l)) < 0.3).astype(int),
    )


def tiny_state(data, seed=1, re_bounds=(-1.0, 1.0)):
    rng = np.random.default_rng(seed)
    m, j, k, l = data.n_covariates, data.n_markers, data.n_codes, data.n_meds
    a, b = re_bounds
    return ParameterState(
        pheno_coef=rng.normal(0, 1, m + 1),
        avail_coef=rng.normal(0, 1, (j, m + 2)),
        marker_coef=rng.normal(0, 1, (j, m + 2)),
        marker_var=rng.uniform(0.5, 2.0, j),
        code_coef=rng.normal(0, 1, (k, m + 2)),
        med_coef=rng.normal(0, 1, (l, m + 2)),
        pheno_re=rng.uniform(a + 0.05, b - 0.05, data.n_patients),
    )


def reference_log_lik(params, data, i):
    """Brute-force per-patient likelihood via scipy densities in
    probability space (no log-sum-exp), enumerating the two classes."""
    x1 = np.concatenate([[1.0], data.covariates[i]])
    total = 0.0
    for d in (0, 1):
        u = np.concatenate([x1, [float(d)]])
        prev = stats.logistic.cdf(x1 @ params.pheno_coef + params.pheno_re[i])
        term = prev if d == 1 else 1.0 - prev
        for jj in range(data.n_markers):
            p = stats.logistic.cdf(u @ params.avail_coef[jj])
            term *= p if data.avail[i, jj] else 1.0 - p
            if data.avail[i, jj]:
                term *= stats.norm.pdf(
                    data.markers[i, jj], loc=u @ params.marker_coef[jj],
                    scale=np.sqrt(params.marker_var[jj]))
        for kk in range(data.n_codes):
            p = stats.logistic.cdf(u @ params.code_coef[kk])
            term *= p if data.codes[i, kk] else 1.0 - p
        for ll in range(data.n_meds):
            p = stats.logistic.cdf(u @ params.med_coef[ll])
            term *= p if data.meds[i, ll] else 1.0 - p
        total += term
    return np.log(total)


class TestExpit:
    def test_symmetry_point(self):
        assert expit(0.0) == 0.5

    def test_saturation(self):
        assert abs(expit(40.0) - 1.0) < 1e-15
        assert expit(-40.0) < 1e-15

    def test_hand_value(self):
        assert expit(np.log(3.0)) == pytest.approx(0.75, abs=1e-14)

    def test_no_overflow_far_out(self):
        with np.errstate(over="raise"):
            assert expit(750.0) == 1.0
            assert expit(-750.0) == 0.0

    def test_array_input(self):
        out = expit(np.array([-1.0, 0.0, 1.0]))
        assert out[1] == 0.5 and out[0] + out[2] == pytest.approx(1.0, abs=1e-15)


class TestLogLikPatient:
    def test_uninformative_blocks_give_zero(self):
        # J >= 1 is a data invariant, so the spec's "empty product" case is
        # realized with a saturated availability model: f(R=0|d) ~ 1 for
        # both classes and no other observed blocks.
        data = CohortData(
            covariates=np.empty((1, 0)),
            avail=[[0]], markers=[[0.0]],
            codes=np.empty((1, 0), dtype=int), meds=np.empty((1, 0), dtype=int),
        )
        params = ParameterState(
            pheno_coef=np.zeros(1),
            avail_coef=np.array([[-40.0, 0.0]]),
            marker_coef=np.zeros((1, 2)),
            marker_var=np.ones(1),
            code_coef=np.empty((0, 2)), med_coef=np.empty((0, 2)),
            pheno_re=np.zeros(1),
        )
        assert log_lik_patient(params, data, 0) == pytest.approx(0.0, abs=1e-15)

    def test_matches_scipy_enumeration(self):
        data = tiny_cohort(n=6, m=2, j=2, k=1, l=2, seed=3)
        params = tiny_state(data, seed=4)
        for i in range(data.n_patients):
            assert log_lik_patient(params, data, i) == pytest.approx(
                reference_log_lik(params, data, i), abs=1e-10)

    def test_masked_cells_are_never_read(self):
        data = tiny_cohort(n=8, j=2, seed=5)
        params = tiny_state(data, seed=6)
        base = log_lik_all(params, data)
        junk = data.markers.copy()
        junk[data.avail == 0] = 1e6
        data2 = CohortData(covariates=data.covariates, avail=data.avail,
                           markers=junk, codes=data.codes, meds=data.meds)
        assert np.array_equal(base, log_lik_all(params, data2))

    def test_nan_in_masked_cells_allowed(self):
        data = tiny_cohort(n=8, j=2, seed=5)
        params = tiny_state(data, seed=6)
        junk = data.markers.copy()
        junk[data.avail == 0] = np.nan
        data2 = CohortData(covariates=data.covariates, avail=data.avail,
                           markers=junk, codes=data.codes, meds=data.meds)
        assert np.array_equal(log_lik_all(params, data),
                              log_lik_all(params, data2))

    def test_index_errors(self):
        data = tiny_cohort()
        params = tiny_state(data)
        with pytest.raises(IndexError):
            log_lik_patient(params, data, data.n_patients)


class TestLogPrior:
    def test_invgamma_mode(self):
        # tau2 = d/(c+1) maximizes the inverse-gamma density.
        data = tiny_cohort()
        priors = default_priors(1, var_shape=3.0, var_scale=2.0)
        params = tiny_state(data)
        mode = 2.0 / (3.0 + 1.0)
        at_mode = log_prior(params.replace(marker_var=np.array([mode])), priors)
        for off in (0.7, 1.3):
            shifted = log_prior(
                params.replace(marker_var=np.array([mode * off])), priors)
            assert shifted < at_mode

    def test_standardized_gaussian_terms(self):
        # All coefficients at the prior means with unit variances: every
        # Gaussian term contributes -log(2*pi)/2 per scalar.
        m = 1
        unit = lambda dim: GaussianPrior(np.zeros(dim), np.ones(dim))
        priors = PriorSpec(pheno=unit(m + 1), avail=unit(m + 2), marker=unit(m + 2),
                           code=unit(m + 2), med=unit(m + 2),
                           var_shape=2.0, var_scale=1.0, re_bounds=(-1.0, 1.0))
        data = tiny_cohort(n=2, m=m, j=1, k=1, l=1)
        params = ParameterState(
            pheno_coef=np.zeros(m + 1), avail_coef=np.zeros((1, m + 2)),
            marker_coef=np.zeros((1, m + 2)), marker_var=np.ones(1),
            code_coef=np.zeros((1, m + 2)), med_coef=np.zeros((1, m + 2)),
            pheno_re=np.zeros(2),
        )
        n_gauss = (m + 1) + 3 * (m + 2) + (m + 2)
        expected = (
            -0.5 * n_gauss * np.log(2.0 * np.pi)
            + stats.invgamma.logpdf(1.0, 2.0, scale=1.0)
            + 2 * np.log(0.5)  # two uniform(-1, 1) random effects
        )
        assert log_prior(params, priors) == pytest.approx(expected, abs=1e-12)

    def test_matches_scipy_density_sum(self):
        data = tiny_cohort(n=3, m=1, j=2, k=1, l=1, seed=7)
        priors = default_priors(1, var_shape=2.5, var_scale=1.5)
        params = tiny_state(data, seed=8)
        expected = 0.0
        for fam, prior in (("pheno_coef", priors.pheno),):
            expected += stats.norm.logpdf(params.pheno_coef, prior.mean,
                                          np.sqrt(prior.var)).sum()
        for rows, prior in ((params.avail_coef, priors.avail),
                            (params.marker_coef, priors.marker),
                            (params.code_coef, priors.code),
                            (params.med_coef, priors.med)):
            for row in rows:
                expected += stats.norm.logpdf(row, prior.mean,
                                              np.sqrt(prior.var)).sum()
        expected += stats.invgamma.logpdf(params.marker_var, 2.5, scale=1.5).sum()
        expected += stats.uniform.logpdf(params.pheno_re, -1.0, 2.0).sum()
        assert log_prior(params, priors) == pytest.approx(expected, rel=1e-12)

    def test_out_of_support_is_minus_inf(self):
        data = tiny_cohort()
        priors = default_priors(1)
        params = tiny_state(data)
        bad = params.replace(pheno_re=np.full(data.n_patients, 1.5))
        assert log_prior(bad, priors) == -np.inf

    def test_disabled_random_effect_point_mass(self):
        data = tiny_cohort()
        priors = default_priors(1, re_bounds=(0.0, 0.0))
        params = tiny_state(data).replace(pheno_re=np.zeros(data.n_patients))
        assert np.isfinite(log_prior(params, priors))
        off = params.replace(pheno_re=np.full(data.n_patients, 0.2))
        assert log_prior(off, priors) == -np.inf


class TestLogJoint:
    def test_empty_cohort_equals_prior(self):
        data = tiny_cohort()
        priors = default_priors(1)
        params = tiny_state(data)
        assert log_joint(params, priors, None) == log_prior(params, priors)

    def test_composes_prior_and_patient_terms(self):
        data = tiny_cohort(n=2, seed=9)
        priors = default_priors(1)
        params = tiny_state(data, seed=10)
        expected = (log_prior(params, priors)
                    + reference_log_lik(params, data, 0)
                    + reference_log_lik(params, data, 1))
        assert log_joint(params, priors, data) == pytest.approx(expected, abs=1e-9)

    def test_duplicated_patient_adds_own_term(self):
        # Random effect disabled so the prior carries no per-patient terms
        # and the duplicate changes the joint by exactly its likelihood.
        data = tiny_cohort(n=3, seed=11)
        priors = default_priors(1, re_bounds=(0.0, 0.0))
        params = tiny_state(data, seed=12).replace(pheno_re=np.zeros(3))
        dup = CohortData(
            covariates=np.vstack([data.covariates, data.covariates[1:2]]),
            avail=np.vstack([data.avail, data.avail[1:2]]),
            markers=np.vstack([data.markers, data.markers[1:2]]),
            codes=np.vstack([data.codes, data.codes[1:2]]),
            meds=np.vstack([data.meds, data.meds[1:2]]),
        )
        params_dup = params.replace(pheno_re=np.zeros(4))
        assert log_joint(params_dup, priors, dup) == pytest.approx(
            log_joint(params, priors, data) + log_lik_patient(params, data, 1),
            abs=1e-9)

    def test_two_class_decomposition_consistency(self):
        from latentphen.model import class_log_terms

        data = tiny_cohort(n=10, j=2, seed=13)
        params = tiny_state(data, seed=14)
        t0, t1 = class_log_terms(params, data)
        assert np.allclose(np.logaddexp(t0, t1), log_lik_all(params, data),
                           atol=1e-12, rtol=0)


class TestGradient:
    def test_symmetric_stationary_point(self):
        # Two mirror patients (all indicators 0 vs all 1) at beta = 0 with
        # zero-mean priors: every coefficient partial vanishes.
        data = CohortData(
            covariates=np.zeros((2, 0)),
            avail=[[0], [1]], markers=[[0.0], [0.0]],
            codes=[[0], [1]], meds=[[0], [1]],
        )
        priors = default_priors(0, biomarker_auc=None)
        params = ParameterState(
            pheno_coef=np.zeros(1), avail_coef=np.zeros((1, 2)),
            marker_coef=np.zeros((1, 2)), marker_var=np.ones(1),
            code_coef=np.zeros((1, 2)), med_coef=np.zeros((1, 2)),
            pheno_re=np.zeros(2),
        )
        layout = ParamLayout.for_model(data, priors)
        g = grad_log_joint(params, priors, data, layout)
        for name in ("pheno_coef", "avail_coef", "marker_coef",
                     "code_coef", "med_coef", "pheno_re"):
            assert np.allclose(g[layout.slices[name]], 0.0, atol=1e-12), name

    def test_finite_differences_random_instances(self):
        cfg = default_scenario(n_patients=12, seed=21)
        data, _, _ = simulate_cohort(cfg)
        priors = default_priors(3)
        layout = ParamLayout.for_model(data, priors)
        rng = np.random.default_rng(22)
        h = 1e-5
        for _ in range(20):
            vec = layout.pack(cfg.true_params.replace(
                pheno_re=rng.uniform(-0.9, 0.9, 12)))
            vec = vec + rng.normal(0, 0.3, vec.shape)
            sl = layout.slices["marker_var"]
            vec[sl] = np.abs(vec[sl]) + 0.3
            if layout.re_enabled:
                sl = layout.slices["pheno_re"]
                vec[sl] = np.clip(vec[sl], -0.95, 0.95)
            params = layout.unpack(vec)
            g = grad_log_joint(params, priors, data, layout)
            fd = np.empty_like(g)
            for idx in range(vec.shape[0]):
                vp, vm = vec.copy(), vec.copy()
                vp[idx] += h
                vm[idx] -= h
                fd[idx] = (log_joint(layout.unpack(vp), priors, data)
                           - log_joint(layout.unpack(vm), priors, data)) / (2 * h)
            rel = np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
            assert rel.max() <= 1e-6

    def test_masked_rows_only_contribute_prior(self):
        # A cohort whose availability column is all zero: marker coefficient
        # partials reduce to the prior score exactly.
        data = CohortData(
            covariates=np.zeros((3, 0)), avail=np.zeros((3, 1), dtype=int),
            markers=np.zeros((3, 1)), codes=np.empty((3, 0), dtype=int),
            meds=np.empty((3, 0), dtype=int),
        )
        priors = default_priors(0)
        params = tiny_state(data, seed=15)
        layout = ParamLayout.for_model(data, priors)
        g = grad_log_joint(params, priors, data, layout)
        prior_score = -(params.marker_coef[0] - priors.marker.mean) / priors.marker.var
        assert np.allclose(g[layout.slices["marker_coef"]], prior_score, atol=1e-12)

    def test_boundary_raises(self):
        data = tiny_cohort()
        priors = default_priors(1)
        params = tiny_state(data)
        at_bound = params.replace(pheno_re=np.full(data.n_patients, 1.0))
        with pytest.raises(ValueError):
            grad_log_joint(at_bound, priors, data)


class TestClassPosterior:
    def test_symmetric_construction(self):
        # Identical class conditionals and prevalence 1/2.
        data = tiny_cohort(n=5, seed=16)
        params = tiny_state(data, seed=17)
        sym = params.replace(
            pheno_coef=np.zeros(2), pheno_re=np.zeros(5),
            avail_coef=np.column_stack([params.avail_coef[:, :-1],
                                        np.zeros(1)]),
            marker_coef=np.column_stack([params.marker_coef[:, :-1],
                                         np.zeros(1)]),
            code_coef=np.column_stack([params.code_coef[:, :-1], np.zeros(1)]),
            med_coef=np.column_stack([params.med_coef[:, :-1], np.zeros(1)]),
        )
        for i in range(5):
            assert class_posterior(sym, data, i) == pytest.approx(0.5, abs=1e-12)

    def test_prior_prevalence_only(self):
        # With every block's phenotype coefficient zero, the observed blocks
        # cancel between classes and the posterior is expit(x beta + re).
        data = tiny_cohort(n=6, m=2, seed=18)
        params = tiny_state(data, seed=19)
        neutral = params.replace(
            avail_coef=np.column_stack([params.avail_coef[:, :-1], np.zeros(1)]),
            marker_coef=np.column_stack([params.marker_coef[:, :-1], np.zeros(1)]),
            code_coef=np.column_stack([params.code_coef[:, :-1], np.zeros(1)]),
            med_coef=np.column_stack([params.med_coef[:, :-1], np.zeros(1)]),
        )
        score = data.design @ neutral.pheno_coef + neutral.pheno_re
        assert np.allclose(class_posterior_all(neutral, data), expit(score),
                           atol=1e-14)

    def test_matches_enumeration(self):
        data = tiny_cohort(n=7, m=1, j=2, k=2, l=1, seed=20)
        params = tiny_state(data, seed=21)
        x1 = data.design
        for i in range(7):
            terms = []
            for d in (0, 1):
                u = np.concatenate([x1[i], [float(d)]])
                prev = stats.logistic.cdf(x1[i] @ params.pheno_coef
                                          + params.pheno_re[i])
                t = prev if d else 1 - prev
                for jj in range(2):
                    p = stats.logistic.cdf(u @ params.avail_coef[jj])
                    t *= p if data.avail[i, jj] else 1 - p
                    if data.avail[i, jj]:
                        t *= stats.norm.pdf(data.markers[i, jj],
                                            u @ params.marker_coef[jj],
                                            np.sqrt(params.marker_var[jj]))
                for kk in range(2):
                    p = stats.logistic.cdf(u @ params.code_coef[kk])
                    t *= p if data.codes[i, kk] else 1 - p
                p = stats.logistic.cdf(u @ params.med_coef[0])
                t *= p if data.meds[i, 0] else 1 - p
                terms.append(t)
            oracle = terms[1] / (terms[0] + terms[1])
            assert class_posterior(params, data, i) == pytest.approx(
                oracle, abs=1e-12)

    def test_complement_sums_to_one(self):
        data = tiny_cohort(n=9, seed=22)
        params = tiny_state(data, seed=23)
        p1 = class_posterior_all(params, data)
        flipped = params.replace(
            pheno_coef=-params.pheno_coef, pheno_re=-params.pheno_re,
            avail_coef=_flip(params.avail_coef),
            marker_coef=_flip(params.marker_coef),
            code_coef=_flip(params.code_coef), med_coef=_flip(params.med_coef),
        )
        p1_flipped = class_posterior_all(flipped, data)
        assert np.allclose(p1 + p1_flipped, 1.0, atol=1e-12)


def _flip(coef):
    out = coef.copy()
    out[:, 0] += out[:, -1]
    out[:, -1] = -out[:, -1]
    return out


class TestSensitivitySpecificity:
    def test_neutral_point(self):
        assert sensitivity(0.0, 0.0) == 0.5
        assert specificity(0.0) == 0.5

    def test_saturation(self):
        assert sensitivity(-40.0, 80.0) == pytest.approx(1.0, abs=1e-15)
        assert specificity(-40.0) == pytest.approx(1.0, abs=1e-15)

    def test_paper_style_row_shape(self):
        # Format check mirroring a published row: a rare code with near-total
        # specificity and low sensitivity.
        b0 = np.log(0.0001 / 0.9999)
        b1 = -b0 + np.log(0.15 / 0.85)
        assert specificity(b0) == pytest.approx(1.0, abs=1e-3)
        assert sensitivity(b0, b1) == pytest.approx(0.15, abs=1e-9)

    def test_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            b0 = rng.normal(0, 3)
            b1 = rng.normal(0, 3)
            eps = 0.3
            assert sensitivity(b0, b1 + eps) > sensitivity(b0, b1)
            assert specificity(b0 + eps) < specificity(b0)
