"""Core data containers for the latent-class phenotyping model.

The model ties a binary latent phenotype to five observed blocks per
patient: covariates, biomarker availability indicators, biomarker values
(present only where available), clinical-code indicators and medication
indicators. Containers here are immutable after construction; all
likelihood computation lives in :mod:`latentphen.model`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "CohortData",
    "GaussianPrior",
    "PriorSpec",
    "ParameterState",
    "ParamLayout",
    "default_priors",
]


def _frozen_array(a, dtype=float, ndim=2) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C")
    if out.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


def _check_binary(name: str, a: np.ndarray) -> None:
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 entries")


@dataclass(frozen=True)
class CohortData:
    """Observed design for one cohort.

    covariates : (N, M) float
        Patient covariates, e.g. standardized age, ethnicity indicator,
        BMI z-score.
    avail : (N, J) 0/1
        Biomarker availability indicators; 1 means the lab value exists.
    markers : (N, J) float
        Biomarker values. Cells with avail == 0 are masked: they are
        zeroed at construction and never read as data, so any junk
        (including NaN/NA) supplied there cannot influence a likelihood.
    codes : (N, K) 0/1
        Clinical-code indicators.
    meds : (N, L) 0/1
        Prescription-medication indicators.
    """

    covariates: np.ndarray
    avail: np.ndarray
    markers: np.ndarray
    codes: np.ndarray
    meds: np.ndarray

    def __post_init__(self):
        cov = _frozen_array(self.covariates)
        n = cov.shape[0]
        avail = _frozen_array(self.avail, dtype=np.int8)
        codes = _frozen_array(self.codes, dtype=np.int8)
        meds = _frozen_array(self.meds, dtype=np.int8)
        _check_binary("avail", avail)
        _check_binary("codes", codes)
        _check_binary("meds", meds)

        markers = np.array(self.markers, dtype=float, order="C")
        if markers.ndim != 2:
            raise ValueError(f"expected 2-d markers, got shape {markers.shape}")
        if markers.shape != avail.shape:
            raise ValueError("markers and avail shapes differ")
        observed = avail.astype(bool)
        if not np.isfinite(markers[observed]).all():
            raise ValueError("markers must be finite wherever avail == 1")
        # Mask unavailable cells so no downstream arithmetic can see them.
        markers = np.where(observed, markers, 0.0)
        markers.flags.writeable = False

        for name, arr in (("avail", avail), ("codes", codes), ("meds", meds)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if n < 1:
            raise ValueError("cohort must contain at least one patient")
        if avail.shape[1] < 1:
            raise ValueError("model requires at least one biomarker")
        if not np.isfinite(cov).all():
            raise ValueError("covariates must be finite")

        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "avail", avail)
        object.__setattr__(self, "markers", markers)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "meds", meds)

    @property
    def n_patients(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_markers(self) -> int:
        return self.avail.shape[1]

    @property
    def n_codes(self) -> int:
        return self.codes.shape[1]

    @property
    def n_meds(self) -> int:
        return self.meds.shape[1]

    @cached_property
    def design(self) -> np.ndarray:
        """(N, M+1) covariate design with a prepended intercept column."""
        out = np.hstack([np.ones((self.n_patients, 1)), self.covariates])
        out.flags.writeable = False
        return out

    @cached_property
    def avail_mask(self) -> np.ndarray:
        out = self.avail.astype(float)
        out.flags.writeable = False
        return out


@dataclass(frozen=True)
class GaussianPrior:
    """Independent (diagonal) Gaussian prior for one coefficient family."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, ndim=1)
        var = _frozen_array(self.var, ndim=1)
        if mean.shape != var.shape:
            raise ValueError("prior mean and var lengths differ")
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise ValueError("prior mean/var must be finite")
        if (var <= 0).any():
            raise ValueError("prior variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    def __len__(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the full generative model.

    Coefficient families: ``pheno`` has length M+1 (intercept prepended);
    ``avail``, ``marker``, ``code`` and ``med`` have length M+2
    (intercept, M covariates, phenotype coefficient) and are shared by all
    members of their family. Biomarker residual variances get an
    InverseGamma(var_shape, var_scale) prior; the patient random effect is
    Uniform on re_bounds, and re_bounds = (0, 0) disables it entirely.
    """

    pheno: GaussianPrior
    avail: GaussianPrior
    marker: GaussianPrior
    code: GaussianPrior
    med: GaussianPrior
    var_shape: float = 2.0
    var_scale: float = 1.0
    re_bounds: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not (self.var_shape > 0 and self.var_scale > 0):
            raise ValueError("var_shape and var_scale must be positive")
        a, b = self.re_bounds
        if not (np.isfinite(a) and np.isfinite(b) and a <= b):
            raise ValueError("re_bounds must be finite with a <= b")
        m2 = len(self.avail)
        for name in ("marker", "code", "med"):
            if len(getattr(self, name)) != m2:
                raise ValueError("coefficient families must share length M+2")
        if len(self.pheno) != m2 - 1:
            raise ValueError("pheno prior must have length M+1")
        object.__setattr__(self, "re_bounds", (float(a), float(b)))

    @property
    def n_covariates(self) -> int:
        return len(self.pheno) - 1

    @property
    def re_enabled(self) -> bool:
        a, b = self.re_bounds
        return b > a

    def validate_against(self, data: CohortData) -> None:
        if self.n_covariates != data.n_covariates:
            raise ValueError(
                f"prior is for M={self.n_covariates} covariates, "
                f"cohort has M={data.n_covariates}"
            )


def default_priors(
    n_covariates: int,
    *,
    coef_var: float = 4.0,
    biomarker_auc: float | None = 0.95,
    tau_scale: float = 1.0,
    var_shape: float = 2.0,
    var_scale: float = 1.0,
    re_bounds: tuple[float, float] = (-1.0, 1.0),
) -> PriorSpec:
    """Weakly informative defaults with an optional informative marker shift.

    When ``biomarker_auc`` is given, the prior mean of the biomarker shift
    coefficient is set to sqrt(2) * tau_scale * probit(auc), the mean shift
    that produces the target ROC AUC for a biomarker with residual scale
    ``tau_scale`` under the two-class Gaussian model. This anchors class 1
    as the class with elevated biomarkers.
    """
    from scipy.special import ndtri

    m = int(n_covariates)
    zeros1 = np.zeros(m + 1)
    zeros2 = np.zeros(m + 2)
    var1 = np.full(m + 1, coef_var)
    var2 = np.full(m + 2, coef_var)

    marker_mean = zeros2.copy()
    if biomarker_auc is not None:
        if not 0.5 < biomarker_auc < 1.0:
            raise ValueError("biomarker_auc must lie in (0.5, 1)")
        marker_mean[-1] = np.sqrt(2.0) * tau_scale * ndtri(biomarker_auc)

    return PriorSpec(
        pheno=GaussianPrior(zeros1, var1),
        avail=GaussianPrior(zeros2, var2),
        marker=GaussianPrior(marker_mean, var2),
        code=GaussianPrior(zeros2, var2),
        med=GaussianPrior(zeros2, var2),
        var_shape=var_shape,
        var_scale=var_scale,
        re_bounds=re_bounds,
    )


@dataclass(frozen=True)
class ParameterState:
    """One full assignment of the model parameters.

    pheno_coef : (M+1,)   phenotype-model coefficients (intercept first)
    avail_coef : (J, M+2) biomarker-availability coefficients
    marker_coef: (J, M+2) biomarker-value coefficients; column M+1 is the
                          phenotype mean shift
    marker_var : (J,)     biomarker residual variances, strictly positive
    code_coef  : (K, M+2) clinical-code coefficients
    med_coef   : (L, M+2) medication coefficients
    pheno_re   : (N,)     patient-level random effects (bounded by the prior)
    """

    pheno_coef: np.ndarray
    avail_coef: np.ndarray
    marker_coef: np.ndarray
    marker_var: np.ndarray
    code_coef: np.ndarray
    med_coef: np.ndarray
    pheno_re: np.ndarray

    def __post_init__(self):
        pheno = _frozen_array(self.pheno_coef, ndim=1)
        avail = _frozen_array(self.avail_coef)
        marker = _frozen_array(self.marker_coef)
        mvar = _frozen_array(self.marker_var, ndim=1)
        code = _frozen_array(self.code_coef)
        med = _frozen_array(self.med_coef)
        re = _frozen_array(self.pheno_re, ndim=1)

        width = pheno.shape[0] + 1
        for name, arr in (("avail_coef", avail), ("marker_coef", marker),
                          ("code_coef", code), ("med_coef", med)):
            if arr.shape[1] != width and arr.size:
                raise ValueError(f"{name} must have M+2={width} columns")
        if avail.shape[0] != marker.shape[0] or marker.shape[0] != mvar.shape[0]:
            raise ValueError("avail_coef, marker_coef and marker_var disagree on J")
        for name, arr in (("pheno_coef", pheno), ("avail_coef", avail),
                          ("marker_coef", marker), ("marker_var", mvar),
                          ("code_coef", code), ("med_coef", med),
                          ("pheno_re", re)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")
        if (mvar <= 0).any():
            raise ValueError("marker_var must be strictly positive")

        object.__setattr__(self, "pheno_coef", pheno)
        object.__setattr__(self, "avail_coef", avail)
        object.__setattr__(self, "marker_coef", marker)
        object.__setattr__(self, "marker_var", mvar)
        object.__setattr__(self, "code_coef", code)
        object.__setattr__(self, "med_coef", med)
        object.__setattr__(self, "pheno_re", re)

    @property
    def n_covariates(self) -> int:
        return self.pheno_coef.shape[0] - 1

    @property
    def n_markers(self) -> int:
        return self.marker_var.shape[0]

    @property
    def n_codes(self) -> int:
        return self.code_coef.shape[0]

    @property
    def n_meds(self) -> int:
        return self.med_coef.shape[0]

    def replace(self, **changes) -> "ParameterState":
        fields = dict(
            pheno_coef=self.pheno_coef, avail_coef=self.avail_coef,
            marker_coef=self.marker_coef, marker_var=self.marker_var,
            code_coef=self.code_coef, med_coef=self.med_coef,
            pheno_re=self.pheno_re,
        )
        fields.update(changes)
        return ParameterState(**fields)


# Transform kinds used by the variational engine (one code per scalar).
TRANSFORM_IDENTITY = 0
TRANSFORM_LOG = 1
TRANSFORM_LOGIT = 2


@dataclass(frozen=True)
class ParamLayout:
    """Stable flattening of ParameterState into one scalar vector.

    Order: pheno_coef, avail_coef rows, marker_coef rows, marker_var,
    code_coef rows, med_coef rows, then (if the random effect is enabled)
    pheno_re. ``n_fixed`` counts everything before pheno_re; gradient
    vectors and variational coordinates follow this exact order.
    """

    n_covariates: int
    n_markers: int
    n_codes: int
    n_meds: int
    n_patients: int
    re_enabled: bool = True
    re_bounds: tuple[float, float] = (-1.0, 1.0)

    @classmethod
    def for_model(cls, data: CohortData, priors: PriorSpec) -> "ParamLayout":
        priors.validate_against(data)
        return cls(
            n_covariates=data.n_covariates,
            n_markers=data.n_markers,
            n_codes=data.n_codes,
            n_meds=data.n_meds,
            n_patients=data.n_patients,
            re_enabled=priors.re_enabled,
            re_bounds=priors.re_bounds,
        )

    def _family_width(self) -> int:
        return self.n_covariates + 2

    @cached_property
    def slices(self) -> dict[str, slice]:
        m1 = self.n_covariates + 1
        w = self._family_width()
        j, k, l = self.n_markers, self.n_codes, self.n_meds
        pos = 0
        out = {}
        for name, size in (
            ("pheno_coef", m1),
            ("avail_coef", j * w),
            ("marker_coef", j * w),
            ("marker_var", j),
            ("code_coef", k * w),
            ("med_coef", l * w),
        ):
            out[name] = slice(pos, pos + size)
            pos += size
        if self.re_enabled:
            out["pheno_re"] = slice(pos, pos + self.n_patients)
        return out

    @property
    def n_fixed(self) -> int:
        """Number of scalars excluding the patient random effects."""
        s = self.slices
        return s["med_coef"].stop

    @property
    def n_params(self) -> int:
        if self.re_enabled:
            return self.slices["pheno_re"].stop
        return self.n_fixed

    @cached_property
    def fixed_names(self) -> list[str]:
        """Scalar names for everything except pheno_re, 1-based families."""
        w = self._family_width()
        names = [f"pheno_coef_{c}" for c in range(self.n_covariates + 1)]
        for fam, count in (("avail_coef", self.n_markers),
                           ("marker_coef", self.n_markers)):
            for j in range(count):
                names.extend(f"{fam}_{j + 1}_{c}" for c in range(w))
        names.extend(f"marker_var_{j + 1}" for j in range(self.n_markers))
        for fam, count in (("code_coef", self.n_codes), ("med_coef", self.n_meds)):
            for j in range(count):
                names.extend(f"{fam}_{j + 1}_{c}" for c in range(w))
        return names

    def pack(self, state: ParameterState, include_re: bool | None = None) -> np.ndarray:
        if include_re is None:
            include_re = self.re_enabled
        parts = [
            state.pheno_coef, state.avail_coef.ravel(), state.marker_coef.ravel(),
            state.marker_var, state.code_coef.ravel(), state.med_coef.ravel(),
        ]
        if include_re:
            parts.append(state.pheno_re)
        return np.concatenate(parts) if parts else np.empty(0)

    def unpack(self, vec: np.ndarray, re_fill: float | None = None) -> ParameterState:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected vector of length {self.n_params}, got {vec.shape}")
        s = self.slices
        w = self._family_width()
        j, k, l = self.n_markers, self.n_codes, self.n_meds
        if self.re_enabled:
            re = vec[s["pheno_re"]]
        else:
            re = np.full(self.n_patients, self.re_bounds[0] if re_fill is None else re_fill)
        return ParameterState(
            pheno_coef=vec[s["pheno_coef"]],
            avail_coef=vec[s["avail_coef"]].reshape(j, w),
            marker_coef=vec[s["marker_coef"]].reshape(j, w),
            marker_var=vec[s["marker_var"]],
            code_coef=vec[s["code_coef"]].reshape(k, w),
            med_coef=vec[s["med_coef"]].reshape(l, w),
            pheno_re=re,
        )

    @cached_property
    def transform_kinds(self) -> np.ndarray:
        """Per-scalar transform code: identity for coefficients, log for
        variances, bounded logit for random effects."""
        kinds = np.zeros(self.n_params, dtype=np.int8)
        kinds[self.slices["marker_var"]] = TRANSFORM_LOG
        if self.re_enabled:
            kinds[self.slices["pheno_re"]] = TRANSFORM_LOGIT
        kinds.flags.writeable = False
        return kinds
