"""Longitudinal dataset containers, model specification, and design-matrix assembly.

A dataset holds one row per subject: per-stage covariates and treatments plus a
single terminal outcome.  Model specifications name, per stage, which history
columns enter the blip, treatment-free, and treatment models.  History at stage
j is the concatenation (x_1, a_1, x_2, a_2, ..., x_j): everything observed
before the stage-j treatment decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, SpecificationError

Scale = str  # "linear" | "loglinear"
TreatmentType = str  # "binary" | "continuous"


@dataclass
class StageRecord:
    """Covariates and treatment observed at one decision stage."""

    covariates: np.ndarray
    treatment: float


@dataclass
class Subject:
    """One subject's full trajectory: J stage records and the final outcome."""

    stages: list[StageRecord]
    outcome: float


class Dataset:
    """Complete-trajectory longitudinal data, stored column-wise.

    Parameters
    ----------
    covariates : list of (n, k_j) arrays
        Stage-j covariate matrix, one entry per stage.
    treatments : (n, J) array
        Observed treatment at each stage.
    outcome : (n,) array
        Terminal outcome.
    covariate_names : list of list of str
        Per-stage covariate names; names must be unique across stages.
    """

    def __init__(self, covariates, treatments, outcome, covariate_names):
        self.covariates = [np.asarray(x, dtype=float) for x in covariates]
        self.treatments = np.asarray(treatments, dtype=float)
        self.outcome = np.asarray(outcome, dtype=float)
        self.covariate_names = [list(names) for names in covariate_names]

        self.n_stages = len(self.covariates)
        if self.treatments.ndim == 1:
            self.treatments = self.treatments.reshape(-1, 1)
        if self.treatments.shape[1] != self.n_stages:
            raise DimensionError(
                f"treatments has {self.treatments.shape[1]} columns for "
                f"{self.n_stages} stages"
            )
        self.n = self.outcome.shape[0]
        for j, x in enumerate(self.covariates):
            if x.ndim != 2 or x.shape[0] != self.n:
                raise DimensionError(f"stage {j + 1} covariates are not (n, k)")
            if x.shape[1] != len(self.covariate_names[j]):
                raise DimensionError(
                    f"stage {j + 1} has {x.shape[1]} covariate columns but "
                    f"{len(self.covariate_names[j])} names"
                )
        flat = [name for names in self.covariate_names for name in names]
        if len(set(flat)) != len(flat):
            raise SpecificationError("covariate names must be unique across stages")

    @classmethod
    def from_subjects(cls, subjects: list[Subject], covariate_names):
        """Build a column-wise dataset from per-subject records."""
        n_stages = len(subjects[0].stages)
        if any(len(s.stages) != n_stages for s in subjects):
            raise DimensionError("subjects have ragged stage counts")
        covs = [
            np.array([s.stages[j].covariates for s in subjects], dtype=float)
            for j in range(n_stages)
        ]
        treats = np.array(
            [[s.stages[j].treatment for j in range(n_stages)] for s in subjects]
        )
        y = np.array([s.outcome for s in subjects], dtype=float)
        return cls(covs, treats, y, covariate_names)

    @property
    def subjects(self) -> list[Subject]:
        """Row-wise view of the data as Subject records."""
        out = []
        for i in range(self.n):
            stages = [
                StageRecord(self.covariates[j][i].copy(), float(self.treatments[i, j]))
                for j in range(self.n_stages)
            ]
            out.append(Subject(stages, float(self.outcome[i])))
        return out

    def history_columns(self, stage: int):
        """Labelled history available before the stage-j decision.

        Returns (labels, columns) where columns is a dict label -> (n,) array.
        Includes covariates x_1..x_j and prior treatments a_1..a_{j-1}.
        """
        if not 1 <= stage <= self.n_stages:
            raise SpecificationError(f"stage {stage} outside 1..{self.n_stages}")
        labels, cols = [], {}
        for k in range(stage):
            for c, name in enumerate(self.covariate_names[k]):
                labels.append(name)
                cols[name] = self.covariates[k][:, c]
            if k < stage - 1:
                label = f"a{k + 1}"
                labels.append(label)
                cols[label] = self.treatments[:, k]
        return labels, cols


@dataclass
class StageModel:
    """Term lists for one stage's blip, treatment-free, and treatment models.

    Terms are history column labels, optionally joined by ':' for products
    (e.g. "a1:x11").  Intercepts are implicit unless the corresponding flag is
    cleared.  ``blip_quadratic_terms`` is only consulted for continuous
    treatments (quadratic dose term in the blip).
    """

    blip_terms: list[str] = field(default_factory=list)
    treatment_free_terms: list[str] = field(default_factory=list)
    treatment_terms: list[str] = field(default_factory=list)
    blip_quadratic_terms: list[str] = field(default_factory=list)
    blip_intercept: bool = True
    treatment_free_intercept: bool = True
    treatment_intercept: bool = True
    blip_quadratic_intercept: bool = True


@dataclass
class ModelSpec:
    """Analysis specification: outcome scale, treatment type, per-stage terms."""

    scale: Scale
    treatment_type: TreatmentType
    stages: list[StageModel]
    dose_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.scale not in ("linear", "loglinear"):
            raise SpecificationError(f"unknown scale {self.scale!r}")
        if self.treatment_type not in ("binary", "continuous"):
            raise SpecificationError(
                f"unknown treatment type {self.treatment_type!r}"
            )
        if self.treatment_type == "continuous":
            if self.scale != "linear":
                raise SpecificationError(
                    "continuous treatments are only supported on the linear scale"
                )
            if self.dose_range is None:
                raise SpecificationError(
                    "continuous treatments require an explicit dose_range"
                )
            lo, hi = self.dose_range
            if not lo < hi:
                raise SpecificationError("dose_range must be a nondegenerate interval")

    def with_blip_terms(self, stage: int, terms: list[str]) -> "ModelSpec":
        """Copy of the spec with stage-j blip terms replaced."""
        stages = [
            StageModel(
                blip_terms=list(terms) if j == stage - 1 else list(m.blip_terms),
                treatment_free_terms=list(m.treatment_free_terms),
                treatment_terms=list(m.treatment_terms),
                blip_quadratic_terms=list(m.blip_quadratic_terms),
                blip_intercept=m.blip_intercept,
                treatment_free_intercept=m.treatment_free_intercept,
                treatment_intercept=m.treatment_intercept,
                blip_quadratic_intercept=m.blip_quadratic_intercept,
            )
            for j, m in enumerate(self.stages)
        ]
        return ModelSpec(self.scale, self.treatment_type, stages, self.dose_range)


@dataclass
class DesignMatrices:
    """Stage-level design matrices, row per subject in dataset order."""

    stage: int
    h_psi: np.ndarray
    h_beta: np.ndarray
    h_alpha: np.ndarray
    a: np.ndarray
    psi_names: list[str]
    beta_names: list[str]
    alpha_names: list[str]
    h_psi_quad: np.ndarray | None = None
    psi_quad_names: list[str] | None = None

    @property
    def n(self) -> int:
        return self.a.shape[0]


def _resolve_term(term: str, cols: dict, stage: int) -> np.ndarray:
    factors = term.split(":")
    out = None
    for f in factors:
        if f not in cols:
            raise SpecificationError(
                f"term {term!r} does not resolve at stage {stage}: "
                f"no history column {f!r}"
            )
        out = cols[f] if out is None else out * cols[f]
    return out


def _assemble(terms, intercept, cols, stage, n):
    mats, names = [], []
    if intercept:
        mats.append(np.ones(n))
        names.append("1")
    for t in terms:
        mats.append(_resolve_term(t, cols, stage))
        names.append(t)
    if not mats:
        return np.empty((n, 0)), []
    return np.column_stack(mats), names


def build_design(dataset: Dataset, spec: ModelSpec, stage: int) -> DesignMatrices:
    """Assemble stage-j design matrices from the spec's term lists.

    Deterministic and order preserving: row i always corresponds to subject i.
    Raises SpecificationError for terms that reference history unavailable at
    the stage (e.g. a stage-2 covariate in a stage-1 model).
    """
    if not 1 <= stage <= dataset.n_stages:
        raise SpecificationError(
            f"stage {stage} outside 1..{dataset.n_stages}"
        )
    model = spec.stages[stage - 1]
    _, cols = dataset.history_columns(stage)
    n = dataset.n

    h_psi, psi_names = _assemble(model.blip_terms, model.blip_intercept, cols, stage, n)
    h_beta, beta_names = _assemble(
        model.treatment_free_terms, model.treatment_free_intercept, cols, stage, n
    )
    h_alpha, alpha_names = _assemble(
        model.treatment_terms, model.treatment_intercept, cols, stage, n
    )
    a = dataset.treatments[:, stage - 1].copy()

    h_psi_quad = psi_quad_names = None
    if spec.treatment_type == "continuous":
        h_psi_quad, psi_quad_names = _assemble(
            model.blip_quadratic_terms, model.blip_quadratic_intercept, cols, stage, n
        )
    return DesignMatrices(
        stage=stage,
        h_psi=h_psi,
        h_beta=h_beta,
        h_alpha=h_alpha,
        a=a,
        psi_names=psi_names,
        beta_names=beta_names,
        alpha_names=alpha_names,
        h_psi_quad=h_psi_quad,
        psi_quad_names=psi_quad_names,
    )


@dataclass
class ValidationReport:
    """Outcome of dataset-against-spec validation; empty means usable."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(dataset: Dataset, spec: ModelSpec) -> ValidationReport:
    """Check dataset values against the spec's scale and treatment type.

    Report-returning: never raises for data problems, only lists them.
    """
    report = ValidationReport()
    if len(spec.stages) != dataset.n_stages:
        report.violations.append(
            f"spec declares {len(spec.stages)} stages, dataset has "
            f"{dataset.n_stages}"
        )
    if not np.all(np.isfinite(dataset.outcome)):
        rows = np.flatnonzero(~np.isfinite(dataset.outcome))
        report.violations.append(f"non-finite outcome at rows {rows.tolist()}")
    for j, x in enumerate(dataset.covariates):
        if not np.all(np.isfinite(x)):
            report.violations.append(f"non-finite covariates at stage {j + 1}")
    if not np.all(np.isfinite(dataset.treatments)):
        report.violations.append("non-finite treatments")
    if spec.treatment_type == "binary":
        bad = ~np.isin(dataset.treatments, (0.0, 1.0))
        if bad.any():
            rows, stages = np.nonzero(bad)
            report.violations.append(
                "non-binary treatment under binary spec at (row, stage) "
                + str([(int(r), int(s) + 1) for r, s in zip(rows, stages)][:20])
            )
    if spec.scale == "loglinear":
        neg = dataset.outcome < 0
        if neg.any():
            report.violations.append(
                f"negative outcome under loglinear scale at rows "
                f"{np.flatnonzero(neg).tolist()[:20]}"
            )
    return report
