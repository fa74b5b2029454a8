"""Recursive multi-stage G-estimation and blip-model selection.

Stages are fit from the last backwards: each stage's treatment model and
residuals are estimated, the pseudo-outcome is assembled from already-fitted
later stages (additive regret sum on the linear scale, blip-ratio product on
the multiplicative scale), the scale-appropriate stage fit runs, and the
estimated optimal treatments feed the next earlier stage.  Selection wraps the
same machinery: the last stage's blip model is chosen first and frozen before
earlier stages are examined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .continuous import optimal_dose, stage_fit_continuous
from .data import Dataset, DesignMatrices, ModelSpec, build_design, validate_dataset
from .exceptions import (
    DivergenceError,
    GestError,
    IdentifiabilityError,
    SelectionError,
    SingularityError,
    SpecificationError,
)
from .inference import StageInference, stage_inference
from .linear import stage_fit_linear
from .loglinear import IrlsOptions, irls_stage_fit, pseudo_outcome_loglinear
from .nuisance import (
    TreatmentFit,
    fit_continuous_treatment,
    fit_logistic,
    treatment_residuals,
)


def optimal_treatment_binary(psi: np.ndarray, h_psi_row: np.ndarray) -> int:
    """1 when the blip at treatment is positive, else the reference 0."""
    return 1 if float(np.dot(h_psi_row, psi)) > 0.0 else 0


@dataclass
class StageResult:
    """Everything estimated at one stage of the recursion."""

    stage: int
    design: DesignMatrices
    treatment_fit: TreatmentFit
    d: np.ndarray
    y_tilde: np.ndarray
    fit: object
    inference: StageInference | None
    a_opt: np.ndarray
    blip_obs: np.ndarray
    blip_opt: np.ndarray


@dataclass
class DtrFit:
    """Ordered stage fits (last stage first) with regime summaries."""

    stage_results: list[StageResult]
    scale: str
    n_stages: int
    failed: bool = False
    failure_stage: int | None = None
    failure_reason: str | None = None

    def stage(self, j: int) -> StageResult:
        for r in self.stage_results:
            if r.stage == j:
                return r
        raise KeyError(f"stage {j} not fitted")

    @property
    def optimal_treatments(self) -> np.ndarray:
        n = self.stage_results[0].design.n
        out = np.full((n, self.n_stages), np.nan)
        for r in self.stage_results:
            out[:, r.stage - 1] = r.a_opt
        return out

    @property
    def pseudo_outcomes(self) -> np.ndarray:
        n = self.stage_results[0].design.n
        out = np.full((n, self.n_stages), np.nan)
        for r in self.stage_results:
            out[:, r.stage - 1] = r.y_tilde
        return out


def _pseudo_outcome(y, later: list[StageResult], scale: str,
                    zero_replacement: float) -> np.ndarray:
    if scale == "loglinear":
        ratios = [np.exp(r.blip_opt - r.blip_obs) for r in later]
        return pseudo_outcome_loglinear(y, ratios, zero_replacement)
    y_tilde = np.asarray(y, dtype=float).copy()
    for r in later:
        y_tilde += r.blip_opt - r.blip_obs
    return y_tilde


def _fit_one_stage(dataset: Dataset, spec: ModelSpec, j: int,
                   later: list[StageResult], opts: IrlsOptions,
                   with_inference: bool) -> StageResult:
    design = build_design(dataset, spec, j)
    if spec.treatment_type == "binary":
        tfit = fit_logistic(design.h_alpha, design.a)
    else:
        tfit = fit_continuous_treatment(design.h_alpha, design.a)
    d = treatment_residuals(tfit, design.a)
    y_tilde = _pseudo_outcome(dataset.outcome, later, spec.scale,
                              opts.zero_replacement)

    a = design.a
    if spec.scale == "loglinear":
        fit = irls_stage_fit(y_tilde, design, d, opts)
        blip_lin = design.h_psi @ fit.psi
        a_opt = (blip_lin > 0).astype(float)
        blip_obs = a * blip_lin  # log of the multiplicative blip
        blip_opt = a_opt * blip_lin
    elif spec.treatment_type == "continuous":
        fit = stage_fit_continuous(
            y_tilde, design.h_psi, design.h_psi_quad, design.h_beta, a, tfit
        )
        lin = design.h_psi @ fit.psi1
        quad = design.h_psi_quad @ fit.psi2
        a_opt = np.array([
            optimal_dose(fit.psi1, fit.psi2, design.h_psi[i],
                         design.h_psi_quad[i], spec.dose_range)
            for i in range(design.n)
        ])
        blip_obs = a * lin + a**2 * quad
        blip_opt = a_opt * lin + a_opt**2 * quad
    else:
        fit = stage_fit_linear(y_tilde, design, d)
        blip_lin = design.h_psi @ fit.psi
        a_opt = (blip_lin > 0).astype(float)
        blip_obs = a * blip_lin
        blip_opt = a_opt * blip_lin

    inference = None
    if with_inference and fit.converged:
        inference = stage_inference(fit, design)
    return StageResult(
        stage=j, design=design, treatment_fit=tfit, d=d, y_tilde=y_tilde,
        fit=fit, inference=inference, a_opt=a_opt,
        blip_obs=blip_obs, blip_opt=blip_opt,
    )


def _fit_stages(dataset, spec, down_to, opts, with_inference):
    """Fit stages J..down_to; stops early (marked failed) on non-convergence."""
    results: list[StageResult] = []
    for j in range(dataset.n_stages, down_to - 1, -1):
        try:
            res = _fit_one_stage(dataset, spec, j, results, opts, with_inference)
        except GestError as exc:
            raise type(exc)(f"stage {j}: {exc}") from exc
        results.append(res)
        if not res.fit.converged:
            return results, j, "IRLS did not converge"
    return results, None, None


def fit_dtr(dataset: Dataset, spec: ModelSpec, opts: IrlsOptions | None = None,
            with_inference: bool = True) -> DtrFit:
    """Recursive G-estimation of every stage, last to first.

    Non-convergence at any stage marks the whole fit failed (the replication
    harness counts such fits rather than raising); structural errors such as
    unresolvable terms or singular designs raise with the stage attached.
    """
    opts = opts or IrlsOptions()
    report = validate_dataset(dataset, spec)
    if not report.ok:
        raise SpecificationError(
            "dataset fails validation: " + "; ".join(report.violations)
        )
    results, fail_stage, reason = _fit_stages(
        dataset, spec, 1, opts, with_inference
    )
    return DtrFit(
        stage_results=results,
        scale=spec.scale,
        n_stages=dataset.n_stages,
        failed=fail_stage is not None,
        failure_stage=fail_stage,
        failure_reason=reason,
    )


@dataclass
class TrailEntry:
    """One candidate evaluation (or decision) in a selection run."""

    stage: int
    terms: tuple[str, ...]
    value: float | None
    decision: str


@dataclass
class SelectionResult:
    """Chosen blip terms per stage plus the full decision trail."""

    chosen_per_stage: list[list[str]]
    trail: list[TrailEntry] = field(default_factory=list)
    direction: str = "forward"
    criterion: str = "qic"


def _candidate_inference(dataset, spec, j, terms, y_tilde, d, opts):
    """Fit a candidate blip at stage j against a fixed pseudo-outcome.

    Returns (None, None, None) for candidates that fail to fit: IRLS
    non-convergence, divergence, or a singular candidate design.  Unresolvable
    terms still raise (the candidate list itself is wrong).
    """
    cand_spec = spec.with_blip_terms(j, list(terms))
    design = build_design(dataset, cand_spec, j)
    try:
        if spec.scale == "loglinear":
            fit = irls_stage_fit(y_tilde, design, d, opts)
            if not fit.converged:
                return None, None, None
        else:
            fit = stage_fit_linear(y_tilde, design, d)
        return fit, stage_inference(fit, design), design
    except (SingularityError, IdentifiabilityError, DivergenceError):
        return None, None, None


class _StageContext:
    """Fixed per-stage quantities shared by every candidate evaluation."""

    def __init__(self, dataset, spec, j, later, opts):
        design = build_design(dataset, spec, j)
        if spec.treatment_type == "binary":
            tfit = fit_logistic(design.h_alpha, design.a)
        else:
            tfit = fit_continuous_treatment(design.h_alpha, design.a)
        self.d = treatment_residuals(tfit, design.a)
        self.y_tilde = _pseudo_outcome(
            dataset.outcome, later, spec.scale, opts.zero_replacement
        )


def _select_stage_qic(dataset, spec, j, ctx, candidates, direction, opts, trail):
    def evaluate(terms):
        fit, inf, _ = _candidate_inference(
            dataset, spec, j, terms, ctx.y_tilde, ctx.d, opts
        )
        if fit is None:
            trail.append(TrailEntry(j, tuple(terms), None, "failed"))
            return None
        trail.append(TrailEntry(j, tuple(terms), inf.qic, "evaluated"))
        return inf.qic

    if direction == "forward":
        current: list[str] = []
        current_q = evaluate(current)
        if current_q is None:
            raise SelectionError(f"stage {j}: baseline intercept model failed")
        remaining = list(candidates)
        while remaining:
            scored = [(t, evaluate(current + [t])) for t in remaining]
            scored = [(t, q) for t, q in scored if q is not None]
            if not scored:
                break
            best_t, best_q = min(scored, key=lambda tq: tq[1])
            if best_q < current_q:
                current = current + [best_t]
                remaining.remove(best_t)
                current_q = best_q
                trail.append(TrailEntry(j, tuple(current), best_q, f"add {best_t}"))
            else:
                break
    else:
        current = list(candidates)
        current_q = evaluate(current)
        while current_q is None and current:
            # full model failed to fit; fall back to the largest that does
            current = current[:-1]
            current_q = evaluate(current)
        if current_q is None:
            raise SelectionError(f"stage {j}: no backward starting model fits")
        while current:
            scored = []
            for t in current:
                reduced = [u for u in current if u != t]
                q = evaluate(reduced)
                if q is not None:
                    scored.append((t, q))
            if not scored:
                break
            best_t, best_q = min(scored, key=lambda tq: tq[1])
            if best_q <= current_q:
                current = [u for u in current if u != best_t]
                current_q = best_q
                trail.append(TrailEntry(j, tuple(current), best_q, f"drop {best_t}"))
            else:
                break
    trail.append(TrailEntry(j, tuple(current), current_q, "chosen"))
    return current


def _select_stage_wald(dataset, spec, j, ctx, candidates, direction, opts, trail,
                       alpha=0.05):
    def fit_terms(terms):
        fit, inf, design = _candidate_inference(
            dataset, spec, j, terms, ctx.y_tilde, ctx.d, opts
        )
        if fit is None:
            trail.append(TrailEntry(j, tuple(terms), None, "failed"))
            return None, None
        return inf, design

    if direction == "forward":
        current: list[str] = []
        remaining = list(candidates)
        while remaining:
            scored = []
            for t in remaining:
                inf, design = fit_terms(current + [t])
                if inf is None:
                    continue
                idx = design.psi_names.index(t)
                p = float(inf.wald_p[idx])
                trail.append(TrailEntry(j, tuple(current + [t]), p, "evaluated"))
                scored.append((t, p))
            if not scored:
                break
            best_t, best_p = min(scored, key=lambda tp: tp[1])
            if best_p < alpha:
                current = current + [best_t]
                remaining.remove(best_t)
                trail.append(TrailEntry(j, tuple(current), best_p, f"add {best_t}"))
            else:
                break
    else:
        current = list(candidates)
        while True:
            inf, design = fit_terms(current)
            if inf is None:
                if not current:
                    raise SelectionError(f"stage {j}: intercept model failed")
                current = current[:-1]
                continue
            if not current:
                break
            pvals = [
                (t, float(inf.wald_p[design.psi_names.index(t)])) for t in current
            ]
            trail.append(TrailEntry(j, tuple(current), max(p for _, p in pvals),
                                    "evaluated"))
            worst_t, worst_p = max(pvals, key=lambda tp: tp[1])
            if worst_p >= alpha:
                current = [u for u in current if u != worst_t]
                trail.append(TrailEntry(j, tuple(current), worst_p,
                                        f"drop {worst_t}"))
            else:
                break
    trail.append(TrailEntry(j, tuple(current), None, "chosen"))
    return current


def _run_selection(dataset, spec_base, candidates_per_stage, direction, criterion,
                   opts, fixed_stages, select_stage):
    opts = opts or IrlsOptions()
    fixed_stages = fixed_stages or {}
    n_stages = dataset.n_stages
    chosen: dict[int, list[str]] = {}
    trail: list[TrailEntry] = []

    for j in range(n_stages, 0, -1):
        if j in fixed_stages:
            chosen[j] = list(fixed_stages[j])
            trail.append(TrailEntry(j, tuple(chosen[j]), None, "fixed"))
            continue
        spec_j = spec_base
        for k, terms in chosen.items():
            spec_j = spec_j.with_blip_terms(k, terms)
        later, fail_stage, _ = _fit_stages(dataset, spec_j, j + 1, opts, False)
        if fail_stage is not None:
            raise SelectionError(
                f"stage {fail_stage} fit did not converge; cannot select stage {j}"
            )
        ctx = _StageContext(dataset, spec_j, j, later, opts)
        chosen[j] = select_stage(
            dataset, spec_j, j, ctx, candidates_per_stage[j - 1], direction, opts,
            trail
        )
    return SelectionResult(
        chosen_per_stage=[chosen[j] for j in range(1, n_stages + 1)],
        trail=trail,
        direction=direction,
        criterion=criterion,
    )


def stepwise_select(dataset: Dataset, spec_base: ModelSpec, candidate_terms,
                    direction: str = "forward", criterion: str = "qic",
                    opts: IrlsOptions | None = None,
                    fixed_stages: dict[int, list[str]] | None = None
                    ) -> SelectionResult:
    """Greedy blip-term selection, last stage first.

    candidate_terms is one list of term labels per stage (stage 1 first).
    QIC moves require the criterion to decrease; Wald moves compare the
    candidate coefficient's p-value against 0.05.  Stages listed in
    fixed_stages skip selection and use the supplied terms (e.g. to freeze a
    known later-stage model).  Candidates whose fit fails are skipped and
    recorded in the trail.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    if criterion not in ("qic", "wald"):
        raise ValueError(f"unknown criterion {criterion!r}")
    select = _select_stage_qic if criterion == "qic" else _select_stage_wald
    return _run_selection(dataset, spec_base, candidate_terms, direction,
                          criterion, opts, fixed_stages, select)


def exhaustive_select(dataset: Dataset, spec_base: ModelSpec,
                      candidate_models_per_stage,
                      opts: IrlsOptions | None = None,
                      fixed_stages: dict[int, list[str]] | None = None
                      ) -> SelectionResult:
    """Evaluate every candidate blip model per stage; keep the QIC minimizer.

    candidate_models_per_stage holds, per stage, a list of term lists.  All
    candidates failing at a stage raises SelectionError.
    """

    def select(dataset, spec, j, ctx, candidates, direction, opts, trail):
        best_terms, best_q = None, np.inf
        for terms in candidates:
            fit, inf, _ = _candidate_inference(
                dataset, spec, j, terms, ctx.y_tilde, ctx.d, opts
            )
            if fit is None:
                trail.append(TrailEntry(j, tuple(terms), None, "failed"))
                continue
            trail.append(TrailEntry(j, tuple(terms), inf.qic, "evaluated"))
            if inf.qic < best_q:
                best_terms, best_q = list(terms), inf.qic
        if best_terms is None:
            raise SelectionError(f"stage {j}: every candidate model failed")
        trail.append(TrailEntry(j, tuple(best_terms), best_q, "chosen"))
        return best_terms

    return _run_selection(dataset, spec_base, candidate_models_per_stage,
                          "exhaustive", "qic", opts, fixed_stages, select)
