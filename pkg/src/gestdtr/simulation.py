"""Data-generating scenarios and the Monte Carlo replication harness.

Three two-stage generative laws are supported: a count outcome with a
single tailoring covariate per stage (log-linear estimation study), a
continuous outcome with three candidate covariates per stage (model-selection
study, skewed or normal errors), and a count outcome with three shifted-mean
covariates per stage (discrete-outcome selection study).  Replications draw
per-index child seeds from a counter-based sequence so results are identical
regardless of worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ModelSpec, StageModel
from .engine import exhaustive_select, fit_dtr, stepwise_select
from .exceptions import (
    AggregationError,
    CalibrationError,
    GestError,
    SelectionError,
)
from .loglinear import IrlsOptions
from .nuisance import expit

KINDS = ("loglinear_twostage", "continuous_twostage", "discrete_qic")
SELECTORS = ("qic-forward", "qic-backward", "wald-forward", "wald-backward",
             "exhaustive")


@dataclass
class Scenario:
    """One simulation setup: generative law, truth, size, and seed."""

    kind: str
    n: int
    psi_true: list = None
    error: str = "centered_lognormal"
    zero_prob_target: float | None = None
    covariate_correlation: float = 0.0
    beta0: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.error not in ("centered_lognormal", "standard_normal"):
            raise ValueError(f"unknown error law {self.error!r}")
        if not 0.0 <= self.covariate_correlation < 1.0:
            raise ValueError("covariate_correlation must be in [0, 1)")
        if self.psi_true is None:
            self.psi_true = default_psi_true(self.kind)
        self.psi_true = [np.asarray(p, dtype=float) for p in self.psi_true]


def default_psi_true(kind: str) -> list:
    if kind == "loglinear_twostage":
        return [np.array([0.5, -0.5]), np.array([0.5, -0.5])]
    if kind == "continuous_twostage":
        return [np.array([1.0, 1.0, 1.0, 1.0]), np.array([1.0, 1.0, 1.0, 1.0])]
    return [np.array([0.5, 0.5, 0.5, 0.5]), np.array([0.5, 0.5, 0.5, 0.5])]


def _rng_for(scenario: Scenario, rep: int | None = None):
    entropy = (scenario.seed,) if rep is None else (scenario.seed, rep)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _correlated_normal(rng, n, k, rho, means):
    z = rng.standard_normal((n, k))
    if rho > 0:
        cov = np.full((k, k), rho)
        np.fill_diagonal(cov, 1.0)
        z = z @ np.linalg.cholesky(cov).T
    return z + means


def _draw_structure(scenario: Scenario, rng):
    """Covariates, treatments, per-stage regrets, and the outcome offset."""
    n, rho = scenario.n, scenario.covariate_correlation
    kind = scenario.kind

    if kind == "loglinear_twostage":
        x1 = rng.standard_normal((n, 1))
        a1 = (rng.random(n) < expit(x1[:, 0])).astype(float)
        x2 = a1[:, None] + rng.standard_normal((n, 1))
        a2 = (rng.random(n) < expit(x2[:, 0])).astype(float)
        offset = np.log(np.abs(x1[:, 0]))
    elif kind == "continuous_twostage":
        x1 = _correlated_normal(rng, n, 3, rho, 0.0)
        a1 = (rng.random(n) < expit(x1.sum(axis=1))).astype(float)
        x2 = _correlated_normal(rng, n, 3, rho, a1[:, None])
        a2 = (rng.random(n) < expit(x2.sum(axis=1))).astype(float)
        offset = np.zeros(n)
    else:  # discrete_qic
        means1 = np.array([1.0, -1.0, 1.0])
        x1 = _correlated_normal(rng, n, 3, rho, means1)
        a1 = (rng.random(n) < expit(x1[:, 0])).astype(float)
        means2 = np.column_stack([a1, np.full(n, -1.0), np.full(n, 1.0)])
        x2 = _correlated_normal(rng, n, 3, rho, means2)
        a2 = (rng.random(n) < expit(x2[:, 0])).astype(float)
        offset = np.zeros(n)

    regrets = []
    for x, a, psi in ((x1, a1, scenario.psi_true[0]), (x2, a2, scenario.psi_true[1])):
        blip_lin = psi[0] + x @ psi[1:]
        a_opt = (blip_lin > 0).astype(float)
        regrets.append((a_opt - a) * blip_lin)
    return (x1, x2), (a1, a2), regrets, offset


def covariate_names(kind: str) -> list:
    if kind == "loglinear_twostage":
        return [["x11"], ["x21"]]
    return [["x11", "x12", "x13"], ["x21", "x22", "x23"]]


def generate(scenario: Scenario, rng=None) -> Dataset:
    """Draw one dataset under the scenario's generative law."""
    rng = rng or _rng_for(scenario)
    (x1, x2), (a1, a2), regrets, offset = _draw_structure(scenario, rng)
    total_regret = regrets[0] + regrets[1]

    if scenario.kind == "continuous_twostage":
        if scenario.error == "centered_lognormal":
            eps = rng.lognormal(0.0, 1.0, scenario.n) - np.exp(0.5)
        else:
            eps = rng.standard_normal(scenario.n)
        y = -total_regret + eps
    else:
        if scenario.beta0 is None:
            raise ValueError(
                "count-outcome scenarios need beta0; run calibrate_beta0 first"
            )
        lam = np.exp(scenario.beta0 + offset - total_regret)
        y = rng.poisson(lam).astype(float)

    return Dataset([x1, x2], np.column_stack([a1, a2]), y,
                   covariate_names(scenario.kind))


def calibrate_beta0(kind: str, psi_true, target_zero_prob: float,
                    seed: int = 0, n_draws: int = 1_000_000,
                    bracket: tuple = (-5.0, 10.0)) -> float:
    """Intercept giving P(Y = 0) near the target, by Monte Carlo bisection.

    The count mean factorizes as exp(beta0) * exp(base), so one set of base
    draws serves every bisection step; P(Y=0) = E[exp(-lambda)] is then exact
    up to Monte Carlo error and monotone decreasing in beta0.
    """
    if not 0.0 < target_zero_prob < 1.0:
        raise CalibrationError("target zero probability must be in (0, 1)")
    scen = Scenario(kind=kind, n=n_draws, psi_true=psi_true, beta0=0.0, seed=seed)
    if kind == "continuous_twostage":
        raise CalibrationError("zero-probability calibration needs a count outcome")
    rng = _rng_for(scen)
    _, _, regrets, offset = _draw_structure(scen, rng)
    base = offset - regrets[0] - regrets[1]

    def p_zero(beta0):
        return float(np.mean(np.exp(-np.exp(beta0 + base))))

    lo, hi = bracket
    p_lo, p_hi = p_zero(lo), p_zero(hi)
    if not (p_hi <= target_zero_prob <= p_lo):
        raise CalibrationError(
            f"target {target_zero_prob} not bracketed on [{lo}, {hi}]: "
            f"P0({lo}) = {p_lo:.4f}, P0({hi}) = {p_hi:.4f}"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        p_mid = p_zero(mid)
        if abs(p_mid - target_zero_prob) < 2e-3:
            return mid
        if p_mid > target_zero_prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def true_blip_terms(scenario: Scenario, stage: int) -> list:
    """History labels whose true blip coefficient is nonzero (intercept aside)."""
    names = covariate_names(scenario.kind)[stage - 1]
    coefs = scenario.psi_true[stage - 1][1:]
    return [name for name, c in zip(names, coefs) if c != 0.0]


def analysis_spec(scenario: Scenario) -> ModelSpec:
    """The study's standard analysis models for the scenario.

    Treatment models are correctly specified; treatment-free models carry the
    study's deliberate misspecification (linear in the covariates that truly
    enter through a log-magnitude or regret term).  Blip terms default to the
    truth; selection studies swap them per candidate.
    """
    kind = scenario.kind
    if kind == "loglinear_twostage":
        stages = [
            StageModel(blip_terms=["x11"], treatment_free_terms=["x11"],
                       treatment_terms=["x11"]),
            StageModel(blip_terms=["x21"],
                       treatment_free_terms=["x11", "a1", "x21"],
                       treatment_terms=["x21"]),
        ]
        return ModelSpec("loglinear", "binary", stages)
    if kind == "continuous_twostage":
        stages = [
            StageModel(blip_terms=true_blip_terms(scenario, 1),
                       treatment_free_terms=["x11", "x12", "x13"],
                       treatment_terms=["x11", "x12", "x13"]),
            StageModel(blip_terms=true_blip_terms(scenario, 2),
                       treatment_free_terms=["x11", "x12", "x13", "a1",
                                             "a1:x11", "a1:x12", "a1:x13",
                                             "x21", "x22", "x23"],
                       treatment_terms=["x21", "x22", "x23"]),
        ]
        return ModelSpec("linear", "binary", stages)
    stages = [
        StageModel(blip_terms=true_blip_terms(scenario, 1),
                   treatment_free_terms=["x11"], treatment_terms=["x11"]),
        StageModel(blip_terms=true_blip_terms(scenario, 2),
                   treatment_free_terms=["x21"], treatment_terms=["x21"]),
    ]
    return ModelSpec("loglinear", "binary", stages)


def candidate_terms(scenario: Scenario) -> list:
    """Stepwise candidate pools per stage (every tailoring covariate)."""
    return [list(names) for names in covariate_names(scenario.kind)]


def nested_candidate_models(scenario: Scenario) -> list:
    """Nested candidate models per stage: intercept, +x1, +x2, +x3."""
    out = []
    for names in covariate_names(scenario.kind):
        out.append([names[:k] for k in range(len(names) + 1)])
    return out


@dataclass
class Analysis:
    """What to do with each replication."""

    mode: str = "fit"  # "fit" | "select"
    selectors: tuple = ("qic-forward", "qic-backward", "wald-forward",
                        "wald-backward")
    stage2_policy: str = "correct"  # correct | recommended | intercept
    stages: tuple = (1, 2)  # selection stages to record
    irls: IrlsOptions = field(default_factory=IrlsOptions)

    def __post_init__(self):
        if self.mode not in ("fit", "select"):
            raise ValueError(f"unknown analysis mode {self.mode!r}")
        for s in self.selectors:
            if s not in SELECTORS:
                raise ValueError(f"unknown selector {s!r}")
        if self.stage2_policy not in ("correct", "recommended", "intercept"):
            raise ValueError(f"unknown stage2_policy {self.stage2_policy!r}")


def _run_selector(selector, dataset, spec, scenario, fixed_stages, opts):
    if selector == "exhaustive":
        return exhaustive_select(dataset, spec, nested_candidate_models(scenario),
                                 opts=opts, fixed_stages=fixed_stages)
    criterion, direction = selector.split("-")
    return stepwise_select(dataset, spec, candidate_terms(scenario),
                           direction=direction, criterion=criterion, opts=opts,
                           fixed_stages=fixed_stages)


def _stage_outcome(result, stage):
    """(chosen terms, all candidate fits converged) for one selection stage."""
    if result is None:
        return None, False
    failed = any(t.stage == stage and t.decision == "failed" for t in result.trail)
    chosen = tuple(result.chosen_per_stage[stage - 1])
    return chosen, not failed


def _replicate(scenario: Scenario, analysis: Analysis, rep: int) -> dict:
    rng = _rng_for(scenario, rep)
    dataset = generate(scenario, rng)
    spec = analysis_spec(scenario)

    if analysis.mode == "fit":
        try:
            fit = fit_dtr(dataset, spec, opts=analysis.irls)
        except GestError:
            return {"ok": False}
        if fit.failed:
            return {"ok": False}
        psi = np.concatenate(
            [fit.stage(j).fit.psi for j in range(1, dataset.n_stages + 1)]
        )
        se = np.concatenate(
            [fit.stage(j).inference.se for j in range(1, dataset.n_stages + 1)]
        )
        traces = np.array(
            [fit.stage(j).inference.K for j in range(1, dataset.n_stages + 1)]
        )
        return {"ok": True, "psi": psi, "se": se, "K": traces}

    out = {"ok": True, "selection": {}}
    correct_s2 = true_blip_terms(scenario, 2)
    need_pass1 = 2 in analysis.stages or analysis.stage2_policy == "recommended"
    for selector in analysis.selectors:
        rec = {}
        pass1 = None
        if need_pass1:
            try:
                pass1 = _run_selector(selector, dataset, spec, scenario, None,
                                      analysis.irls)
            except (SelectionError, GestError):
                pass1 = None
        if 2 in analysis.stages:
            rec["stage2"] = _stage_outcome(pass1, 2)

        if 1 in analysis.stages:
            if analysis.stage2_policy == "recommended":
                rec["stage1"] = _stage_outcome(pass1, 1)
            else:
                fixed = correct_s2 if analysis.stage2_policy == "correct" else []
                try:
                    pass2 = _run_selector(selector, dataset, spec, scenario,
                                          {2: fixed}, analysis.irls)
                except (SelectionError, GestError):
                    pass2 = None
                rec["stage1"] = _stage_outcome(pass2, 1)
        out["selection"][selector] = rec
    return out


def _replicate_chunk(args):
    scenario, analysis, reps = args
    return [_replicate(scenario, analysis, r) for r in reps]


@dataclass
class ReplicationReport:
    """Aggregated Monte Carlo results for one scenario and analysis."""

    scenario: Scenario
    analysis: Analysis
    n_requested: int
    n_converged: int
    failures: int
    param_names: list = field(default_factory=list)
    estimates: np.ndarray = None
    ses: np.ndarray = None
    traces: np.ndarray = None
    selection: dict = field(default_factory=dict)
    seed_scheme: str = "seedsequence(entropy=(seed, rep))"

    @property
    def psi_mean(self):
        return self.estimates.mean(axis=0)

    @property
    def psi_sd(self):
        return self.estimates.std(axis=0, ddof=1)

    @property
    def se_mean(self):
        return self.ses.mean(axis=0)

    @property
    def trace_mean(self):
        return self.traces.mean(axis=0)

    def selection_counts(self, selector: str, stage: int, terms,
                         converged_only: bool = True):
        """(hits, denominator) for a chosen-term set at a stage."""
        rec = self.selection[selector][f"stage{stage}"]
        terms = tuple(terms)
        hits = denom = 0
        for chosen, ok in rec:
            usable = ok if converged_only else chosen is not None
            if not usable:
                continue
            denom += 1
            if chosen is not None and tuple(sorted(chosen)) == tuple(sorted(terms)):
                hits += 1
        return hits, denom

    def selection_rate(self, selector: str, stage: int, terms,
                       converged_only: bool = True) -> float:
        hits, denom = self.selection_counts(selector, stage, terms, converged_only)
        return hits / denom if denom else float("nan")


def _max_workers(requested: int | None) -> int:
    cap = os.environ.get("GESTDTR_THREADS")
    cap = int(cap) if cap else None
    if requested is None:
        requested = cap or 1
    if cap is not None:
        requested = min(requested, cap)
    return max(1, requested)


def run_replications(scenario: Scenario, n_reps: int, analysis: Analysis,
                     workers: int | None = None) -> ReplicationReport:
    """Generate, analyze, and aggregate n_reps independent datasets.

    Child seed for replication r is SeedSequence((scenario.seed, r)), so the
    report is a pure function of (scenario, n_reps, analysis) no matter how
    many workers run.  Failed replications are excluded from parameter
    summaries and counted.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    workers = _max_workers(workers)
    if workers > 1 and n_reps > 1:
        chunks = np.array_split(np.arange(n_reps), workers * 4)
        chunks = [c for c in chunks if c.size]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                _replicate_chunk,
                [(scenario, analysis, list(c)) for c in chunks],
            ))
        results = [r for part in parts for r in part]
    else:
        results = [_replicate(scenario, analysis, r) for r in range(n_reps)]

    if analysis.mode == "fit":
        good = [r for r in results if r["ok"]]
        n_conv = len(good)
        spec = analysis_spec(scenario)
        names = []
        for j, m in enumerate(spec.stages, start=1):
            names.extend([f"psi{j}_{t}" for t in (["1"] + list(m.blip_terms))])
        return ReplicationReport(
            scenario=scenario, analysis=analysis, n_requested=n_reps,
            n_converged=n_conv, failures=n_reps - n_conv, param_names=names,
            estimates=np.array([r["psi"] for r in good]) if good else np.empty((0, len(names))),
            ses=np.array([r["se"] for r in good]) if good else np.empty((0, len(names))),
            traces=np.array([r["K"] for r in good]) if good else np.empty((0, 2)),
        )

    stage_keys = [f"stage{j}" for j in analysis.stages]
    selection = {
        selector: {
            key: [r["selection"][selector][key] for r in results]
            for key in stage_keys
        }
        for selector in analysis.selectors
    }
    ok_counts = sum(
        all(r["selection"][s][key][1]
            for s in analysis.selectors for key in stage_keys)
        for r in results
    )
    return ReplicationReport(
        scenario=scenario, analysis=analysis, n_requested=n_reps,
        n_converged=ok_counts, failures=n_reps - ok_counts, selection=selection,
    )


def aggregate_selection(reports: list, converged_only: bool = True) -> dict:
    """Pool correct-selection rates across true-model setups.

    Stage-1 rows pool reports sharing the stage-1 truth across stage-2 truths
    and vice versa, by summing hits and denominators.  Returns both the pooled
    table and the non-aggregated per-setup view.
    """
    if not reports:
        raise AggregationError("no reports to aggregate")
    first = reports[0]
    for rep in reports[1:]:
        if rep.analysis.mode != "select" or first.analysis.mode != "select":
            raise AggregationError("aggregation requires selection reports")
        if rep.scenario.kind != first.scenario.kind:
            raise AggregationError("reports mix scenario kinds")
        if tuple(rep.analysis.selectors) != tuple(first.analysis.selectors):
            raise AggregationError("reports mix selector sets")

    selectors = list(first.analysis.selectors)
    aggregated, non_aggregated = [], []
    for rep in reports:
        truth1 = tuple(true_blip_terms(rep.scenario, 1))
        truth2 = tuple(true_blip_terms(rep.scenario, 2))
        for selector in selectors:
            for stage, truth in ((1, truth1), (2, truth2)):
                if stage not in rep.analysis.stages:
                    continue
                hits, denom = rep.selection_counts(selector, stage, truth,
                                                   converged_only)
                non_aggregated.append({
                    "method": selector, "stage": stage, "true_stage1": truth1,
                    "true_stage2": truth2, "hits": hits, "n": denom,
                    "rate": hits / denom if denom else float("nan"),
                })

    pooled: dict = {}
    for row in non_aggregated:
        truth = row["true_stage1"] if row["stage"] == 1 else row["true_stage2"]
        key = (row["method"], row["stage"], truth)
        hits, denom = pooled.get(key, (0, 0))
        pooled[key] = (hits + row["hits"], denom + row["n"])
    for (method, stage, truth), (hits, denom) in sorted(pooled.items()):
        aggregated.append({
            "method": method, "stage": stage, "true": truth, "hits": hits,
            "n": denom, "rate": hits / denom if denom else float("nan"),
        })
    return {"aggregated": aggregated, "non_aggregated": non_aggregated}
