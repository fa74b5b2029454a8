"""Simulation presets mirroring the published report-table layouts.

Each preset returns (rows, figure_writer): rows are flat dicts ready for CSV
or JSON emission, figure_writer saves a matplotlib summary next to the table.
Replication counts are controlled by the caller; the published tables used
1000 per setup.
"""

from __future__ import annotations

import numpy as np

from . import plots
from .simulation import (
    Analysis,
    Scenario,
    aggregate_selection,
    calibrate_beta0,
    run_replications,
    true_blip_terms,
)

TRUTH_PATTERNS = ((1.0, 0.0, 0.0), (1.0, 1.0, 0.0), (1.0, 1.0, 1.0))
STEPWISE = ("qic-forward", "qic-backward", "wald-forward", "wald-backward")


def _psi(pattern, scale=1.0, intercept=1.0):
    return np.array([intercept] + [scale * c for c in pattern])


def _fmt(mean, sd):
    return f"{mean:.3f} ({sd:.3f})"


def _selection_grid(n, reps, seed, workers, error="centered_lognormal",
                    rho=0.0, effect=1.0, stage2_policy="correct"):
    """Run the 3x3 truth grid of the continuous-outcome selection study."""
    reports = []
    for i, t1 in enumerate(TRUTH_PATTERNS):
        for k, t2 in enumerate(TRUTH_PATTERNS):
            sc = Scenario(
                kind="continuous_twostage", n=n,
                psi_true=[_psi(t1, effect), _psi(t2, effect)],
                error=error, covariate_correlation=rho,
                seed=seed + 10 * i + k,
            )
            reports.append(run_replications(
                sc, reps, Analysis(mode="select", stage2_policy=stage2_policy),
                workers=workers,
            ))
    return reports


def _rate_rows(reports, label_extra=None):
    agg = aggregate_selection(reports)
    by_truth: dict = {}
    for row in agg["aggregated"]:
        key = (row["stage"], row["true"])
        by_truth.setdefault(key, {})[row["method"]] = row["rate"]
    rows = []
    for (stage, true), of_method in sorted(by_truth.items()):
        row = dict(label_extra or {})
        row["model"] = ",".join(true) or "intercept"
        row["stage"] = stage
        row["QIC_G (F)"] = round(of_method.get("qic-forward", float("nan")), 3)
        row["QIC_G (B)"] = round(of_method.get("qic-backward", float("nan")), 3)
        row["Wald (F)"] = round(of_method.get("wald-forward", float("nan")), 3)
        row["Wald (B)"] = round(of_method.get("wald-backward", float("nan")), 3)
        rows.append(row)
    return rows, agg


def preset_table1(reps, seed, workers, stage2_policy="correct"):
    """Log-linear IRLS estimation summary across n and zero probabilities."""
    rows = []
    last_report = None
    for p0 in (0.05, 0.10, 0.20):
        beta0 = calibrate_beta0("loglinear_twostage", None, p0, seed=seed)
        for n in (50, 100, 200, 500):
            sc = Scenario(kind="loglinear_twostage", n=n, zero_prob_target=p0,
                          beta0=beta0, seed=seed + n)
            rep = run_replications(sc, reps, Analysis(mode="fit"), workers=workers)
            last_report = rep
            mean, sd = rep.psi_mean, rep.psi_sd
            rows.append({
                "n": n,
                "P(Y=0)": p0,
                "psi10 (SE)": _fmt(mean[0], sd[0]),
                "psi11 (SE)": _fmt(mean[1], sd[1]),
                "psi20 (SE)": _fmt(mean[2], sd[2]),
                "psi21 (SE)": _fmt(mean[3], sd[3]),
                "n_converged": rep.n_converged,
                "failure_rate": round(rep.failures / rep.n_requested, 4),
            })

    def figure(path):
        plots.estimate_boxplots(last_report, [0.5, -0.5, 0.5, -0.5], path)

    return rows, figure


def preset_table2(reps, seed, workers, stage2_policy="correct"):
    """Stepwise selection rates for the continuous outcome, pooled by truth."""
    rows = []
    agg_last = None
    for n in (50, 100, 200):
        reports = _selection_grid(n, reps, seed, workers,
                                  stage2_policy=stage2_policy)
        n_rows, agg_last = _rate_rows(reports, {"n": n})
        rows.extend(n_rows)

    def figure(path):
        plots.selection_rate_bars(agg_last["aggregated"], path,
                                  title="correct-selection rates, largest n")

    return rows, figure


def preset_table3(reps, seed, workers, stage2_policy=None):
    """Stage-1 selection under correct/recommended/intercept stage-2 policies."""
    rows = []
    agg = None
    for policy in ("correct", "recommended", "intercept"):
        reports = _selection_grid(100, reps, seed, workers, stage2_policy=policy)
        p_rows, agg = _rate_rows(reports, {"stage2_policy": policy})
        rows.extend(r for r in p_rows if r["stage"] == 1)

    def figure(path):
        plots.selection_rate_bars(
            [r for r in agg["aggregated"] if r["stage"] == 1], path,
            title="stage-1 rates, intercept policy",
        )

    return rows, figure


def preset_supp_s1(reps, seed, workers, stage2_policy="correct"):
    """Discrete-outcome exhaustive QIC selection shares per candidate."""
    rows = []
    shares_fig = []
    for pattern in TRUTH_PATTERNS:
        psis = [_psi(pattern, 0.5, intercept=0.5)] * 2
        beta0 = calibrate_beta0("discrete_qic", psis, 0.10, seed=seed)
        sc = Scenario(kind="discrete_qic", n=200, psi_true=psis,
                      zero_prob_target=0.10, beta0=beta0, seed=seed + 1)
        rep = run_replications(
            sc, reps, Analysis(mode="select", selectors=("exhaustive",),
                               stage2_policy=stage2_policy),
            workers=workers,
        )
        for stage in (1, 2):
            names = ["x11", "x12", "x13"] if stage == 1 else ["x21", "x22", "x23"]
            truth = tuple(true_blip_terms(sc, stage))
            row = {"stage": stage, "true": ",".join(truth)}
            for k in range(4):
                cand = tuple(names[:k])
                hits, denom = rep.selection_counts("exhaustive", stage, cand)
                row[",".join(cand) or "intercept"] = (
                    round(hits / denom, 3) if denom else float("nan")
                )
                if cand == truth:
                    shares_fig.append({"method": "exhaustive", "stage": stage,
                                       "true": truth, "rate": hits / denom})
            row["n_all_converged"] = denom
            rows.append(row)

    def figure(path):
        plots.selection_rate_bars(shares_fig, path,
                                  title="discrete outcome, exhaustive QIC")

    return rows, figure


def _variant_preset(param_name, values, reps, seed, workers,
                    stage2_policy="correct", **fixed):
    rows = []
    agg = None
    for value in values:
        kwargs = dict(fixed)
        kwargs[param_name] = value
        reports = _selection_grid(100, reps, seed, workers,
                                  stage2_policy=stage2_policy, **kwargs)
        v_rows, agg = _rate_rows(reports, {param_name: value})
        rows.extend(v_rows)

    def figure(path):
        plots.selection_rate_bars(agg["aggregated"], path)

    return rows, figure


def preset_supp_s2(reps, seed, workers, stage2_policy="correct"):
    """Effect-size variants of the selection study."""
    return _variant_preset("effect", (1.0, 0.5, 0.1), reps, seed, workers,
                           stage2_policy=stage2_policy)


def preset_supp_s3(reps, seed, workers, stage2_policy="correct"):
    """Covariate-correlation variants of the selection study."""
    return _variant_preset("rho", (0.0, 0.25, 0.5), reps, seed, workers,
                           stage2_policy=stage2_policy)


def preset_supp_s4(reps, seed, workers, stage2_policy="correct"):
    """Non-aggregated selection rates (per stage-1 x stage-2 truth)."""
    reports = _selection_grid(100, reps, seed, workers,
                              stage2_policy=stage2_policy)
    agg = aggregate_selection(reports)
    rows = []
    for r in agg["non_aggregated"]:
        rows.append({
            "stage": r["stage"],
            "true_stage1": ",".join(r["true_stage1"]),
            "true_stage2": ",".join(r["true_stage2"]),
            "method": r["method"],
            "rate": round(r["rate"], 3),
            "n": r["n"],
        })

    def figure(path):
        plots.selection_rate_bars(agg["aggregated"], path)

    return rows, figure


def preset_supp_s5(reps, seed, workers, stage2_policy="correct"):
    """Normal-error variant of the main selection table."""
    rows = []
    agg = None
    for n in (50, 100, 200):
        reports = _selection_grid(n, reps, seed, workers,
                                  error="standard_normal",
                                  stage2_policy=stage2_policy)
        n_rows, agg = _rate_rows(reports, {"n": n})
        rows.extend(n_rows)

    def figure(path):
        plots.selection_rate_bars(agg["aggregated"], path, title="normal errors")

    return rows, figure


def preset_supp_s6(reps, seed, workers, stage2_policy=None):
    """Normal-error variant of the stage-2 policy table."""
    rows = []
    agg = None
    for policy in ("correct", "recommended", "intercept"):
        reports = _selection_grid(100, reps, seed, workers,
                                  error="standard_normal", stage2_policy=policy)
        p_rows, agg = _rate_rows(reports, {"stage2_policy": policy})
        rows.extend(r for r in p_rows if r["stage"] == 1)

    def figure(path):
        plots.selection_rate_bars(
            [r for r in agg["aggregated"] if r["stage"] == 1], path,
            title="normal errors, stage-1 rates",
        )

    return rows, figure


def preset_supp_s7(reps, seed, workers, stage2_policy="correct"):
    """Normal-error effect-size variants."""
    return _variant_preset("effect", (1.0, 0.5, 0.1), reps, seed, workers,
                           stage2_policy=stage2_policy, error="standard_normal")


def preset_supp_s8(reps, seed, workers, stage2_policy="correct"):
    """Normal-error correlation variants."""
    return _variant_preset("rho", (0.0, 0.25, 0.5), reps, seed, workers,
                           stage2_policy=stage2_policy, error="standard_normal")


def preset_trace_k(reps, seed, workers, stage2_policy=None):
    """Penalty-term distribution by fitted dimension, normal errors."""
    rows = []
    traces = {}
    for pattern in TRUTH_PATTERNS:
        sc = Scenario(kind="continuous_twostage", n=100,
                      psi_true=[_psi(pattern), _psi(pattern)],
                      error="standard_normal", seed=seed)
        rep = run_replications(sc, reps, Analysis(mode="fit"), workers=workers)
        dim = 1 + sum(1 for c in pattern if c)
        traces[dim] = rep.traces
        for stage in (1, 2):
            k = rep.traces[:, stage - 1]
            rows.append({"dimension": dim, "stage": stage,
                         "K_mean": round(float(k.mean()), 3),
                         "K_sd": round(float(k.std(ddof=1)), 3),
                         "n_converged": rep.n_converged})

    def figure(path):
        plots.trace_boxplots(traces, path)

    return rows, figure


PRESETS = {
    "table1": preset_table1,
    "table2": preset_table2,
    "table3": preset_table3,
    "supp-s1": preset_supp_s1,
    "supp-s2": preset_supp_s2,
    "supp-s3": preset_supp_s3,
    "supp-s4": preset_supp_s4,
    "supp-s5": preset_supp_s5,
    "supp-s6": preset_supp_s6,
    "supp-s7": preset_supp_s7,
    "supp-s8": preset_supp_s8,
    "trace-k": preset_trace_k,
}
