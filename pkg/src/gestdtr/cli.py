"""Command-line interface: fit, select, simulate, regime.

Structured configuration comes from a JSON file (--config); common fields can
be overridden by flags.  Tables are emitted as CSV or JSON; simulation reports
additionally render a PNG figure next to the table.  GESTDTR_THREADS caps the
replication worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .engine import exhaustive_select, fit_dtr, stepwise_select
from .exceptions import GestError, SpecificationError
from .io import RunConfig, read_dataset
from .presets import PRESETS
from .simulation import Analysis, generate, run_replications


def _fail(exc: Exception, code: int = 2) -> int:
    sys.stderr.write(json.dumps(
        {"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def _write_rows(rows, path, fmt) -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=2, default=str) + "\n")
        return
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.read(args.config)
    else:
        cfg = RunConfig(command=args.cmd)
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.scenario is not None:
            cfg.scenario.seed = args.seed
    if args.reps is not None:
        cfg.reps = args.reps
    if args.out is not None:
        cfg.output = args.out
    if args.format is not None:
        cfg.format = args.format
    return cfg


def _require_dataset(cfg: RunConfig):
    if cfg.dataset_path is None or cfg.spec is None:
        raise SpecificationError("this command needs dataset_path and spec in the config")
    dataset = read_dataset(cfg.dataset_path)
    return dataset, cfg.spec


def cmd_fit(cfg: RunConfig) -> int:
    dataset, spec = _require_dataset(cfg)
    fit = fit_dtr(dataset, spec, opts=cfg.irls)
    stages_out = []
    rows = []
    for j in range(1, dataset.n_stages + 1):
        try:
            res = fit.stage(j)
        except KeyError:
            continue
        inf = res.inference
        entry = {
            "stage": j,
            "converged": bool(res.fit.converged),
            "psi": dict(zip(res.design.psi_names, map(float, res.fit.psi))),
            "beta": dict(zip(res.design.beta_names, map(float, res.fit.beta))),
            "alpha": dict(zip(res.design.alpha_names,
                              map(float, res.treatment_fit.alpha))),
        }
        if inf is not None:
            entry["se"] = dict(zip(res.design.psi_names, map(float, inf.se)))
            entry.update(Q=float(inf.Q), K=float(inf.K), qic=float(inf.qic))
        stages_out.append(entry)
        for block in ("psi", "beta", "alpha"):
            for name, val in entry[block].items():
                rows.append({
                    "stage": j, "block": block, "name": name, "estimate": val,
                    "se": entry.get("se", {}).get(name, "") if block == "psi" else "",
                })
        for key in ("Q", "K", "qic"):
            if key in entry:
                rows.append({"stage": j, "block": "summary", "name": key,
                             "estimate": entry[key], "se": ""})
        rows.append({"stage": j, "block": "summary", "name": "converged",
                     "estimate": entry["converged"], "se": ""})

    payload = {"failed": fit.failed, "failure_stage": fit.failure_stage,
               "stages": stages_out}
    out = cfg.output or f"fit.{cfg.format}"
    if cfg.format == "json":
        Path(out).write_text(json.dumps(payload, indent=2) + "\n")
    else:
        _write_rows(rows, out, "csv")
    return 1 if fit.failed else 0


def cmd_select(cfg: RunConfig) -> int:
    dataset, spec = _require_dataset(cfg)
    sel = cfg.selection
    if sel.direction == "exhaustive":
        result = exhaustive_select(dataset, spec, sel.candidate_models,
                                   opts=cfg.irls)
    else:
        result = stepwise_select(dataset, spec, sel.candidate_terms,
                                 direction=sel.direction,
                                 criterion=sel.criterion, opts=cfg.irls)
    payload = {
        "chosen_per_stage": result.chosen_per_stage,
        "direction": result.direction,
        "criterion": result.criterion,
        "seed": cfg.seed,
        "trail": [
            {"stage": t.stage, "terms": list(t.terms), "value": t.value,
             "decision": t.decision}
            for t in result.trail
        ],
    }
    out = cfg.output or f"select.{cfg.format}"
    if cfg.format == "json":
        Path(out).write_text(json.dumps(payload, indent=2) + "\n")
    else:
        rows = [{"stage": t["stage"], "terms": "+".join(t["terms"]) or "intercept",
                 "value": t["value"], "decision": t["decision"]}
                for t in payload["trail"]]
        _write_rows(rows, out, "csv")
    return 0


def cmd_simulate(cfg: RunConfig, preset: str | None, workers) -> int:
    fmt = cfg.format
    if preset:
        if preset not in PRESETS:
            raise SpecificationError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        rows, figure = PRESETS[preset](cfg.reps, cfg.seed, workers,
                                       stage2_policy=cfg.selection.stage2_policy)
        out = Path(cfg.output or f"{preset}.{fmt}")
        _write_rows(rows, out, fmt)
        figure(out.with_suffix(".png"))
        return 0
    if cfg.scenario is None:
        raise SpecificationError("simulate needs --scenario or a scenario config")
    from . import plots

    analysis = Analysis(mode="fit", irls=cfg.irls)
    rep = run_replications(cfg.scenario, cfg.reps, analysis, workers=workers)
    rows = [{
        "param": name,
        "mean": float(rep.psi_mean[k]),
        "sd": float(rep.psi_sd[k]),
        "se_mean": float(rep.se_mean[k]),
    } for k, name in enumerate(rep.param_names)]
    rows.append({"param": "n_converged", "mean": rep.n_converged,
                 "sd": "", "se_mean": ""})
    out = Path(cfg.output or f"simulate.{fmt}")
    _write_rows(rows, out, fmt)
    truths = [c for p in cfg.scenario.psi_true for c in p]
    plots.estimate_boxplots(rep, truths, out.with_suffix(".png"))
    return 0


def cmd_regime(cfg: RunConfig) -> int:
    if cfg.dataset_path is None and cfg.scenario is not None:
        dataset = generate(cfg.scenario)
        spec = cfg.spec
    else:
        dataset, spec = _require_dataset(cfg)
    fit = fit_dtr(dataset, spec, opts=cfg.irls)
    if fit.failed:
        raise GestError(f"fit failed at stage {fit.failure_stage}: "
                        f"{fit.failure_reason}")
    opt = fit.optimal_treatments
    rows = [
        {"id": i, **{f"a{j + 1}_opt": float(opt[i, j])
                     for j in range(dataset.n_stages)}}
        for i in range(dataset.n)
    ]
    out = cfg.output or f"regime.{cfg.format}"
    _write_rows(rows, out, cfg.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gestdtr",
        description="G-estimation of optimal dynamic treatment regimes",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in ("fit", "select", "simulate", "regime"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--reps", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=("csv", "json"), default=None)
        if name == "simulate":
            p.add_argument("--scenario", default=None,
                           help=f"preset name: {', '.join(sorted(PRESETS))}")
            p.add_argument("--stage2-policy", default=None,
                           choices=("correct", "recommended", "intercept"))
            p.add_argument("--workers", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.cmd == "fit":
            return cmd_fit(cfg)
        if args.cmd == "select":
            return cmd_select(cfg)
        if args.cmd == "simulate":
            if getattr(args, "stage2_policy", None):
                cfg.selection.stage2_policy = args.stage2_policy
            return cmd_simulate(cfg, getattr(args, "scenario", None),
                                getattr(args, "workers", None))
        if args.cmd == "regime":
            return cmd_regime(cfg)
        raise SpecificationError(f"unknown command {args.cmd!r}")
    except GestError as exc:
        return _fail(exc)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
