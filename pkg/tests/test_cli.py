import json

import numpy as np
import pytest

from gestdtr import Dataset, ModelSpec, Scenario, StageModel, fit_dtr, generate
from gestdtr.cli import main
from gestdtr.io import (
    RunConfig,
    SelectionOptions,
    read_dataset,
    write_dataset,
)
from gestdtr.simulation import analysis_spec


@pytest.fixture()
def linear_setup(tmp_path):
    sc = Scenario(kind="continuous_twostage", n=120, seed=44)
    ds = generate(sc)
    spec = analysis_spec(sc)
    data_path = tmp_path / "data.csv"
    write_dataset(ds, data_path)
    return sc, ds, spec, data_path


def test_empty_csv_is_parse_error(tmp_path, capsys):
    p = tmp_path / "empty.csv"
    p.write_text("")
    cfg = RunConfig(command="fit", dataset_path=str(p),
                    spec=ModelSpec("linear", "binary", [StageModel()]))
    cfg_path = tmp_path / "cfg.json"
    cfg.write(cfg_path)
    rc = main(["fit", "--config", str(cfg_path)])
    assert rc != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "SpecificationError"
    assert "empty" in err["message"]


def test_fit_json_matches_library_bit_for_bit(linear_setup, tmp_path):
    sc, ds, spec, data_path = linear_setup
    out = tmp_path / "fit.json"
    cfg = RunConfig(command="fit", dataset_path=str(data_path), spec=spec,
                    format="json", output=str(out))
    cfg_path = tmp_path / "cfg.json"
    cfg.write(cfg_path)
    assert main(["fit", "--config", str(cfg_path)]) == 0
    got = json.loads(out.read_text())
    lib = fit_dtr(read_dataset(data_path), spec)
    for stage_entry in got["stages"]:
        res = lib.stage(stage_entry["stage"])
        for name, val in stage_entry["psi"].items():
            idx = res.design.psi_names.index(name)
            assert val == float(res.fit.psi[idx])
        assert stage_entry["qic"] == float(res.inference.qic)


def test_fit_rejects_negative_outcome_for_loglinear(linear_setup, tmp_path,
                                                    capsys):
    sc, ds, spec, data_path = linear_setup
    bad = Dataset(ds.covariates, ds.treatments,
                  ds.outcome - ds.outcome.max() - 1, ds.covariate_names)
    bad_path = tmp_path / "bad.csv"
    write_dataset(bad, bad_path)
    loglin = ModelSpec("loglinear", "binary", spec.stages)
    cfg = RunConfig(command="fit", dataset_path=str(bad_path), spec=loglin)
    cfg_path = tmp_path / "cfg.json"
    cfg.write(cfg_path)
    rc = main(["fit", "--config", str(cfg_path)])
    assert rc != 0
    err = json.loads(capsys.readouterr().err)
    assert "negative outcome" in err["message"]
    assert "rows" in err["message"]


def test_select_single_candidate_trail(linear_setup, tmp_path):
    sc, ds, spec, data_path = linear_setup
    out = tmp_path / "sel.json"
    cfg = RunConfig(
        command="select", dataset_path=str(data_path), spec=spec,
        format="json", output=str(out),
        selection=SelectionOptions(direction="exhaustive",
                                   candidate_models=[[["x11"]], [["x21"]]]),
    )
    cfg_path = tmp_path / "cfg.json"
    cfg.write(cfg_path)
    assert main(["select", "--config", str(cfg_path)]) == 0
    got = json.loads(out.read_text())
    assert got["chosen_per_stage"] == [["x11"], ["x21"]]
    assert len([t for t in got["trail"] if t["decision"] == "evaluated"]) == 2


def test_select_exhaustive_loglinear_matches_library(tmp_path):
    import gestdtr as g

    beta0 = 1.5
    sc = Scenario(kind="discrete_qic", n=150, beta0=beta0, seed=88)
    ds = generate(sc)
    spec = analysis_spec(sc)
    write_dataset(ds, tmp_path / "d.csv")
    models = [[[], ["x11"], ["x11", "x12"], ["x11", "x12", "x13"]],
              [[], ["x21"], ["x21", "x22"], ["x21", "x22", "x23"]]]
    out = tmp_path / "sel.json"
    cfg = RunConfig(command="select", dataset_path=str(tmp_path / "d.csv"),
                    spec=spec, format="json", output=str(out),
                    selection=SelectionOptions(direction="exhaustive",
                                               candidate_models=models))
    cfg.write(tmp_path / "cfg.json")
    assert main(["select", "--config", str(tmp_path / "cfg.json")]) == 0
    got = json.loads(out.read_text())
    lib = g.exhaustive_select(ds, spec, models)
    assert got["chosen_per_stage"] == lib.chosen_per_stage
    cli_vals = [t["value"] for t in got["trail"] if t["decision"] == "evaluated"]
    lib_vals = [t.value for t in lib.trail if t.decision == "evaluated"]
    assert cli_vals == lib_vals


def test_select_directions_reproducible(linear_setup, tmp_path):
    sc, ds, spec, data_path = linear_setup
    outputs = {}
    for direction in ("forward", "backward"):
        for attempt in ("a", "b"):
            out = tmp_path / f"sel_{direction}_{attempt}.json"
            cfg = RunConfig(
                command="select", dataset_path=str(data_path), spec=spec,
                format="json", output=str(out), seed=5,
                selection=SelectionOptions(
                    direction=direction, criterion="qic",
                    candidate_terms=[["x11", "x12", "x13"],
                                     ["x21", "x22", "x23"]]),
            )
            cfg_path = tmp_path / "c.json"
            cfg.write(cfg_path)
            assert main(["select", "--config", str(cfg_path)]) == 0
            outputs[(direction, attempt)] = out.read_text()
    assert outputs[("forward", "a")] == outputs[("forward", "b")]
    assert outputs[("backward", "a")] == outputs[("backward", "b")]


def test_simulate_fixed_seed_is_reproducible(tmp_path):
    sc = Scenario(kind="loglinear_twostage", n=60, beta0=2.0, seed=3)
    files = []
    for tag in ("x", "y"):
        out = tmp_path / f"sim_{tag}.csv"
        cfg = RunConfig(command="simulate", scenario=sc, reps=2,
                        output=str(out))
        cfg_path = tmp_path / "cfg.json"
        cfg.write(cfg_path)
        assert main(["simulate", "--config", str(cfg_path)]) == 0
        files.append(out.read_text())
    assert files[0] == files[1]
    assert (tmp_path / "sim_x.png").exists()


def test_table1_preset_columns(tmp_path):
    # few reps; the layout is what matters here
    out = tmp_path / "t1.csv"
    rc = main(["simulate", "--scenario", "table1", "--reps", "3",
               "--seed", "2", "--out", str(out)])
    assert rc == 0
    header = out.read_text().splitlines()[0].split(",")
    assert header[:6] == ["n", "P(Y=0)", "psi10 (SE)", "psi11 (SE)",
                          "psi20 (SE)", "psi21 (SE)"]
    assert out.with_suffix(".png").exists()


def test_table2_preset_columns(tmp_path):
    out = tmp_path / "t2.json"
    rc = main(["simulate", "--scenario", "table2", "--reps", "2",
               "--seed", "2", "--format", "json", "--out", str(out)])
    assert rc == 0
    rows = json.loads(out.read_text())
    assert {"n", "model", "stage", "QIC_G (F)", "QIC_G (B)", "Wald (F)",
            "Wald (B)"} <= set(rows[0])


def test_unknown_preset_fails_cleanly(capsys):
    rc = main(["simulate", "--scenario", "nope"])
    assert rc != 0
    assert "unknown preset" in json.loads(capsys.readouterr().err)["message"]


def test_regime_outputs_doses_inside_range(tmp_path):
    rng = np.random.default_rng(8)
    n = 80
    x = rng.normal(size=(n, 1))
    a = np.clip(0.5 * x[:, 0] + rng.normal(size=n), -2, 2)
    y = x[:, 0] + a * (1 + x[:, 0]) - 0.5 * a**2 + rng.normal(size=n)
    ds = Dataset([x], a.reshape(-1, 1), y, [["x11"]])
    write_dataset(ds, tmp_path / "d.csv")
    spec = ModelSpec("linear", "continuous", [
        StageModel(blip_terms=["x11"], treatment_free_terms=["x11"],
                   treatment_terms=["x11"], blip_quadratic_terms=[]),
    ], dose_range=(-1.0, 1.0))
    out = tmp_path / "regime.csv"
    cfg = RunConfig(command="regime", dataset_path=str(tmp_path / "d.csv"),
                    spec=spec, output=str(out))
    cfg.write(tmp_path / "cfg.json")
    assert main(["regime", "--config", str(tmp_path / "cfg.json")]) == 0
    doses = [float(line.split(",")[1])
             for line in out.read_text().splitlines()[1:]]
    assert all(-1.0 <= v <= 1.0 for v in doses)


def test_regime_binary_tie_and_positive_rules(tmp_path):
    rng = np.random.default_rng(9)
    n = 150
    x = rng.normal(size=(n, 1))
    a = (rng.random(n) < 0.5).astype(float)
    y = 0.2 * x[:, 0] + a * 5.0 + rng.normal(size=n, scale=0.1)
    ds = Dataset([x], a.reshape(-1, 1), y, [["x11"]])
    write_dataset(ds, tmp_path / "d.csv")
    spec = ModelSpec("linear", "binary", [
        StageModel(blip_terms=[], treatment_free_terms=["x11"],
                   treatment_terms=["x11"]),
    ])
    out = tmp_path / "r.csv"
    cfg = RunConfig(command="regime", dataset_path=str(tmp_path / "d.csv"),
                    spec=spec, output=str(out))
    cfg.write(tmp_path / "cfg.json")
    assert main(["regime", "--config", str(tmp_path / "cfg.json")]) == 0
    vals = {line.split(",")[1] for line in out.read_text().splitlines()[1:]}
    assert vals == {"1.0"}  # strongly positive intercept blip: everyone treated


def test_bad_number_reports_line_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,x1_x11,a1,y\n0,1.5,0.0,2.0\n1,oops,1.0,3.0\n")
    from gestdtr.exceptions import SpecificationError
    from gestdtr.io import read_dataset as rd
    with pytest.raises(SpecificationError, match="line 3, column 2"):
        rd(p)


def test_ragged_row_is_parse_error(tmp_path):
    p = tmp_path / "ragged.csv"
    p.write_text("id,x1_x11,a1,y\n0,1.5,0.0\n")
    from gestdtr.exceptions import SpecificationError
    from gestdtr.io import read_dataset as rd
    with pytest.raises(SpecificationError, match="line 2 has 3 fields"):
        rd(p)


def test_nonconverged_fit_exits_nonzero_with_partial_output(tmp_path):
    sc = Scenario(kind="loglinear_twostage", n=120, beta0=2.0, seed=31)
    ds = generate(sc)
    write_dataset(ds, tmp_path / "d.csv")
    spec = analysis_spec(sc)
    cfg = RunConfig(command="fit", dataset_path=str(tmp_path / "d.csv"),
                    spec=spec, format="json", output=str(tmp_path / "f.json"))
    cfg.irls.max_iter = 1  # force non-convergence at the last stage
    cfg.write(tmp_path / "cfg.json")
    rc = main(["fit", "--config", str(tmp_path / "cfg.json")])
    assert rc == 1
    got = json.loads((tmp_path / "f.json").read_text())
    assert got["failed"] is True and got["failure_stage"] == 2
    assert got["stages"][0]["converged"] is False


def test_config_roundtrip_identity(tmp_path):
    sc = Scenario(kind="discrete_qic", n=25, beta0=1.3, seed=77,
                  zero_prob_target=0.1)
    cfg = RunConfig(command="simulate", scenario=sc, seed=77, reps=12,
                    format="json", output="o.json",
                    selection=SelectionOptions(direction="backward",
                                               criterion="wald"))
    p = tmp_path / "cfg.json"
    cfg.write(p)
    again = RunConfig.read(p)
    assert again.to_dict() == cfg.to_dict()
    again.write(tmp_path / "cfg2.json")
    assert (tmp_path / "cfg2.json").read_text() == p.read_text()
