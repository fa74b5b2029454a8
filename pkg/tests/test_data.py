import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gestdtr import (
    Dataset,
    ModelSpec,
    StageModel,
    StageRecord,
    Subject,
    SpecificationError,
    build_design,
    validate_dataset,
)
from gestdtr.io import read_dataset, write_dataset


def two_stage_dataset(n=8, seed=0):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=(n, 3))
    a1 = rng.integers(0, 2, size=n).astype(float)
    x2 = rng.normal(size=(n, 3))
    a2 = rng.integers(0, 2, size=n).astype(float)
    y = rng.normal(size=n)
    return Dataset([x1, x2], np.column_stack([a1, a2]), y,
                   [["x11", "x12", "x13"], ["x21", "x22", "x23"]])


def basic_spec():
    return ModelSpec("linear", "binary", [
        StageModel(blip_terms=["x11"], treatment_free_terms=["x11"],
                   treatment_terms=["x11"]),
        StageModel(blip_terms=["x21"],
                   treatment_free_terms=["x11", "x12", "x13", "a1:x11",
                                         "a1:x12", "a1:x13", "x21", "x22",
                                         "x23"],
                   treatment_terms=["x21"]),
    ])


def test_design_assembly_prepends_intercept():
    ds = Dataset(
        [np.array([[1.5], [-2.0]])], np.array([[1.0], [0.0]]),
        np.array([3.0, 4.0]), [["x11"]],
    )
    spec = ModelSpec("linear", "binary",
                     [StageModel(blip_terms=["x11"],
                                 treatment_free_terms=["x11"],
                                 treatment_terms=["x11"])])
    design = build_design(ds, spec, 1)
    np.testing.assert_array_equal(design.h_psi,
                                  [[1.0, 1.5], [1.0, -2.0]])
    assert design.psi_names == ["1", "x11"]


def test_future_covariate_is_specification_error():
    ds = two_stage_dataset()
    spec = ModelSpec("linear", "binary", [
        StageModel(blip_terms=["x21"], treatment_free_terms=["x11"],
                   treatment_terms=["x11"]),
        StageModel(blip_terms=["x21"], treatment_free_terms=["x21"],
                   treatment_terms=["x21"]),
    ])
    with pytest.raises(SpecificationError, match="x21.*stage 1"):
        build_design(ds, spec, 1)


def test_stage2_treatment_free_columns_match_published_layout():
    ds = two_stage_dataset(n=5, seed=3)
    design = build_design(ds, basic_spec(), 2)
    assert design.beta_names == ["1", "x11", "x12", "x13", "a1:x11", "a1:x12",
                                 "a1:x13", "x21", "x22", "x23"]
    assert design.h_beta.shape == (5, 10)
    a1 = ds.treatments[:, 0]
    np.testing.assert_array_equal(design.h_beta[:, 4], a1 * ds.covariates[0][:, 0])


def test_history_includes_prior_treatments_only():
    ds = two_stage_dataset()
    labels1, _ = ds.history_columns(1)
    labels2, _ = ds.history_columns(2)
    assert "a1" not in labels1
    assert "a1" in labels2 and "a2" not in labels2


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_design_is_order_preserving_under_permutation(seed):
    ds = two_stage_dataset(n=10, seed=seed)
    spec = basic_spec()
    rng = np.random.default_rng(seed + 1)
    perm = rng.permutation(10)
    permuted = Dataset([c[perm] for c in ds.covariates], ds.treatments[perm],
                       ds.outcome[perm], ds.covariate_names)
    for stage in (1, 2):
        d1 = build_design(ds, spec, stage)
        d2 = build_design(permuted, spec, stage)
        np.testing.assert_array_equal(d1.h_beta[perm], d2.h_beta)
        np.testing.assert_array_equal(d1.h_psi[perm], d2.h_psi)
        np.testing.assert_array_equal(d1.a[perm], d2.a)


def test_validate_clean_dataset_is_empty():
    report = validate_dataset(two_stage_dataset(), basic_spec())
    assert report.ok and report.violations == []


def test_validate_flags_nonbinary_treatment():
    ds = two_stage_dataset()
    ds.treatments[2, 0] = 0.5
    report = validate_dataset(ds, basic_spec())
    assert len(report.violations) == 1
    assert "non-binary" in report.violations[0]


def test_validate_flags_negative_outcome_for_loglinear():
    ds = two_stage_dataset()
    ds.outcome[4] = -3.0
    spec = basic_spec()
    loglin = ModelSpec("loglinear", "binary", spec.stages)
    report = validate_dataset(ds, loglin)
    assert len(report.violations) == 1
    assert "negative outcome" in report.violations[0]
    assert "4" in report.violations[0]


def test_subject_roundtrip():
    ds = two_stage_dataset(n=4, seed=9)
    rebuilt = Dataset.from_subjects(ds.subjects, ds.covariate_names)
    np.testing.assert_array_equal(rebuilt.outcome, ds.outcome)
    np.testing.assert_array_equal(rebuilt.treatments, ds.treatments)
    record = ds.subjects[0].stages[0]
    assert isinstance(record, StageRecord)
    assert isinstance(ds.subjects[0], Subject)


def test_csv_roundtrip_reproduces_designs_bitwise(tmp_path):
    ds = two_stage_dataset(n=12, seed=11)
    path = tmp_path / "ds.csv"
    write_dataset(ds, path)
    back = read_dataset(path)
    spec = basic_spec()
    for stage in (1, 2):
        d1 = build_design(ds, spec, stage)
        d2 = build_design(back, spec, stage)
        assert np.array_equal(d1.h_psi, d2.h_psi)
        assert np.array_equal(d1.h_beta, d2.h_beta)
        assert np.array_equal(d1.h_alpha, d2.h_alpha)
        assert np.array_equal(d1.a, d2.a)


def test_duplicate_covariate_names_rejected():
    with pytest.raises(SpecificationError, match="unique"):
        Dataset([np.zeros((3, 1)), np.zeros((3, 1))], np.zeros((3, 2)),
                np.zeros(3), [["x"], ["x"]])


@settings(max_examples=50, deadline=None)
@given(st.lists(
    st.floats(allow_nan=False, allow_infinity=False, width=64),
    min_size=2, max_size=6,
))
def test_csv_float_roundtrip_is_bit_exact(values):
    # shortest-repr writing must reproduce doubles exactly, including
    # subnormals, negative zero, and extreme magnitudes
    import tempfile
    from pathlib import Path

    n = len(values)
    ds = Dataset([np.array(values).reshape(-1, 1)],
                 np.zeros((n, 1)), np.array(values), [["v"]])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
    assert np.array_equal(back.covariates[0], ds.covariates[0])
    assert np.array_equal(back.outcome, ds.outcome)
    assert np.array_equal(np.signbit(back.outcome), np.signbit(ds.outcome))
