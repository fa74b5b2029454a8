import numpy as np
import pytest

from gestdtr import (
    DomainError,
    expit,
    fit_logistic,
    info_matrices,
    irls_stage_fit,
    qic,
    sandwich_variance,
    score_matrix,
    stage_fit_linear,
    stage_inference,
    trace_term,
    treatment_residuals,
    wald_pvalues,
)
from gestdtr.data import DesignMatrices


def linear_instance(n, seed, p_psi=2):
    rng = np.random.default_rng(seed)
    h_psi = np.column_stack([np.ones(n), rng.normal(size=(n, p_psi - 1))])
    h_beta = np.column_stack([np.ones(n), rng.normal(size=n)])
    a = (rng.random(n) < 0.5).astype(float)
    y = h_beta @ [0.3, 0.6] + a * (h_psi @ np.r_[1.0, np.full(p_psi - 1, -0.4)]) \
        + rng.normal(size=n)
    design = DesignMatrices(stage=1, h_psi=h_psi, h_beta=h_beta,
                            h_alpha=h_beta, a=a,
                            psi_names=[f"p{i}" for i in range(p_psi)],
                            beta_names=["1", "x"], alpha_names=["1", "x"])
    d = treatment_residuals(fit_logistic(design.h_alpha, a), a)
    fit = stage_fit_linear(y, design, d)
    return fit, design, y, d


def loglinear_instance(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    h_psi = np.column_stack([np.ones(n), x])
    h_beta = np.column_stack([np.ones(n), x])
    a = (rng.random(n) < expit(x)).astype(float)
    lam = np.exp(0.4 + 0.3 * x + a * (0.5 - 0.5 * x))
    y = rng.poisson(lam).astype(float)
    design = DesignMatrices(stage=1, h_psi=h_psi, h_beta=h_beta,
                            h_alpha=h_beta, a=a, psi_names=["1", "x"],
                            beta_names=["1", "x"], alpha_names=["1", "x"])
    d = treatment_residuals(fit_logistic(design.h_alpha, a), a)
    fit = irls_stage_fit(y, design, d)
    assert fit.converged
    return fit, design, y, d


def test_score_column_sums_vanish_linear():
    fit, design, _, _ = linear_instance(80, 0)
    u = score_matrix(fit, design)
    np.testing.assert_allclose(u.sum(axis=0), 0.0, atol=1e-8)


def test_score_column_sums_vanish_loglinear():
    fit, design, y, d = loglinear_instance(120, 1)
    u = score_matrix(fit, design)
    scale = 1 + np.max(np.abs(design.h_psi.T @ (d * y)))
    np.testing.assert_allclose(u.sum(axis=0), 0.0, atol=1e-6 * scale)


def test_zero_residual_gives_zero_score_row():
    fit, design, _, _ = linear_instance(30, 2)
    fit.d[5] = 0.0
    u = score_matrix(fit, design)
    np.testing.assert_array_equal(u[5], 0.0)


def test_total_score_matches_direct_matrix_evaluation():
    fit, design, y, d = linear_instance(6, 3)
    u = score_matrix(fit, design)
    h_beta = design.h_beta
    hat = h_beta @ np.linalg.solve(h_beta.T @ h_beta, h_beta.T)
    w = np.diag(d) @ (np.eye(6) - hat)
    direct = design.h_psi.T @ w @ (y - design.a * (design.h_psi @ fit.psi))
    np.testing.assert_allclose(u.sum(axis=0), direct, atol=1e-10)


def test_linear_information_equals_stage_M():
    fit, design, _, _ = linear_instance(50, 4)
    i_hat, _ = info_matrices(fit, design)
    np.testing.assert_array_equal(i_hat, fit.M)


def test_duplicated_subjects_scale_J_exactly():
    fit, design, y, d = linear_instance(40, 5)
    _, j1 = info_matrices(fit, design)
    k = 3
    rep_design = DesignMatrices(
        stage=1, h_psi=np.repeat(design.h_psi, k, axis=0),
        h_beta=np.repeat(design.h_beta, k, axis=0),
        h_alpha=np.repeat(design.h_alpha, k, axis=0),
        a=np.repeat(design.a, k), psi_names=design.psi_names,
        beta_names=design.beta_names, alpha_names=design.alpha_names,
    )
    rep_fit = stage_fit_linear(np.repeat(y, k), rep_design, np.repeat(d, k))
    _, jk = info_matrices(rep_fit, rep_design)
    np.testing.assert_allclose(jk, k * j1, rtol=1e-9)


def test_loglinear_information_matches_finite_differences():
    fit, design, y, d = loglinear_instance(6, 6)
    i_hat, _ = info_matrices(fit, design)

    def total_score(psi):
        mu = np.exp(design.h_beta @ fit.beta + design.a * (design.h_psi @ psi))
        return design.h_psi.T @ (d * (y - mu) / mu)

    step = 1e-5
    fd = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        fd[:, k] = (total_score(fit.psi - e) - total_score(fit.psi + e)) / (2 * step)
    np.testing.assert_allclose(i_hat, fd, rtol=1e-4)


def test_sandwich_identity_example():
    i_hat = 2.0 * np.eye(3)
    j_hat = np.eye(3)
    np.testing.assert_allclose(sandwich_variance(i_hat, j_hat), 0.25 * np.eye(3))


def test_sandwich_is_symmetric_psd():
    fit, design, _, _ = linear_instance(70, 7, p_psi=3)
    i_hat, j_hat = info_matrices(fit, design)
    v = sandwich_variance(i_hat, j_hat)
    np.testing.assert_array_equal(v, v.T)
    assert np.all(np.linalg.eigvalsh(v) >= -1e-12)
    assert np.all(np.diag(v) >= 0)


def test_trace_equals_dimension_when_J_equals_I():
    fit, design, _, _ = linear_instance(60, 8, p_psi=3)
    i_hat, _ = info_matrices(fit, design)
    assert trace_term(i_hat, i_hat) == pytest.approx(3.0)


def test_trace_invariant_to_blip_reparameterization():
    rng = np.random.default_rng(9)
    for seed in range(5):
        fit, design, y, d = linear_instance(50, 100 + seed, p_psi=3)
        i_hat, j_hat = info_matrices(fit, design)
        k1 = trace_term(i_hat, j_hat)
        t = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        design2 = DesignMatrices(
            stage=1, h_psi=design.h_psi @ t, h_beta=design.h_beta,
            h_alpha=design.h_alpha, a=design.a,
            psi_names=design.psi_names, beta_names=design.beta_names,
            alpha_names=design.alpha_names,
        )
        fit2 = stage_fit_linear(y, design2, d)
        k2 = trace_term(*info_matrices(fit2, design2))
        np.testing.assert_allclose(k1, k2, atol=1e-8 * (1 + abs(k1)))


def test_qic_values_and_composition():
    assert qic(-10.0, 3.0) == 26.0
    assert qic(0.0, 0.0) == 0.0
    fit, design, _, _ = linear_instance(6, 3)
    inf = stage_inference(fit, design)
    i_hat, j_hat = info_matrices(fit, design)
    np.testing.assert_allclose(
        inf.qic, -2 * fit.Q_at_psi_hat + 2 * trace_term(i_hat, j_hat))


def test_wald_pvalue_examples():
    v = np.eye(2)
    p = wald_pvalues(np.array([0.0, 1.959964]), v)
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.05, abs=1e-6)
    with pytest.raises(DomainError):
        wald_pvalues(np.array([1.0]), np.array([[0.0]]))


def test_wald_size_calibration_under_null():
    rng = np.random.default_rng(123)
    n, reps = 500, 1000
    rejections = 0
    for r in range(reps):
        x = rng.normal(size=n)
        h_psi = np.column_stack([np.ones(n), x])
        h_beta = np.column_stack([np.ones(n), x])
        a = (rng.random(n) < expit(x)).astype(float)
        y = 0.5 * x + rng.normal(size=n)  # null treatment effect
        design = DesignMatrices(stage=1, h_psi=h_psi, h_beta=h_beta,
                                h_alpha=h_beta, a=a, psi_names=["1", "x"],
                                beta_names=["1", "x"], alpha_names=["1", "x"])
        d = treatment_residuals(fit_logistic(design.h_alpha, a), a)
        fit = stage_fit_linear(y, design, d)
        inf = stage_inference(fit, design)
        rejections += inf.wald_p[1] < 0.05
    assert 0.03 <= rejections / reps <= 0.07


def test_trace_inflates_when_both_nuisance_models_are_wrong():
    # correct blip, badly wrong treatment and treatment-free models:
    # the penalty should run above the blip dimension (directional check)
    rng = np.random.default_rng(321)
    n, reps = 100, 200
    ks_good, ks_bad = [], []
    for r in range(reps):
        x = rng.normal(size=n)
        a = (rng.random(n) < expit(1.5 * x)).astype(float)
        y = np.exp(x) + a * (1.0 - 0.5 * x) + rng.normal(size=n)
        h_psi = np.column_stack([np.ones(n), x])
        for flavor, store in (("good", ks_good), ("bad", ks_bad)):
            if flavor == "good":
                h_alpha = np.column_stack([np.ones(n), x])
                h_beta = np.column_stack([np.ones(n), x, np.exp(x)])
            else:
                h_alpha = np.ones((n, 1))  # ignores confounding
                h_beta = np.ones((n, 1))
            design = DesignMatrices(
                stage=1, h_psi=h_psi, h_beta=h_beta, h_alpha=h_alpha, a=a,
                psi_names=["1", "x"],
                beta_names=[str(i) for i in range(h_beta.shape[1])],
                alpha_names=[str(i) for i in range(h_alpha.shape[1])],
            )
            d = treatment_residuals(fit_logistic(design.h_alpha, a), a)
            fit = stage_fit_linear(y, design, d)
            i_hat, j_hat = info_matrices(fit, design)
            store.append(trace_term(i_hat, j_hat))
    assert np.mean(ks_bad) > np.mean(ks_good)
    assert np.mean(ks_bad) > 2.5  # clearly above the blip dimension


def test_qic_ordering_invariant_to_subject_permutation():
    fit, design, y, d = linear_instance(60, 11, p_psi=3)
    inf = stage_inference(fit, design)
    rng = np.random.default_rng(12)
    perm = rng.permutation(60)
    design_p = DesignMatrices(
        stage=1, h_psi=design.h_psi[perm], h_beta=design.h_beta[perm],
        h_alpha=design.h_alpha[perm], a=design.a[perm],
        psi_names=design.psi_names, beta_names=design.beta_names,
        alpha_names=design.alpha_names,
    )
    fit_p = stage_fit_linear(y[perm], design_p, d[perm])
    inf_p = stage_inference(fit_p, design_p)
    np.testing.assert_allclose(inf.qic, inf_p.qic, rtol=1e-9)
