"""Sandwich inference and the quasi-likelihood information criterion.

Per-subject scores of the stage estimating function give the empirical
outer-product matrix J; the negative Jacobian of the total score in the blip
parameters gives I.  Working with unnormalized totals, the sandwich
V = I^{-1} J I^{-T} estimates Var(psi_hat) directly and the trace penalty
K = tr(J I^{-1}) is free of sample-size normalization; the information
criterion is QIC = -2 Q(psi_hat) + 2 K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .continuous import ContinuousStageFit, quasi_likelihood_continuous
from .data import DesignMatrices
from .exceptions import DomainError, SingularityError, StateError
from .linear import LinearStageFit
from .loglinear import LoglinearStageFit, quasi_likelihood_loglinear


@dataclass
class StageInference:
    """Variance and model-selection summaries for one stage fit."""

    I_hat: np.ndarray
    J_hat: np.ndarray
    V_hat: np.ndarray
    K: float
    Q: float
    qic: float
    wald_p: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.V_hat))


def score_matrix(fit, design: DesignMatrices) -> np.ndarray:
    """Per-subject contributions to the stage estimating function.

    Rows sum to the total score, which vanishes at the fitted parameters.
    Linear scale: u_i = d_i e_i h_psi_i with e the treatment-free-projected
    residual.  Log-linear scale: u_i = d_i (y_tilde_i - mu_i)/mu_i h_psi_i,
    the relative-residual form the solver drives to zero.  Continuous doses
    stack the two residual-weighted blip blocks.
    """
    if isinstance(fit, LinearStageFit):
        return (fit.d * fit.residuals)[:, None] * design.h_psi
    if isinstance(fit, LoglinearStageFit):
        if not fit.converged:
            raise StateError("scores requested for a non-converged fit")
        rel = (fit.y_tilde - fit.mu) / fit.mu
        return (fit.d * rel)[:, None] * design.h_psi
    if isinstance(fit, ContinuousStageFit):
        score = np.hstack(
            [fit.d1[:, None] * design.h_psi, fit.d2[:, None] * design.h_psi_quad]
        )
        return score * fit.residuals[:, None]
    raise TypeError(f"unsupported fit type {type(fit).__name__}")


def info_matrices(fit, design: DesignMatrices):
    """(I_hat, J_hat): negative score Jacobian and score outer-product, totals.

    The log-linear Jacobian holds the treatment-free coefficients fixed at
    their fitted values; the blip equation is first-order insensitive to them.
    """
    u = score_matrix(fit, design)
    j_hat = u.T @ u
    if isinstance(fit, LinearStageFit):
        i_hat = fit.M
    elif isinstance(fit, LoglinearStageFit):
        weights = fit.d * design.a * (fit.y_tilde / fit.mu)
        i_hat = (design.h_psi * weights[:, None]).T @ design.h_psi
    else:
        i_hat = fit.M_c
    return i_hat, j_hat


def sandwich_variance(i_hat: np.ndarray, j_hat: np.ndarray) -> np.ndarray:
    """V = I^{-1} J I^{-T} on total matrices, symmetrized."""
    try:
        i_inv = np.linalg.inv(i_hat)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("singular information matrix") from exc
    v = i_inv @ j_hat @ i_inv.T
    return 0.5 * (v + v.T)


def trace_term(i_hat: np.ndarray, j_hat: np.ndarray) -> float:
    """Penalty K = tr(J I^{-1}); near the model dimension when well specified."""
    try:
        return float(np.trace(np.linalg.solve(i_hat, j_hat)))
    except np.linalg.LinAlgError as exc:
        raise SingularityError("singular information matrix") from exc


def qic(q: float, k: float) -> float:
    """Quasi-likelihood information criterion: -2 Q + 2 K."""
    return -2.0 * q + 2.0 * k


def wald_pvalues(psi: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
    """Two-sided normal p-values from the sandwich variance diagonal."""
    var = np.diag(v_hat)
    if (var <= 0).any():
        raise DomainError("nonpositive variance in Wald test")
    z = np.asarray(psi, dtype=float) / np.sqrt(var)
    return 2.0 * norm.sf(np.abs(z))


def stage_inference(fit, design: DesignMatrices) -> StageInference:
    """Assemble the full inference summary for a completed stage fit."""
    i_hat, j_hat = info_matrices(fit, design)
    v_hat = sandwich_variance(i_hat, j_hat)
    k = trace_term(i_hat, j_hat)
    if isinstance(fit, LoglinearStageFit):
        q = quasi_likelihood_loglinear(fit)
        psi = fit.psi
    elif isinstance(fit, ContinuousStageFit):
        q = quasi_likelihood_continuous(fit)
        psi = fit.psi
    else:
        q = fit.Q_at_psi_hat
        psi = fit.psi
    return StageInference(
        I_hat=i_hat,
        J_hat=j_hat,
        V_hat=v_hat,
        K=k,
        Q=q,
        qic=qic(q, k),
        wald_p=wald_pvalues(psi, v_hat),
    )
