"""Treatment (propensity) models and the residuals that weight G-estimation.

Binary treatments are fit by Newton-scored logistic regression; continuous
treatments by ordinary least squares with a homoscedastic variance estimate so
that both first and second conditional moments of the dose are available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve, LinAlgError

from .exceptions import DimensionError, SeparationError, SingularityError

_BOUNDARY = 1e-10
_NORM_CAP = 1e4


def expit(x: np.ndarray) -> np.ndarray:
    """Inverse logit, computed without overflow for large |x|."""
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TreatmentFit:
    """Fitted stage treatment model.

    ``fitted`` holds E[A | h_alpha]; for continuous treatments
    ``second_moment`` additionally holds E[A^2 | h_alpha].
    """

    alpha: np.ndarray
    fitted: np.ndarray
    second_moment: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0


def _check_rank(h: np.ndarray, what: str) -> None:
    if h.shape[1] == 0:
        raise SingularityError(f"{what} has no columns")
    if np.linalg.matrix_rank(h) < h.shape[1]:
        raise SingularityError(f"{what} is rank deficient")


def fit_logistic(h_alpha: np.ndarray, a: np.ndarray, tol: float = 1e-8,
                 max_iter: int = 100) -> TreatmentFit:
    """Logistic regression of a binary treatment on h_alpha by Newton scoring.

    Stops when max |delta alpha| < tol.  Raises SeparationError when fitted
    probabilities pin to the boundary while the iteration fails to settle
    (degenerate likelihood), SingularityError on rank-deficient designs.
    """
    h_alpha = np.asarray(h_alpha, dtype=float)
    a = np.asarray(a, dtype=float)
    if h_alpha.shape[0] != a.shape[0]:
        raise DimensionError("h_alpha and a have different lengths")
    if not np.isin(a, (0.0, 1.0)).all():
        raise DimensionError("treatments must be 0/1 for a logistic fit")
    _check_rank(h_alpha, "treatment design")

    alpha = np.zeros(h_alpha.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(h_alpha @ alpha)
        at_boundary = (p < _BOUNDARY).any() or (p > 1.0 - _BOUNDARY).any()
        if at_boundary and np.linalg.norm(alpha) > _NORM_CAP:
            raise SeparationError("fitted probabilities at boundary, ||alpha|| diverging")
        w = p * (1.0 - p)
        grad = h_alpha.T @ (a - p)
        hess = (h_alpha * w[:, None]).T @ h_alpha
        try:
            step = solve(hess, grad, assume_a="pos")
        except (LinAlgError, np.linalg.LinAlgError) as exc:
            if at_boundary:
                raise SeparationError(
                    "singular information with boundary probabilities"
                ) from exc
            raise SingularityError("singular logistic information matrix") from exc
        alpha = alpha + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break

    p = expit(h_alpha @ alpha)
    if not converged and ((p < _BOUNDARY).any() or (p > 1.0 - _BOUNDARY).any()):
        raise SeparationError(
            "logistic fit did not converge and probabilities reached the boundary"
        )
    return TreatmentFit(alpha=alpha, fitted=p, converged=converged, iterations=it)


def treatment_residuals(fit: TreatmentFit, a: np.ndarray) -> np.ndarray:
    """Residual d_i = a_i - E[A_i | h_alpha], the G-estimation weight."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] != fit.fitted.shape[0]:
        raise DimensionError("treatment vector does not match the fit")
    return a - fit.fitted


def fit_continuous_treatment(h_alpha: np.ndarray, a: np.ndarray) -> TreatmentFit:
    """OLS dose model with homoscedastic second moment.

    E[A|H] is the least-squares fit; E[A^2|H] = fitted^2 + residual variance
    (denominator n - p, floored at 0 for saturated fits).
    """
    h_alpha = np.asarray(h_alpha, dtype=float)
    a = np.asarray(a, dtype=float)
    if h_alpha.shape[0] != a.shape[0]:
        raise DimensionError("h_alpha and a have different lengths")
    _check_rank(h_alpha, "treatment design")

    coef, _, _, _ = np.linalg.lstsq(h_alpha, a, rcond=None)
    fitted = h_alpha @ coef
    resid = a - fitted
    dof = max(h_alpha.shape[0] - h_alpha.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    return TreatmentFit(
        alpha=coef,
        fitted=fitted,
        second_moment=fitted**2 + sigma2,
        converged=True,
        iterations=1,
    )
