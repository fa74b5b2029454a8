"""Continuous-dose G-estimation with a quadratic blip.

The blip gains a quadratic dose term, gamma = a h1 p1 + a^2 h2 p2, so the
optimal dose can sit strictly inside the admissible range.  Two residual
diagonals enter the estimating equations: d1 = a - E[A|H] and
d2 = a^2 - E[A^2|H].  The stacked system stays linear in (p1, p2) and solves
in closed form, with a quasi-likelihood of the same quadratic shape as the
binary case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, IdentifiabilityError
from .linear import _Projector
from .nuisance import TreatmentFit

_COND_LIMIT = 1e12


@dataclass
class ContinuousStageFit:
    """Stage fit for a quadratic-in-dose blip."""

    psi1: np.ndarray
    psi2: np.ndarray
    beta: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    m_c: np.ndarray
    M_c: np.ndarray
    residuals: np.ndarray
    Q_at_psi_hat: float
    converged: bool = True

    @property
    def psi(self) -> np.ndarray:
        return np.concatenate([self.psi1, self.psi2])


def stage_fit_continuous(y_tilde, h_psi1, h_psi2, h_beta, a,
                         tfit: TreatmentFit) -> ContinuousStageFit:
    """Closed-form fit of the stacked continuous-dose estimating equations.

    The score stacks d1-weighted linear-blip columns with d2-weighted
    quadratic-blip columns; projecting out the treatment-free design and
    solving m_c = M_c psi gives the estimate.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    a = np.asarray(a, dtype=float)
    n = y_tilde.shape[0]
    if h_psi1.shape[0] != n or h_psi2.shape[0] != n or h_beta.shape[0] != n:
        raise DimensionError("design row counts do not match the outcome")
    if tfit.second_moment is None:
        raise DimensionError("continuous fit requires treatment second moments")

    d1 = a - tfit.fitted
    d2 = a**2 - tfit.second_moment

    proj = _Projector(h_beta, "treatment-free design")
    score = np.hstack([d1[:, None] * h_psi1, d2[:, None] * h_psi2])
    regressors = np.hstack([a[:, None] * h_psi1, (a**2)[:, None] * h_psi2])

    m_c = score.T @ proj.residualize(y_tilde)
    M_c = score.T @ proj.residualize(regressors)
    cond = np.linalg.cond(M_c)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IdentifiabilityError(
            f"continuous blip not identified: cond(M_c) = {cond:.3e}"
        )
    psi = np.linalg.solve(M_c, m_c)
    p1 = h_psi1.shape[1]
    psi1, psi2 = psi[:p1], psi[p1:]

    blip = a * (h_psi1 @ psi1) + a**2 * (h_psi2 @ psi2)
    beta = proj.coef(y_tilde - blip)
    residuals = proj.residualize(y_tilde - blip)
    q = float(psi @ m_c - 0.5 * psi @ M_c @ psi)
    return ContinuousStageFit(
        psi1=psi1, psi2=psi2, beta=beta, d1=d1, d2=d2,
        m_c=m_c, M_c=M_c, residuals=residuals, Q_at_psi_hat=q,
    )


def optimal_dose(psi1, psi2, h_psi1_row, h_psi2_row, dose_range) -> float:
    """Dose maximizing a*(h1 p1) + a^2*(h2 p2) over the closed range.

    Concave case takes the clamped vertex; otherwise the better endpoint.
    Ties break toward the lower endpoint (conservative dosing).
    """
    lo, hi = dose_range
    b = float(np.dot(h_psi1_row, psi1))
    c = float(np.dot(h_psi2_row, psi2))

    def value(x):
        return b * x + c * x * x

    if c < 0:
        vertex = -b / (2.0 * c)
        return float(min(max(vertex, lo), hi))
    return float(hi) if value(hi) > value(lo) else float(lo)


def quasi_likelihood_continuous(fit: ContinuousStageFit) -> float:
    """Q(psi) = psi'm_c - psi'M_c psi / 2 at the fitted blip parameters."""
    psi = fit.psi
    return float(psi @ fit.m_c - 0.5 * psi @ fit.M_c @ psi)
