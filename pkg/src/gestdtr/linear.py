"""Additive-scale G-estimation for a single stage.

With the treatment-free model profiled out by least squares, the stage
estimating function reduces to h_psi' W (y_tilde - A h_psi psi) with
W = D' (I - H_beta), where D is the diagonal of treatment residuals and
H_beta the treatment-free hat matrix.  The blip estimate is the closed-form
root, and the quasi-likelihood Q(psi) = psi'm - psi'M psi / 2 is exact on this
scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import DesignMatrices
from .exceptions import DimensionError, IdentifiabilityError, SingularityError

_COND_LIMIT = 1e12


def pseudo_outcome_linear(y: np.ndarray, later_stage_blips) -> np.ndarray:
    """Stage-j pseudo-outcome: y plus the regret of each later stage.

    ``later_stage_blips`` is a sequence of (gamma_opt, gamma_obs) pairs, one
    per stage k > j, each an (n,) array of blip values at the estimated
    optimal and the observed treatment.  Empty sequence returns y unchanged.
    """
    y_tilde = np.asarray(y, dtype=float).copy()
    for gamma_opt, gamma_obs in later_stage_blips:
        gamma_opt = np.asarray(gamma_opt, dtype=float)
        gamma_obs = np.asarray(gamma_obs, dtype=float)
        if gamma_opt.shape != y_tilde.shape or gamma_obs.shape != y_tilde.shape:
            raise DimensionError("blip vectors do not match the outcome length")
        y_tilde += gamma_opt - gamma_obs
    return y_tilde


class _Projector:
    """Action of the (optionally weighted) hat matrix of a design, via QR."""

    def __init__(self, h: np.ndarray, what: str, weights: np.ndarray | None = None):
        self._h = h
        self._sqrt_w = None if weights is None else np.sqrt(weights)
        hw = h if weights is None else h * self._sqrt_w[:, None]
        q, r, piv = scipy.linalg.qr(hw, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag[0] == 0 or diag[-1] / diag[0] < 1.0 / _COND_LIMIT:
            raise SingularityError(f"{what} is rank deficient")
        self._q = q
        self._r = r
        self._piv = piv

    def residualize(self, v: np.ndarray) -> np.ndarray:
        """(I - H) v, column-wise for matrices."""
        if self._sqrt_w is None:
            return v - self._q @ (self._q.T @ v)
        return v - self._h @ self.coef(v)

    def coef(self, v: np.ndarray) -> np.ndarray:
        """(Weighted) least-squares coefficients of v on the design."""
        if self._sqrt_w is None:
            vw = v
        else:
            vw = v * (self._sqrt_w[:, None] if v.ndim == 2 else self._sqrt_w)
        z = scipy.linalg.solve_triangular(self._r, self._q.T @ vw)
        out = np.empty_like(z)
        out[self._piv] = z
        return out


@dataclass
class LinearStageFit:
    """Closed-form stage fit on the additive scale."""

    psi: np.ndarray
    beta: np.ndarray
    m: np.ndarray
    M: np.ndarray
    residuals: np.ndarray
    d: np.ndarray
    Q_at_psi_hat: float
    converged: bool = True


def stage_fit_linear(y_tilde: np.ndarray, design: DesignMatrices,
                     d: np.ndarray) -> LinearStageFit:
    """Solve the reduced stage estimating equation in closed form.

    psi_hat = M^{-1} m with m = h_psi' W y_tilde and M = h_psi' W A h_psi;
    beta_hat is the least-squares coefficient of the blip-adjusted outcome on
    the treatment-free design.  Raises IdentifiabilityError when M is
    numerically singular (condition number beyond 1e12), e.g. when treatment
    is perfectly predicted so every d_i = 0.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    d = np.asarray(d, dtype=float)
    h_psi, h_beta, a = design.h_psi, design.h_beta, design.a
    if y_tilde.shape[0] != h_psi.shape[0] or d.shape[0] != h_psi.shape[0]:
        raise DimensionError("y_tilde/d do not match the design row count")

    proj = _Projector(h_beta, "treatment-free design")
    _ = _Projector(h_psi, "blip design")  # rank check only

    dh = d[:, None] * h_psi
    m = dh.T @ proj.residualize(y_tilde)
    M = dh.T @ proj.residualize(a[:, None] * h_psi)

    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IdentifiabilityError(
            f"blip parameters not identified: cond(M) = {cond:.3e}"
        )
    psi = np.linalg.solve(M, m)
    beta = proj.coef(y_tilde - a * (h_psi @ psi))
    residuals = proj.residualize(y_tilde - a * (h_psi @ psi))
    q = float(psi @ m - 0.5 * psi @ M @ psi)
    return LinearStageFit(
        psi=psi, beta=beta, m=m, M=M, residuals=residuals, d=d, Q_at_psi_hat=q
    )


def quasi_likelihood_linear(psi: np.ndarray, m: np.ndarray, M: np.ndarray) -> float:
    """Q(psi) = psi'm - psi'M psi / 2, maximal at the fitted psi."""
    psi = np.asarray(psi, dtype=float)
    return float(psi @ m - 0.5 * psi @ (M @ psi))
