"""Multiplicative-scale G-estimation via iteratively reweighted least squares.

The stage estimating system pairs the blip equation

    0 = sum_i d_i h_psi_i (y_tilde_i - mu_i) / mu_i

with the treatment-free equation 0 = sum_i h_beta_i (y_tilde_i - mu_i), where
mu_i = exp(h_beta_i b + a_i h_psi_i p).  The 1/mu_i factor is what makes the
blip equation a residual of the treatment-free transform y_tilde *
exp(-a h_psi p): its conditional mean given history is free of treatment, so
consistency needs only one of the treatment and treatment-free models to be
right.  Dropping that factor ties consistency to the treatment-free model
alone and is visibly biased under misspecification.

Each IRLS sweep linearizes mu around the current linear predictor (log link),
giving working response z = eta + (y_tilde - mu)/mu and weight w = mu.  The
treatment-free coefficients are profiled out by a w-weighted projection and a
small d-weighted solve updates the blip; both exact equations above hold at
the fixed point.  Step-halving averages each update with the previous
iterate; termination watches only the linear predictor.  After the predictor
settles, a short undamped polish drives the exact estimating equations to the
fixed-point tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DesignMatrices
from .exceptions import (
    DimensionError,
    DivergenceError,
    DomainError,
    SingularityError,
    StateError,
)
from .linear import _Projector

_ETA_MAX = 700.0  # exp overflows double precision just above this
_EE_TOL = 1e-6
_POLISH_MAX = 50


@dataclass
class IrlsOptions:
    """Solver controls.

    eps_eta is the sup-norm tolerance on successive linear predictors (the
    only termination test); damping averages each raw update with the previous
    iterate; zero_replacement substitutes for zero outcomes when forming
    multiplicative pseudo-outcomes.
    """

    eps_eta: float = 0.001
    max_iter: int = 1000
    damping: bool = True
    zero_replacement: float = 0.001

    def __post_init__(self):
        if self.eps_eta <= 0:
            raise ValueError("eps_eta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.zero_replacement <= 0:
            raise ValueError("zero_replacement must be positive")


@dataclass
class LoglinearStageFit:
    """Converged (or failed) IRLS stage fit.

    ee_residual and ee_residual_beta are raw sup-norms of the blip and
    treatment-free estimating equations at the returned parameters;
    ee_scale and ee_scale_beta are the corresponding normalizers
    (1 + sup-norm of the data term) used by the fixed-point contract.
    """

    psi: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    z: np.ndarray
    w: np.ndarray
    d: np.ndarray
    y_tilde: np.ndarray
    converged: bool
    iterations: int
    ee_residual: float
    ee_residual_beta: float
    ee_scale: float
    ee_scale_beta: float
    m_tilde: np.ndarray = field(default=None)
    M_tilde: np.ndarray = field(default=None)
    Q_at_psi_hat: float = float("nan")


def pseudo_outcome_loglinear(y: np.ndarray, later_stage_blip_ratios,
                             zero_replacement: float = 0.001) -> np.ndarray:
    """Multiplicative stage-j pseudo-outcome.

    y is scaled by the product over later stages of the optimal-to-observed
    blip ratio.  Zero outcomes would stay zero under any scaling, so when
    there is at least one later stage they are first replaced by
    ``zero_replacement`` (the expectation of a near-degenerate count).  At the
    final stage the product is empty and y is returned unchanged.
    """
    y = np.asarray(y, dtype=float)
    if (y < 0).any():
        raise DomainError("multiplicative pseudo-outcomes require y >= 0")
    ratios = list(later_stage_blip_ratios)
    if not ratios:
        return y.copy()
    y_tilde = np.where(y == 0.0, zero_replacement, y)
    for r in ratios:
        r = np.asarray(r, dtype=float)
        if r.shape != y_tilde.shape:
            raise DimensionError("blip ratio length does not match the outcome")
        if (r <= 0).any():
            raise DomainError("blip ratios must be strictly positive")
        y_tilde = y_tilde * r
    return y_tilde


def _ee_norms(y_tilde, h_psi, h_beta, d, mu):
    resid = y_tilde - mu
    ee_psi = float(np.max(np.abs(h_psi.T @ (d * resid / mu))))
    ee_beta = float(np.max(np.abs(h_beta.T @ resid)))
    return ee_psi, ee_beta


def irls_stage_fit(y_tilde: np.ndarray, design: DesignMatrices, d: np.ndarray,
                   opts: IrlsOptions | None = None) -> LoglinearStageFit:
    """Fit one stage of the multiplicative model by damped IRLS.

    Returns a fit whose ``converged`` flag reports whether the linear
    predictor settled within eps_eta *and* the exact estimating equations were
    driven to the fixed-point tolerance; callers decide how to treat failures
    (the replication harness counts them rather than aborting).  Raises
    DivergenceError if the linear predictor overflows the exp range.
    """
    opts = opts or IrlsOptions()
    y_tilde = np.asarray(y_tilde, dtype=float)
    d = np.asarray(d, dtype=float)
    h_psi, h_beta, a = design.h_psi, design.h_beta, design.a
    n = y_tilde.shape[0]
    if d.shape[0] != n or h_psi.shape[0] != n:
        raise DimensionError("y_tilde/d do not match the design row count")
    if (y_tilde < 0).any():
        raise DomainError("loglinear outcomes must be nonnegative")

    ee_scale = 1.0 + float(np.max(np.abs(h_psi.T @ (d * y_tilde))))
    ee_scale_beta = 1.0 + float(np.max(np.abs(h_beta.T @ y_tilde)))

    def predictor(psi, beta):
        eta = h_beta @ beta + a * (h_psi @ psi)
        if np.max(np.abs(eta)) > _ETA_MAX:
            raise DivergenceError("linear predictor left the exp range")
        return eta

    def raw_update(psi, beta, eta):
        mu = np.exp(eta)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            z = eta + (y_tilde - mu) / mu
        if not np.isfinite(z).all():
            raise DivergenceError("working response overflowed (mean underflow)")
        w = mu
        proj = _Projector(h_beta, "weighted treatment-free design", weights=w)
        dh = d[:, None] * h_psi
        m_t = dh.T @ proj.residualize(z)
        M_t = dh.T @ proj.residualize(a[:, None] * h_psi)
        if not (np.isfinite(m_t).all() and np.isfinite(M_t).all()):
            raise DivergenceError("linearized system overflowed")
        try:
            psi_new = np.linalg.solve(M_t, m_t)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("singular weighted normal equations") from exc
        beta_new = proj.coef(z - a * (h_psi @ psi_new))
        return psi_new, beta_new, mu, z, w, m_t, M_t

    # start from a crude log-scale regression with a null blip
    beta = np.linalg.lstsq(h_beta, np.log(y_tilde + 0.5), rcond=None)[0]
    psi = np.zeros(h_psi.shape[1])
    eta = predictor(psi, beta)

    eta_converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        psi_raw, beta_raw, *_ = raw_update(psi, beta, eta)
        if opts.damping:
            psi_next = 0.5 * (psi_raw + psi)
            beta_next = 0.5 * (beta_raw + beta)
        else:
            psi_next, beta_next = psi_raw, beta_raw
        eta_next = predictor(psi_next, beta_next)
        step = float(np.max(np.abs(eta_next - eta)))
        psi, beta, eta = psi_next, beta_next, eta_next
        if step < opts.eps_eta:
            eta_converged = True
            break

    # polish: undamped Newton steps until the exact equations hold
    mu = np.exp(eta)
    ee_psi, ee_beta = _ee_norms(y_tilde, h_psi, h_beta, d, mu)
    if eta_converged:
        for _ in range(_POLISH_MAX):
            if ee_psi <= _EE_TOL * ee_scale and ee_beta <= _EE_TOL * ee_scale_beta:
                break
            try:
                psi_raw, beta_raw, *_ = raw_update(psi, beta, eta)
            except DivergenceError:
                break
            accepted = False
            frac = 1.0
            for _ in range(10):
                psi_try = psi + frac * (psi_raw - psi)
                beta_try = beta + frac * (beta_raw - beta)
                try:
                    eta_try = predictor(psi_try, beta_try)
                except DivergenceError:
                    frac *= 0.5
                    continue
                mu_try = np.exp(eta_try)
                ee_psi_try, ee_beta_try = _ee_norms(y_tilde, h_psi, h_beta, d, mu_try)
                if max(ee_psi_try / ee_scale, ee_beta_try / ee_scale_beta) < max(
                    ee_psi / ee_scale, ee_beta / ee_scale_beta
                ):
                    psi, beta, eta, mu = psi_try, beta_try, eta_try, mu_try
                    ee_psi, ee_beta = ee_psi_try, ee_beta_try
                    accepted = True
                    break
                frac *= 0.5
            if not accepted:
                break

    converged = (
        eta_converged
        and ee_psi <= _EE_TOL * ee_scale
        and ee_beta <= _EE_TOL * ee_scale_beta
    )

    # final working quantities and the quadratic quasi-likelihood pieces,
    # evaluated at the returned parameters; a converged fit always recomputes
    # cleanly, a wildly divergent iterate gets NaN diagnostics instead
    try:
        _, _, mu, z, w, m_t, M_t = raw_update(psi, beta, eta)
        q = float(psi @ m_t - 0.5 * psi @ M_t @ psi)
    except DivergenceError:
        mu = np.exp(eta)
        w = mu
        z = np.full(n, np.nan)
        m_t = np.full(h_psi.shape[1], np.nan)
        M_t = np.full((h_psi.shape[1], h_psi.shape[1]), np.nan)
        q = float("nan")
    return LoglinearStageFit(
        psi=psi,
        beta=beta,
        eta=eta,
        mu=mu,
        z=z,
        w=w,
        d=d,
        y_tilde=y_tilde,
        converged=converged,
        iterations=it,
        ee_residual=ee_psi,
        ee_residual_beta=ee_beta,
        ee_scale=ee_scale,
        ee_scale_beta=ee_scale_beta,
        m_tilde=m_t,
        M_tilde=M_t,
        Q_at_psi_hat=q,
    )


def quasi_likelihood_loglinear(fit: LoglinearStageFit) -> float:
    """Quadratic-approximation quasi-likelihood at the converged blip estimate.

    Built from the final working response and weights: Q = psi'm - psi'M psi/2
    with m and M the weighted, treatment-free-projected moments of the last
    IRLS linearization.
    """
    if not fit.converged:
        raise StateError("quasi-likelihood requested for a non-converged fit")
    return float(fit.psi @ fit.m_tilde - 0.5 * fit.psi @ fit.M_tilde @ fit.psi)
