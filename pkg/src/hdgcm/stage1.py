"""Stage one: unpenalized EM for the factor-parameterized model.

Alternates an exact E-step (posterior moments of the latent intercept/slope
vector) with closed-form M-step updates:

* (Q, delta): inner alternation between the eigendecomposition solution for
  Q given delta and the diagonal update delta = diag(Psi_bar - Q Q'), with a
  free monotonicity safeguard on the profile objective
      g(Q, delta) = -1/2 log|G| - 1/2 tr(G^{-1} Psi_bar).
* B: generalized least squares of the posterior-adjusted responses on the
  expanded design (the noise weighting cancels row-wise).
* sigma: per-outcome expected residual second moments.

Convergence is declared when the relative change of each of Q, delta, B and
sigma falls below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .design import StackedData
from .errors import ConstraintError, NumericalError
from .kernels import EStats, estep_batch, loglik_stacked, posterior_zeta
from .model import (
    FactorCovariance,
    FixedEffects,
    LongitudinalDataset,
    ModelParams,
    PosteriorMoments,
)

_DELTA_FLOOR = 1e-8
_SIGMA_FLOOR = 1e-8

__all__ = [
    "Stage1Config",
    "Stage1Result",
    "estep1",
    "update_Q_delta",
    "update_B_dense",
    "update_sigma_dense",
    "expected_rss",
    "fit_stage1",
]


@dataclass
class Stage1Config:
    K: int
    tol: float = 1e-3
    max_outer: int = 500
    max_inner: int = 100
    n_threads: int = 1
    init: Optional[ModelParams] = None

    def __post_init__(self):
        if self.K < 1:
            raise ConstraintError(f"K must be >= 1, got {self.K}")
        if self.tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise ConstraintError("tol must be > 0 and iteration caps >= 1")


@dataclass
class Stage1Result:
    params: ModelParams
    converged: bool
    n_iter: int
    loglik: float
    trace: List[float] = field(default_factory=list)


# =========================================================================
# helpers
# =========================================================================

def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    num = float(np.linalg.norm(new - old))
    den = float(np.linalg.norm(old))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


def _fix_column_signs(U: np.ndarray) -> np.ndarray:
    """Deterministic eigenvector signs: first (then next nonzero) row entry
    of each column is made nonnegative."""
    U = U.copy()
    for k in range(U.shape[1]):
        col = U[:, k]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            U[:, k] = -col
    return U


def default_init(stacked: StackedData, K: int) -> ModelParams:
    """Starting point: Q = 0, delta = 1, intercepts at pooled outcome means,
    sigma at pooled outcome variances, all other coefficients 0."""
    r, p = stacked.r, stacked.p
    B = np.zeros((r, p))
    B[:, 0] = stacked.Y.mean(axis=0)
    sigma = np.maximum(stacked.Y.var(axis=0), _SIGMA_FLOOR)
    cov = FactorCovariance(Q=np.zeros((2 * r, K)), delta=np.ones(2 * r))
    fixed = FixedEffects(B=B, p_time_invariant=stacked.p1, p_time_varying=stacked.p2)
    return ModelParams(fixed=fixed, sigma=sigma, cov=cov)


# =========================================================================
# M-step pieces
# =========================================================================

def update_Q_delta(
    Psi_bar: np.ndarray,
    K: int,
    Q0: np.ndarray,
    delta0: np.ndarray,
    max_inner: int = 100,
    tol: float = 1e-3,
):
    """Alternate the eigendecomposition update for Q with the diagonal
    update for delta.

    Given delta, the optimal loadings come from the top-K eigenpairs of
    S = diag(delta)^{-1/2} Psi_bar diag(delta)^{-1/2}:
    Q = diag(delta)^{1/2} U (Lambda - I)_+^{1/2} (column signs fixed
    deterministically, eigenvalues below 1 clamped to zero columns).  The
    profile objective value after each Q step is available from the
    eigenvalues alone; if a delta step ever decreases it the previous pair
    is returned, so the alternation never degrades the objective.
    """
    two_r = Psi_bar.shape[0]
    Q = np.asarray(Q0, dtype=float).copy()
    delta = np.maximum(np.asarray(delta0, dtype=float), _DELTA_FLOOR)
    psibar_diag = np.diag(Psi_bar)
    f_prev = -np.inf
    Q_best, delta_best = Q, delta

    for sweep in range(max_inner):
        droot = np.sqrt(delta)
        S = Psi_bar / droot[:, None] / droot[None, :]
        evals, evecs = np.linalg.eigh(S)
        lam = evals[::-1][:K]
        U = _fix_column_signs(evecs[:, ::-1][:, :K])
        load = np.sqrt(np.maximum(lam - 1.0, 0.0))
        Q_new = droot[:, None] * U * load[None, :]

        # profile objective at (Q_new, delta): from the spectrum of S
        lam_plus = np.maximum(lam, 1.0)
        f_now = -0.5 * (
            float(np.sum(np.log(delta)))
            + float(np.sum(np.log(lam_plus)))
            + float(np.trace(S))
            + float(np.sum(1.0 - lam_plus))
        )
        if f_now < f_prev - 1e-10 * (1.0 + abs(f_prev)):
            # the last delta step degraded the objective; keep the safe pair
            return Q_best, delta_best, sweep
        delta_new = np.maximum(psibar_diag - np.sum(Q_new**2, axis=1), _DELTA_FLOOR)

        rel = max(_rel_change(Q_new, Q), _rel_change(delta_new, delta))
        Q_best, delta_best = Q_new, delta
        f_prev = f_now
        Q, delta = Q_new, delta_new
        if rel < tol:
            break
    return Q, delta, sweep + 1


def update_B_dense(stats: EStats, stacked: StackedData) -> np.ndarray:
    """GLS update B = (sum (y - Z m) x') (sum x x')^{-1}, row-wise OLS."""
    m_int = stats.m[:, 0::2]
    m_slope = stats.m[:, 1::2]
    rhs = stacked.yx - m_int.T @ stacked.sum_x - m_slope.T @ stacked.sum_gx
    try:
        return np.linalg.solve(stacked.gram_x, rhs.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "design Gram matrix is singular (collinear covariates)"
        ) from exc


def expected_rss(
    m: np.ndarray,
    psi_blocks: np.ndarray,
    stacked: StackedData,
    B: np.ndarray,
    scale: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-outcome expected residual sum of squares,
    sum_i sum_t E[(y_itj - x'B_j - Z (scale * latent))^2].

    ``scale`` is the 2r vector multiplying the latent coordinates (all ones
    in stage one, the d vector in stage two).
    """
    r = stacked.r
    if scale is None:
        scale = np.ones(2 * r)
    sc_pair = scale.reshape(r, 2)
    # tr(diag(sc) Psi_block diag(sc) A) per subject/outcome
    blocks = psi_blocks * sc_pair[None, :, :, None] * sc_pair[None, :, None, :]
    tr_term = np.einsum("iab,ijab->j", stacked.A, blocks, optimize=True)

    resid = stacked.residuals(B)
    rss = (resid**2).sum(axis=0)
    resid0 = stacked.segment_sum(resid)
    resid1 = stacked.segment_sum(resid * stacked.g[:, None])
    m_int = m[:, 0::2] * scale[0::2][None, :]
    m_slope = m[:, 1::2] * scale[1::2][None, :]
    cross = (m_int * resid0 + m_slope * resid1).sum(axis=0)
    return tr_term + rss - 2.0 * cross


def update_sigma_dense(
    stats: EStats, stacked: StackedData, B: np.ndarray, scale: Optional[np.ndarray] = None
) -> np.ndarray:
    """Per-outcome noise variances from expected residual second moments.

    With ``scale`` (the 2r vector d) this also serves the scaled
    parameterization of stage two; stage one passes scale = 1.
    """
    sigma = expected_rss(stats.m, stats.psi_blocks, stacked, B, scale) / stacked.n_obs
    return np.maximum(sigma, _SIGMA_FLOOR)


# =========================================================================
# driver
# =========================================================================

def estep1(theta: ModelParams, data: LongitudinalDataset) -> List[PosteriorMoments]:
    """Per-subject posterior moments under the factor parameterization."""
    if not isinstance(theta.cov, FactorCovariance):
        raise TypeError("estep1 requires FactorCovariance parameters")
    return [posterior_zeta(theta, s) for s in data.subjects]


def fit_stage1(
    data: Union[LongitudinalDataset, StackedData], config: Stage1Config
) -> Stage1Result:
    """Run the unpenalized EM to convergence (or the iteration cap)."""
    stacked = data if isinstance(data, StackedData) else StackedData(data)
    r = stacked.r
    theta0 = config.init if config.init is not None else default_init(stacked, config.K)
    if not isinstance(theta0.cov, FactorCovariance):
        raise TypeError("stage-1 initialization must use FactorCovariance")
    if theta0.cov.K != config.K:
        raise ConstraintError("initialization rank does not match config.K")
    B = theta0.fixed.B.copy()
    sigma = theta0.sigma.copy()
    Q = theta0.cov.Q.copy()
    delta = np.maximum(theta0.cov.delta.copy(), _DELTA_FLOOR)

    trace: List[float] = []
    converged = False
    it = 0
    for it in range(1, config.max_outer + 1):
        cov = FactorCovariance(Q=Q, delta=delta)
        stats = estep_batch(
            cov, sigma, B, stacked,
            want_psibar=True, want_loglik=True, n_threads=config.n_threads,
        )
        trace.append(stats.loglik)

        Q_new, delta_new, _ = update_Q_delta(
            stats.Psi_bar, config.K, Q, delta,
            max_inner=config.max_inner, tol=config.tol,
        )
        B_new = update_B_dense(stats, stacked)
        sigma_new = update_sigma_dense(stats, stacked, B_new)

        rel = max(
            _rel_change(Q_new, Q),
            _rel_change(delta_new, delta),
            _rel_change(B_new, B),
            _rel_change(sigma_new, sigma),
        )
        Q, delta, B, sigma = Q_new, delta_new, B_new, sigma_new
        if rel < config.tol:
            converged = True
            break

    cov = FactorCovariance(Q=Q, delta=delta)
    final_ll = loglik_stacked(cov, sigma, B, stacked, config.n_threads)
    trace.append(final_ll)
    params = ModelParams(
        fixed=FixedEffects(B=B, p_time_invariant=stacked.p1,
                           p_time_varying=stacked.p2),
        sigma=sigma,
        cov=cov,
    )
    return Stage1Result(
        params=params, converged=converged, n_iter=it, loglik=final_ll, trace=trace
    )
