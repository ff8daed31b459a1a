"""Model selection: BIC, rank selection, and penalty-parameter tuning.

BIC = -2 loglik + log(n) df with the following degree-of-freedom rules:

* rank selection (stage one): df = 2r(K+1) - K(K-1)/2 — the factor loadings
  and diagonals minus the rotational constraints that pin Q;
* lambda_d: (number of nonzero slope scales d_{2j}) * (K+1) — zeroing one
  slope scale removes its Q row and delta entry;
* lambda_B: number of nonzero entries of the slope-block coefficients B2.

K is chosen by fitting stage one on a grid and minimizing BIC (ties toward
the smaller K).  The penalties are tuned on independent log-spaced grids,
sequentially (lambda_d first): each candidate mirrors one M-step update
from the current iterate and is scored with the fast observed-data
log-likelihood at the candidate-updated parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .design import StackedData
from .errors import ConstraintError, SelectionError
from .kernels import loglik_stacked
from .model import FactorCovariance, LongitudinalDataset, ScaledCorrelation
from .stage1 import Stage1Config, Stage1Result, fit_stage1
from .stage2 import (
    AdaptiveWeights,
    Stage2State,
    _canonicalize_signs,
    _d_intercepts_all,
    _d_slope_quadratics,
    _thresholds,
    update_B1,
    update_B2,
)

__all__ = [
    "BicReport",
    "bic",
    "df_unpenalized",
    "df_lambda_d",
    "df_lambda_B",
    "select_K",
    "default_lambda_grids",
    "tune_lambdas",
]


@dataclass
class BicReport:
    candidate: float
    loglik: float
    df: int
    bic: float
    selected: bool = False


def bic(loglik: float, df: int, n: int) -> float:
    """Bayesian information criterion -2 loglik + log(n) df."""
    if n < 2:
        raise ConstraintError(f"BIC requires n >= 2, got {n}")
    return -2.0 * loglik + np.log(n) * df


def df_unpenalized(r: int, K: int) -> int:
    """Free parameters of (Q, delta) after the K(K-1)/2 rotation constraints."""
    if r < 1 or K < 1:
        raise ConstraintError("df_unpenalized requires r >= 1 and K >= 1")
    return 2 * r * (K + 1) - (K * (K - 1)) // 2


def df_lambda_d(d: np.ndarray, K: int) -> int:
    """(K+1) per surviving slope scale: its Q row plus delta entry."""
    return int(np.count_nonzero(np.asarray(d)[1::2])) * (K + 1)


def df_lambda_B(B2: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(B2)))


# =========================================================================
# rank selection
# =========================================================================

def _truncated_init(params, K: int):
    """Restrict a fitted parameter set to rank K by keeping the K leading
    loading columns (largest norm first, stable under ties)."""
    Q = params.cov.Q
    if Q.shape[1] <= K:
        return params
    order = np.argsort(-np.linalg.norm(Q, axis=0), kind="stable")
    cov = FactorCovariance(Q=Q[:, order[:K]], delta=params.cov.delta)
    return dataclasses.replace(params, cov=cov)


def select_K(
    data: Union[LongitudinalDataset, StackedData],
    K_grid: Sequence[int],
    config: Stage1Config,
) -> Tuple[int, List[BicReport], Dict[int, Stage1Result]]:
    """Fit stage one for each K in the grid and pick the BIC minimizer.

    The grid is fitted from the largest K downward, warm-starting each fit
    from the previous one with the loading matrix truncated to its leading
    columns.  Cold starts (Q = 0) can leave the EM on a long plateau for
    small K, which would bias the BIC comparison toward larger ranks; the
    warm-start chain brings every candidate to a comparable convergence
    depth.  A user-supplied ``config.init`` seeds the first (largest-K) fit.

    Returns the selected K, one report per candidate (ascending K), and the
    fitted stage-one results keyed by K (so the winner need not be refit).
    """
    if len(K_grid) == 0:
        raise ConstraintError("K grid must be nonempty")
    stacked = data if isinstance(data, StackedData) else StackedData(data)
    reports: List[BicReport] = []
    fits: Dict[int, Stage1Result] = {}
    best_K: Optional[int] = None
    best_bic = np.inf
    carry = config.init
    for K in sorted(set(int(k) for k in K_grid), reverse=True):
        init = _truncated_init(carry, K) if carry is not None else None
        try:
            res = fit_stage1(stacked, dataclasses.replace(config, K=K, init=init))
        except Exception:
            reports.append(BicReport(candidate=float(K), loglik=-np.inf,
                                     df=df_unpenalized(stacked.r, K), bic=np.inf))
            continue
        fits[K] = res
        carry = res.params
        df = df_unpenalized(stacked.r, K)
        value = bic(res.loglik, df, stacked.n)
        reports.append(BicReport(candidate=float(K), loglik=res.loglik,
                                 df=df, bic=value))
        if value <= best_bic:  # ties keep the smaller K (grid is descending)
            best_bic, best_K = value, K
    if best_K is None:
        raise SelectionError("every stage-one fit in the K grid failed")
    reports.sort(key=lambda rep: rep.candidate)
    for rep in reports:
        rep.selected = int(rep.candidate) == best_K
    return best_K, reports, fits


# =========================================================================
# penalty tuning
# =========================================================================

def default_lambda_grids(
    state: Stage2State, weights: AdaptiveWeights, size: int = 20
) -> Tuple[np.ndarray, np.ndarray]:
    """20 log-spaced values spanning [1e-4, 1e1] times a data-driven scale.

    The lambda_d scale is the largest |c_j * d_bar_j| (the smallest value
    that zeroes coordinate j is |c_j| * |d_bar_j|); the lambda_B scale is
    the largest per-entry zeroing threshold |q_jl * B2_bar_jl| / (n sigma_j).
    """
    st = state.stacked
    d_int = _d_intercepts_all(state)
    _, c = _d_slope_quadratics(state, d_int)
    scale_d = float(np.max(np.abs(c * weights.d_bar))) if state.d.size else 0.0
    if not np.isfinite(scale_d) or scale_d <= 0.0:
        scale_d = 1.0

    nb1 = st.n_b1
    gram12 = st.gram_x[:nb1, nb1:]
    m_int, m_slope = state.m[:, 0::2], state.m[:, 1::2]
    d_i, d_s = state.d[0::2], state.d[1::2]
    q = (
        st.yx[:, nb1:]
        - state.B[:, :nb1] @ gram12
        - d_i[:, None] * (m_int.T @ st.sum_x[:, nb1:])
        - d_s[:, None] * (m_slope.T @ st.sum_gx[:, nb1:])
    )
    scores = np.abs(q * weights.B2_bar) / (st.n * state.sigma)[:, None]
    scale_B = float(np.max(scores)) if scores.size else 0.0
    if not np.isfinite(scale_B) or scale_B <= 0.0:
        scale_B = 1.0

    grid = np.logspace(-4.0, 1.0, size)
    return scale_d * grid, scale_B * grid


def tune_lambdas(
    state: Stage2State,
    weights: AdaptiveWeights,
    lambda_d_grid: Optional[np.ndarray] = None,
    lambda_B_grid: Optional[np.ndarray] = None,
    n_threads: int = 1,
) -> Tuple[float, float, List[BicReport]]:
    """Pick (lambda_d, lambda_B) by BIC on independent grids, sequentially.

    Each lambda_d candidate mirrors one d update from the current iterate;
    the winner is applied, B1 is refreshed, and each lambda_B candidate
    then mirrors one B2 coordinate-descent solve.  Likelihoods are the fast
    observed-data log-likelihood at the candidate-updated parameters.
    """
    st = state.stacked
    n, K = st.n, state.P.shape[1]
    if lambda_d_grid is None or lambda_B_grid is None:
        gd, gB = default_lambda_grids(state, weights)
        lambda_d_grid = gd if lambda_d_grid is None else np.asarray(lambda_d_grid)
        lambda_B_grid = gB if lambda_B_grid is None else np.asarray(lambda_B_grid)

    d_int = _d_intercepts_all(state)
    a, c = _d_slope_quadratics(state, d_int)
    safe_a = np.where(a > 0.0, a, 1.0)

    reports: List[BicReport] = []
    best_d, best_d_bic, best_d_vec = None, np.inf, None
    for lam in np.asarray(lambda_d_grid, dtype=float):
        thr = _thresholds(float(lam), weights.d_bar)
        mag = np.abs(c) - thr
        d_slope = np.where((mag > 0.0) & (a > 0.0), np.sign(c) * mag / safe_a, 0.0)
        d_cand = state.d.copy()
        d_cand[0::2] = d_int
        d_cand[1::2] = d_slope
        P_c, d_c = _canonicalize_signs(state.P, d_cand)
        ll = loglik_stacked(ScaledCorrelation(P=P_c, d=d_c), state.sigma,
                            state.B, st, n_threads)
        df = df_lambda_d(d_cand, K)
        value = bic(ll, df, n)
        reports.append(BicReport(candidate=float(lam), loglik=ll, df=df, bic=value))
        if value < best_d_bic:
            best_d_bic, best_d, best_d_vec = value, float(lam), d_cand
    for rep in reports:
        rep.selected = rep.candidate == best_d

    # apply the winning d, refresh B1, then score lambda_B candidates
    mid = dataclasses.replace(state, d=best_d_vec)
    B_new = state.B.copy()
    B_new[:, : st.n_b1] = update_B1(mid)
    mid = dataclasses.replace(mid, B=B_new)
    P_c, d_c = _canonicalize_signs(mid.P, mid.d)
    cov_c = ScaledCorrelation(P=P_c, d=d_c)

    b_reports: List[BicReport] = []
    best_B, best_B_bic = None, np.inf
    for lam in np.asarray(lambda_B_grid, dtype=float):
        B2_cand = update_B2(mid, float(lam), weights.B2_bar)
        B_cand = mid.B.copy()
        B_cand[:, st.n_b1:] = B2_cand
        ll = loglik_stacked(cov_c, mid.sigma, B_cand, st, n_threads)
        df = df_lambda_B(B2_cand)
        value = bic(ll, df, n)
        b_reports.append(BicReport(candidate=float(lam), loglik=ll, df=df, bic=value))
        if value < best_B_bic:
            best_B_bic, best_B = value, float(lam)
    for rep in b_reports:
        rep.selected = rep.candidate == best_B
    return best_d, best_B, reports + b_reports
