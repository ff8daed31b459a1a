"""Stage two: penalized EM under the scaled-correlation parameterization.

Parameters are (P, d, B, sigma) with G = diag(d) R(P) diag(d) and
R(P) = PP' + I - diag(PP').  Each outer iteration refreshes the latent
posterior (E-step), solves the correlation subproblem

    min_P  log|R(P)| + tr(R(P)^{-1} Psi_bar),   subject to ||P_[j,:]|| < 1,

by projected gradient descent, then alternates closed-form coordinate
updates for (d, B, sigma):

* intercept scales d_{2j-1}: exact ratio minimizer;
* slope scales d_{2j}: adaptive-L1 soft threshold
  d = sign(c) (|c| - lambda_d/|d_bar|)_+ / a, producing exact zeros;
* B1 (intercept-block coefficients): generalized-residual regression;
* B2 (slope-block coefficients): coordinate-descent adaptive lasso;
* sigma: expected residual second moments.

The adaptive weights (d_bar, B2_bar) are the unpenalized estimates computed
once from the first E-step at the stage-two starting values and then held
fixed, so that the penalized surrogate objective

    -Q(theta | posteriors) + (lambda_d/2) sum_j |d_{2j}|/|d_bar_j|
                           + lambda_B sum_jl |B2_jl / B2_bar_jl|

is non-increasing across every sub-step (each update is an exact block
minimizer), and hence the penalized marginal objective
-loglik/n + penalties is non-increasing across outer iterations.

The (d, B, sigma) alternation runs max_inner sweeps per E-step; the
default is a single sweep.  Once a slope scale is zero at an E-step its
posterior slope moments vanish and the coordinate can never re-enter, so
when the penalties are re-tuned per iteration, deep inner loops let one
aggressively large candidate wipe out coordinates far beyond its nominal
threshold set before the tuner can react; one sweep per posterior refresh
keeps each iteration's selection within the tuned threshold set.

Sign convention: the likelihood is invariant to jointly flipping the sign
of d_j and row j of P, so d is canonicalized to be nonnegative at each
posterior refresh and in the final result.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .design import StackedData
from .errors import ConstraintError, NumericalError
from .kernels import estep_batch, loglik_stacked, posterior_eta
from .model import (
    FixedEffects,
    LongitudinalDataset,
    ModelParams,
    PosteriorMoments,
    ScaledCorrelation,
    to_scaled,
)
from .stage1 import expected_rss, update_sigma_dense

_SIGMA_FLOOR = 1e-8
_STEP_COLLAPSE = 1e-14

__all__ = [
    "PgdConfig",
    "Stage2Config",
    "Stage2State",
    "AdaptiveWeights",
    "Stage2Result",
    "init_stage2",
    "estep2",
    "corr_objective",
    "corr_gradient",
    "update_P",
    "update_d_odd",
    "update_d_even",
    "update_B1",
    "update_B2",
    "update_sigma_sparse",
    "compute_adaptive_weights",
    "penalty_value",
    "fit_stage2",
]


# =========================================================================
# configuration / result containers
# =========================================================================

@dataclass
class PgdConfig:
    max_steps: int = 100
    step_init: float = 1.0
    backtrack_factor: float = 0.5
    armijo_const: float = 1e-4
    row_margin: float = 1e-3
    grad_tol: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ConstraintError("backtrack_factor must lie in (0, 1)")
        if not 0.0 < self.row_margin < 1.0:
            raise ConstraintError("row_margin must lie in (0, 1)")
        if self.max_steps < 1 or self.step_init <= 0 or self.armijo_const <= 0:
            raise ConstraintError("pgd caps and constants must be positive")


@dataclass
class Stage2Config:
    lambda_d: float = 0.0
    lambda_B: float = 0.0
    tol: float = 1e-3
    max_outer: int = 100
    max_inner: int = 1
    pgd: PgdConfig = field(default_factory=PgdConfig)
    tune_per_iteration: bool = False
    lambda_d_grid: Optional[np.ndarray] = None
    lambda_B_grid: Optional[np.ndarray] = None
    n_threads: int = 1

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_B < 0:
            raise ConstraintError("penalty parameters must be nonnegative")
        if self.tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise ConstraintError("tol must be > 0 and iteration caps >= 1")


@dataclass
class AdaptiveWeights:
    """Unpenalized reference estimates: d_bar (length r, slope scales) and
    B2_bar (r x (p'+1)).  Zero entries mean the penalized update pins the
    coordinate to exactly zero."""
    d_bar: np.ndarray
    B2_bar: np.ndarray
    degenerate_d: np.ndarray  # flags: a_j == 0, d_bar forced to 0


@dataclass
class Stage2State:
    """Snapshot shared by the M-step updates: data summaries, the current
    posterior moments (from the last E-step), and the current iterate."""
    stacked: StackedData
    m: np.ndarray            # (n, 2r) posterior means of the latent eta
    psi_blocks: np.ndarray   # (n, r, 2, 2) diagonal blocks of E[eta eta']
    Psi_bar: np.ndarray      # (2r, 2r) average of E[eta eta']
    P: np.ndarray
    d: np.ndarray
    B: np.ndarray
    sigma: np.ndarray


@dataclass
class Stage2Result:
    params: ModelParams
    converged: bool
    n_iter: int
    loglik: float
    trace: List[float]                    # -loglik/n + penalty per outer iterate
    inner_trace: List[List[float]]        # penalized surrogate per sub-step
    history: List[Tuple[float, float, float, float]]  # per outer iteration:
                                          # (loglik at E-step, max rel change,
                                          #  lambda_d, lambda_B)
    weights: AdaptiveWeights
    lambda_d: float
    lambda_B: float
    lambda_trace: List[Tuple[float, float]]
    mask_random: np.ndarray               # (r,) True where d_{2j} != 0
    mask_fixed: np.ndarray                # (r, p'+1) True where B2 != 0


# =========================================================================
# correlation subproblem: objective, gradient, projected gradient descent
# =========================================================================

class _CorrFactor:
    """Woodbury/determinant-lemma helper for R = D + PP' with
    D = I - diag(PP').  All products cost O((2r)^2 K)."""

    def __init__(self, P: np.ndarray):
        self.P = P
        D = 1.0 - np.sum(P * P, axis=1)
        if np.any(D <= 0.0):
            raise ConstraintError("P row norms must be strictly below 1")
        self.D = D
        self.Pd = P / D[:, None]                      # D^{-1} P
        K = P.shape[1]
        S = np.eye(K) + P.T @ self.Pd
        self.cho = cho_factor(S, lower=True)
        self.logdet = float(np.sum(np.log(D))) + 2.0 * float(
            np.sum(np.log(np.diag(self.cho[0])))
        )
        self.Sinv = cho_solve(self.cho, np.eye(K))

    def rinv_apply(self, M: np.ndarray) -> np.ndarray:
        """R^{-1} M = D^{-1}M - Pd S^{-1} (Pd' M)."""
        return M / self.D[:, None] - self.Pd @ cho_solve(self.cho, self.Pd.T @ M)

    def rinv_diag(self) -> np.ndarray:
        return 1.0 / self.D - np.einsum("jk,jk->j", self.Pd @ self.Sinv, self.Pd)

    def trace_rinv(self, Psi_bar: np.ndarray) -> float:
        t1 = float(np.sum(np.diag(Psi_bar) / self.D))
        inner = self.Pd.T @ Psi_bar @ self.Pd
        return t1 - float(np.trace(self.Sinv @ inner))


def corr_objective(P: np.ndarray, Psi_bar: np.ndarray) -> float:
    """f(P) = log|R(P)| + tr(R(P)^{-1} Psi_bar) for feasible P."""
    fac = _CorrFactor(np.asarray(P, dtype=float))
    return fac.logdet + fac.trace_rinv(Psi_bar)


def corr_gradient(P: np.ndarray, Psi_bar: np.ndarray) -> np.ndarray:
    """Analytic gradient 2 (H - diag(H)) P with H = R^{-1} - R^{-1}Psi_bar R^{-1}.

    The diagonal subtraction comes from the I - diag(PP') correction in R,
    which cancels the diagonal contribution of dR = dP P' + P dP'.
    """
    P = np.asarray(P, dtype=float)
    fac = _CorrFactor(P)
    WP = fac.rinv_apply(P)
    V = fac.rinv_apply(Psi_bar)            # R^{-1} Psi_bar  (2r x 2r)
    MP = fac.rinv_apply(Psi_bar @ WP)      # R^{-1} Psi_bar R^{-1} P
    diag_W = fac.rinv_diag()
    # diag(R^{-1} Psi_bar R^{-1})_i = V_ii/D_i - (V Pd S^{-1})_i . Pd_i
    VW2 = V @ (fac.Pd @ fac.Sinv)
    diag_M = np.diag(V) / fac.D - np.einsum("ik,ik->i", VW2, fac.Pd)
    return 2.0 * (WP - MP - (diag_W - diag_M)[:, None] * P)


def _project_rows(P: np.ndarray, margin: float) -> np.ndarray:
    norms = np.sqrt(np.sum(P * P, axis=1))
    cap = 1.0 - margin
    scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
    return P * scale[:, None]


def _pgd(
    Psi_bar: np.ndarray,
    P0: np.ndarray,
    cfg: PgdConfig,
    step_init: Optional[float] = None,
) -> Tuple[np.ndarray, float, float]:
    """Projected gradient descent on f(P); returns (P, f(P), last step).

    Armijo backtracking on the projected point: the row-ball feasible set is
    convex, so <grad, P+ - P> < 0 whenever P+ != P and accepted steps
    strictly decrease f.
    """
    P = _project_rows(np.asarray(P0, dtype=float), cfg.row_margin)
    fac = _CorrFactor(P)
    f = fac.logdet + fac.trace_rinv(Psi_bar)
    step = step_init if step_init is not None else cfg.step_init

    for _ in range(cfg.max_steps):
        grad = corr_gradient(P, Psi_bar)
        # gradient-mapping stationarity test at a bounded reference step
        t_ref = min(step, cfg.step_init)
        P_test = _project_rows(P - t_ref * grad, cfg.row_margin)
        if np.max(np.abs(P_test - P)) / t_ref < cfg.grad_tol:
            break
        t = step
        accepted = False
        while t > _STEP_COLLAPSE:
            P_new = _project_rows(P - t * grad, cfg.row_margin)
            f_new = corr_objective(P_new, Psi_bar)
            decrease = float(np.sum(grad * (P_new - P)))
            if f_new <= f + cfg.armijo_const * decrease:
                accepted = True
                break
            t *= cfg.backtrack_factor
        if not accepted:
            break
        P, f = P_new, f_new
        step = min(t / cfg.backtrack_factor, 1e6)  # let the step grow back
    return P, f, step


def update_P(Psi_bar: np.ndarray, P_init: np.ndarray, pgd: PgdConfig) -> np.ndarray:
    """Solve the correlation subproblem from a feasible starting point."""
    P, _, _ = _pgd(Psi_bar, P_init, pgd)
    return P


# =========================================================================
# d updates
# =========================================================================

def _soft(x: np.ndarray, thr: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _residual_sums(state: Stage2State) -> Tuple[np.ndarray, np.ndarray]:
    """(sum_t resid_itj, sum_t g_it resid_itj) per subject/outcome."""
    st = state.stacked
    resid0 = st.sum_y - st.sum_x @ state.B.T
    resid1 = st.sum_gy - st.sum_gx @ state.B.T
    return resid0, resid1


def _d_intercepts_all(state: Stage2State) -> np.ndarray:
    """Exact minimizer for every intercept scale d_{2j-1} given the current
    slope scales (numerator uses sum_t resid * m and the cross moment)."""
    st = state.stacked
    resid0, _ = _residual_sums(state)
    m_int = state.m[:, 0::2]
    sum_g = st.A[:, 0, 1]
    Psi01 = state.psi_blocks[:, :, 0, 1]
    Psi00 = state.psi_blocks[:, :, 0, 0]
    d_slope = state.d[1::2]

    num = (m_int * resid0).sum(axis=0) - d_slope * (sum_g[:, None] * Psi01).sum(axis=0)
    den = (st.T[:, None].astype(float) * Psi00).sum(axis=0)
    if np.any(den <= 0.0):
        bad = int(np.argmax(den <= 0.0))
        raise NumericalError(
            f"degenerate posterior: zero curvature for intercept scale of outcome {bad}"
        )
    return num / den


def _d_slope_quadratics(
    state: Stage2State, d_int: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Coefficients (a_j, c_j) of the slope-scale subproblem
    a_j d^2 - 2 c_j d (up to constants), using the updated intercepts."""
    st = state.stacked
    _, resid1 = _residual_sums(state)
    m_slope = state.m[:, 1::2]
    sum_g = st.A[:, 0, 1]
    sum_g2 = st.A[:, 1, 1]
    Psi01 = state.psi_blocks[:, :, 0, 1]
    Psi11 = state.psi_blocks[:, :, 1, 1]

    coef = 2.0 / (st.n * state.sigma)
    a = coef * (sum_g2[:, None] * Psi11).sum(axis=0)
    c = coef * (
        (m_slope * resid1).sum(axis=0) - d_int * (sum_g[:, None] * Psi01).sum(axis=0)
    )
    return a, c


def _thresholds(lam: float, weights: np.ndarray) -> np.ndarray:
    """Adaptive thresholds lam/|w|; lam = 0 means no thresholding, w = 0
    means an infinite threshold (coordinate pinned to zero)."""
    if lam == 0.0:
        return np.zeros_like(weights, dtype=float)
    aw = np.abs(weights)
    out = np.full(weights.shape, np.inf)
    nz = aw > 0.0
    out[nz] = lam / aw[nz]
    return out


def _d_slopes_all(
    state: Stage2State, d_int: np.ndarray, lambda_d: float, d_bar: np.ndarray
) -> np.ndarray:
    a, c = _d_slope_quadratics(state, d_int)
    thr = _thresholds(lambda_d, d_bar)
    mag = np.abs(c) - thr
    active = mag > 0.0
    if np.any(active & (a <= 0.0)):
        bad = int(np.argmax(active & (a <= 0.0)))
        raise NumericalError(
            f"degenerate design: zero slope curvature with nonzero score (outcome {bad})"
        )
    return np.where(active, np.sign(c) * mag / np.where(a > 0.0, a, 1.0), 0.0)


def update_d_odd(j: int, state: Stage2State) -> float:
    """Intercept scale d_{2j-1} (0-based latent index 2j) for outcome j."""
    return float(_d_intercepts_all(state)[j])


def update_d_even(
    j: int, state: Stage2State, lambda_d: float, weight: float
) -> float:
    """Penalized slope scale d_{2j} (0-based latent index 2j+1) for outcome
    j, soft-thresholded at lambda_d/|weight|; uses the intercept scale
    currently stored in state.d."""
    d_int = state.d[0::2]
    a, c = _d_slope_quadratics(state, d_int)
    thr = _thresholds(lambda_d, np.array([weight]))[0]
    mag = abs(c[j]) - thr
    if mag <= 0.0:
        return 0.0
    if a[j] <= 0.0:
        raise NumericalError(
            f"degenerate design: zero slope curvature with nonzero score (outcome {j})"
        )
    return float(np.sign(c[j]) * mag / a[j])


# =========================================================================
# B updates
# =========================================================================

def _latent_design_sums(
    state: Stage2State, cols: slice
) -> Tuple[np.ndarray, np.ndarray]:
    """sum_it (Z diag(d) m)_j x' over the requested design columns, split
    into its intercept and slope pieces."""
    st = state.stacked
    m_int = state.m[:, 0::2]
    m_slope = state.m[:, 1::2]
    d_int = state.d[0::2]
    d_slope = state.d[1::2]
    term_int = d_int[:, None] * (m_int.T @ st.sum_x[:, cols])
    term_slope = d_slope[:, None] * (m_slope.T @ st.sum_gx[:, cols])
    return term_int, term_slope


def update_B1(state: Stage2State) -> np.ndarray:
    """Closed-form regression of the generalized residual
    y - B2 x2 - Z diag(d) m on the intercept-block design x1."""
    st = state.stacked
    nb1 = st.n_b1
    B2 = state.B[:, nb1:]
    gram11 = st.gram_x[:nb1, :nb1]
    gram21 = st.gram_x[nb1:, :nb1]
    term_int, term_slope = _latent_design_sums(state, slice(0, nb1))
    rhs = st.yx[:, :nb1] - B2 @ gram21 - term_int - term_slope
    try:
        return np.linalg.solve(gram11, rhs.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "intercept-block Gram matrix is singular (collinear covariates)"
        ) from exc


def update_B2(
    state: Stage2State,
    lambda_B: float,
    weights: np.ndarray,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> np.ndarray:
    """Adaptive-lasso coordinate descent on the slope-block coefficients.

    Rows (outcomes) are independent and updated simultaneously; coordinates
    within a row are cycled until the largest coordinate change falls below
    tol.  Each coordinate update is the exact scalar soft-threshold
    minimizer, so zeros are exact.
    """
    st = state.stacked
    nb1 = st.n_b1
    gram12 = st.gram_x[:nb1, nb1:]
    gram22 = st.gram_x[nb1:, nb1:]
    B1 = state.B[:, :nb1]
    term_int, term_slope = _latent_design_sums(state, slice(nb1, st.p))
    q = st.yx[:, nb1:] - B1 @ gram12 - term_int - term_slope

    thr = _thresholds(lambda_B, np.asarray(weights, dtype=float))
    thr = thr * (st.n * state.sigma)[:, None]

    B2 = state.B[:, nb1:].copy()
    diag = np.diag(gram22).copy()
    usable = diag > 0.0
    L = gram22.shape[0]
    for _ in range(max_sweeps):
        max_change = 0.0
        for ell in range(L):
            if not usable[ell]:
                if np.any(B2[:, ell] != 0.0):
                    B2[:, ell] = 0.0
                continue
            partial = q[:, ell] - B2 @ gram22[:, ell] + B2[:, ell] * diag[ell]
            new = _soft(partial, thr[:, ell]) / diag[ell]
            max_change = max(max_change, float(np.max(np.abs(new - B2[:, ell]))))
            B2[:, ell] = new
        if max_change < tol:
            break
    return B2


def update_sigma_sparse(state: Stage2State) -> np.ndarray:
    """Noise-variance update with the latent coordinates scaled by d."""
    stats = _StatsView(state.m, state.psi_blocks)
    return update_sigma_dense(stats, state.stacked, state.B, scale=state.d)


class _StatsView:
    """Minimal duck-typed stand-in for kernels.EStats."""

    def __init__(self, m, psi_blocks):
        self.m = m
        self.psi_blocks = psi_blocks


# =========================================================================
# adaptive weights, penalties, surrogate objective
# =========================================================================

def compute_adaptive_weights(state: Stage2State) -> AdaptiveWeights:
    """One unpenalized (d, B1, B2) sweep at the given state; the resulting
    slope scales and B2 are the adaptive-lasso reference estimates."""
    d_int = _d_intercepts_all(state)
    a, c = _d_slope_quadratics(state, d_int)
    degenerate = a <= 0.0
    d_bar = np.where(degenerate, 0.0, c / np.where(degenerate, 1.0, a))

    d_tmp = np.empty_like(state.d)
    d_tmp[0::2] = d_int
    d_tmp[1::2] = d_bar
    tmp = dataclasses.replace(state, d=d_tmp)
    B1 = update_B1(tmp)
    B_tmp = state.B.copy()
    B_tmp[:, : state.stacked.n_b1] = B1
    tmp = dataclasses.replace(tmp, B=B_tmp)
    B2_bar = update_B2(tmp, 0.0, np.ones((state.stacked.r, state.stacked.p - state.stacked.n_b1)))
    return AdaptiveWeights(d_bar=d_bar, B2_bar=B2_bar, degenerate_d=degenerate)


def _weighted_l1(values: np.ndarray, reference: np.ndarray) -> float:
    """sum |v|/|ref| with the conventions 0/0 = 0 and nonzero/0 = inf."""
    av, ar = np.abs(values), np.abs(reference)
    ok = ar > 0.0
    total = float(np.sum(av[ok] / ar[ok]))
    if np.any(av[~ok] > 0.0):
        return np.inf
    return total


def penalty_value(
    d: np.ndarray,
    B2: np.ndarray,
    lambda_d: float,
    lambda_B: float,
    weights: AdaptiveWeights,
) -> float:
    """(lambda_d/2) sum_j |d_{2j}|/|d_bar_j| + lambda_B sum |B2/B2_bar|.

    The factor 1/2 on the d term makes the soft-threshold update the exact
    coordinate minimizer of -Q + penalty (the threshold in the update is
    lambda_d/|d_bar| while the quadratic carries coefficient a_j/4).
    """
    pen = 0.0
    if lambda_d > 0.0:
        pen += 0.5 * lambda_d * _weighted_l1(d[1::2], weights.d_bar)
    if lambda_B > 0.0:
        pen += lambda_B * _weighted_l1(B2, weights.B2_bar)
    return pen


def _surrogate(
    f_P: float,
    expected: np.ndarray,
    sigma: np.ndarray,
    stacked: StackedData,
    d: np.ndarray,
    B2: np.ndarray,
    lambda_d: float,
    lambda_B: float,
    weights: AdaptiveWeights,
) -> float:
    """Penalized negative Q-function:
    f(P)/2 + (N sum log sigma + sum E_j/sigma_j)/(2n) + penalties."""
    n, N = stacked.n, stacked.n_obs
    gauss = (N * float(np.sum(np.log(sigma))) + float(np.sum(expected / sigma))) / (2.0 * n)
    return 0.5 * f_P + gauss + penalty_value(d, B2, lambda_d, lambda_B, weights)


# =========================================================================
# driver
# =========================================================================

def init_stage2(theta1: ModelParams) -> ModelParams:
    """Convert a stage-one estimate to the scaled-correlation start point."""
    cov = theta1.cov
    if isinstance(cov, ScaledCorrelation):
        scaled = cov
    else:
        scaled = to_scaled(cov)
    return ModelParams(fixed=theta1.fixed, sigma=theta1.sigma, cov=scaled)


def estep2(theta: ModelParams, data: LongitudinalDataset) -> List[PosteriorMoments]:
    """Per-subject posterior moments of eta under the scaled parameters."""
    if not isinstance(theta.cov, ScaledCorrelation):
        raise TypeError("estep2 requires ScaledCorrelation parameters")
    return [posterior_eta(theta, s) for s in data.subjects]


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    num = float(np.linalg.norm(new - old))
    den = float(np.linalg.norm(old))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


def _canonicalize_signs(P: np.ndarray, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Flip (d_j, P row j) pairs so every d_j is nonnegative; G-invariant."""
    neg = d < 0.0
    if np.any(neg):
        d = d.copy()
        P = P.copy()
        d[neg] = -d[neg]
        P[neg, :] = -P[neg, :]
    return P, d


def fit_stage2(
    data: Union[LongitudinalDataset, StackedData],
    theta0: ModelParams,
    config: Stage2Config,
) -> Stage2Result:
    """Run the penalized EM from a stage-one start to convergence."""
    stacked = data if isinstance(data, StackedData) else StackedData(data)
    if not isinstance(theta0.cov, ScaledCorrelation):
        raise TypeError("stage-2 initialization must use ScaledCorrelation")
    n, r, nb1 = stacked.n, stacked.r, stacked.n_b1
    P = theta0.cov.P.copy()
    d = theta0.cov.d.copy()
    B = theta0.fixed.B.copy()
    sigma = theta0.sigma.copy()

    lam_d, lam_B = config.lambda_d, config.lambda_B
    weights: Optional[AdaptiveWeights] = None
    trace: List[float] = []
    inner_trace: List[List[float]] = []
    history: List[Tuple[float, float, float, float]] = []
    lambda_trace: List[Tuple[float, float]] = []
    pgd_step: Optional[float] = None
    converged = False
    it = 0

    for it in range(1, config.max_outer + 1):
        P, d = _canonicalize_signs(P, d)
        P_prev, d_prev, B_prev, sigma_prev = P.copy(), d.copy(), B.copy(), sigma.copy()

        cov = ScaledCorrelation(P=P, d=d)
        stats = estep_batch(
            cov, sigma, B, stacked,
            want_psibar=True, want_loglik=True, n_threads=config.n_threads,
        )
        state = Stage2State(
            stacked=stacked, m=stats.m, psi_blocks=stats.psi_blocks,
            Psi_bar=stats.Psi_bar, P=P, d=d, B=B, sigma=sigma,
        )
        if weights is None:
            weights = compute_adaptive_weights(state)
        if config.tune_per_iteration:
            from .selection import tune_lambdas  # deferred: avoids an import cycle
            lam_d, lam_B, _ = tune_lambdas(
                state, weights,
                lambda_d_grid=config.lambda_d_grid,
                lambda_B_grid=config.lambda_B_grid,
            )
        lambda_trace.append((lam_d, lam_B))
        trace.append(
            -stats.loglik / n + penalty_value(d, B[:, nb1:], lam_d, lam_B, weights)
        )

        # ---- M-step: correlation subproblem -----------------------------
        sub: List[float] = []
        Psi_bar = stats.Psi_bar
        f_start = corr_objective(P, Psi_bar)
        E_cur = expected_rss(state.m, state.psi_blocks, stacked, B, scale=d)
        sub.append(_surrogate(f_start, E_cur, sigma, stacked, d, B[:, nb1:],
                              lam_d, lam_B, weights))
        P, f_P, pgd_step = _pgd(Psi_bar, P, config.pgd, step_init=pgd_step)
        state.P = P
        sub.append(_surrogate(f_P, E_cur, sigma, stacked, d, B[:, nb1:],
                              lam_d, lam_B, weights))

        # ---- M-step: (d, B, sigma) alternation --------------------------
        for _ in range(config.max_inner):
            d_old, B_old, sigma_old = state.d.copy(), state.B.copy(), state.sigma.copy()

            d_int = _d_intercepts_all(state)
            d_new = state.d.copy()
            d_new[0::2] = d_int
            d_new[1::2] = _d_slopes_all(state, d_int, lam_d, weights.d_bar)
            state.d = d_new
            E_cur = expected_rss(state.m, state.psi_blocks, stacked, state.B, scale=state.d)
            sub.append(_surrogate(f_P, E_cur, state.sigma, stacked, state.d,
                                  state.B[:, nb1:], lam_d, lam_B, weights))

            B_new = state.B.copy()
            B_new[:, :nb1] = update_B1(state)
            state.B = B_new
            E_cur = expected_rss(state.m, state.psi_blocks, stacked, state.B, scale=state.d)
            sub.append(_surrogate(f_P, E_cur, state.sigma, stacked, state.d,
                                  state.B[:, nb1:], lam_d, lam_B, weights))

            B_new = state.B.copy()
            B_new[:, nb1:] = update_B2(state, lam_B, weights.B2_bar)
            state.B = B_new
            E_cur = expected_rss(state.m, state.psi_blocks, stacked, state.B, scale=state.d)
            sub.append(_surrogate(f_P, E_cur, state.sigma, stacked, state.d,
                                  state.B[:, nb1:], lam_d, lam_B, weights))

            state.sigma = np.maximum(E_cur / stacked.n_obs, _SIGMA_FLOOR)
            sub.append(_surrogate(f_P, E_cur, state.sigma, stacked, state.d,
                                  state.B[:, nb1:], lam_d, lam_B, weights))

            inner_rel = max(
                _rel_change(state.d, d_old),
                _rel_change(state.B, B_old),
                _rel_change(state.sigma, sigma_old),
            )
            if inner_rel < config.tol:
                break
        inner_trace.append(sub)

        d, B, sigma = state.d, state.B, state.sigma
        rel = max(
            _rel_change(P, P_prev),
            _rel_change(d, d_prev),
            _rel_change(B, B_prev),
            _rel_change(sigma, sigma_prev),
        )
        history.append((stats.loglik, rel, lam_d, lam_B))
        if rel < config.tol:
            converged = True
            break

    P, d = _canonicalize_signs(P, d)
    cov = ScaledCorrelation(P=P, d=d)
    final_ll = loglik_stacked(cov, sigma, B, stacked, config.n_threads)
    trace.append(-final_ll / n + penalty_value(d, B[:, nb1:], lam_d, lam_B, weights))
    params = ModelParams(
        fixed=FixedEffects(B=B, p_time_invariant=stacked.p1,
                           p_time_varying=stacked.p2),
        sigma=sigma,
        cov=cov,
    )
    return Stage2Result(
        params=params,
        converged=converged,
        n_iter=it,
        loglik=final_ll,
        trace=trace,
        inner_trace=inner_trace,
        history=history,
        weights=weights,
        lambda_d=lam_d,
        lambda_B=lam_B,
        lambda_trace=lambda_trace,
        mask_random=d[1::2] != 0.0,
        mask_fixed=B[:, nb1:] != 0.0,
    )
