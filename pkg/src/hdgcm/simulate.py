"""Synthetic-data generator and evaluation metrics for the fitting pipeline.

Outcomes come in four archetypes, assigned in contiguous blocks:

1. constant mean, constant variance (no fixed slope, no random slope);
2. increasing mean (mu1 ~ U(1,2)), constant variance;
3. constant mean, increasing variance (random-slope rows of G active);
4. decreasing mean (mu1 ~ U(-2,-1)), increasing variance.

All outcomes carry a random intercept; only types 3 and 4 carry a random
slope.  The active block of G is QQ' + I with Q entries ~ U(-1,1) on the
active latent coordinates (all intercepts plus type-3/4 slopes); the
remaining rows and columns of G are exactly zero.

The ground truth lives on the natural covariate scale: the Bernoulli group
indicator enters as 0/1 and the AR-1 covariate as generated, while the
age-like times are standardized to pooled mean 0 / variance 1 (slopes per
standard deviation of age, so magnitudes are comparable across age ranges).
The returned dataset carries the raw covariates; a fitting pipeline that
standardizes every design column internally remains well-specified, because
standardizing covariates is an invertible affine change of basis for the
fixed effects and leaves the random-effect design (intercept and
standardized age) untouched.  ``evaluate`` accepts the pipeline's
standardization record and maps fitted coefficients back to the generation
scale before scoring, so errors and selection rates are measured on the
scale the truth is defined on.

Noise is calibrated per outcome to a fraction of the realized conditional
mean's spread: sigma*_j = (noise_pct * sd_{(i,t)} of (Bx + Z zeta)_j)^2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConstraintError
from .model import (
    FixedEffects,
    LongitudinalDataset,
    ModelParams,
    Standardization,
    Subject,
    standardize,
)

__all__ = [
    "SimConfig",
    "GroundTruth",
    "SimMetrics",
    "ar1_series",
    "generate_dataset",
    "map_fixed_to_generation_scale",
    "evaluate",
    "replication_rng",
]


@dataclass
class SimConfig:
    r: int = 100
    n: int = 100
    noise_pct: float = 0.2
    K_star: int = 3
    proportions: Tuple[float, float, float, float] = (0.70, 0.10, 0.10, 0.10)
    alpha1_nonzero_frac: float = 0.05
    T_choices: Tuple[int, ...] = (3, 4, 5)
    g1_range: Tuple[float, float] = (20.0, 60.0)
    ar1_rho: float = 0.5
    ar1_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.r < 1 or self.n < 2:
            raise ConstraintError("need r >= 1 and n >= 2")
        if not abs(sum(self.proportions) - 1.0) < 1e-9:
            raise ConstraintError("type proportions must sum to 1")
        if min(self.proportions) < 0:
            raise ConstraintError("type proportions must be nonnegative")
        if self.noise_pct <= 0:
            raise ConstraintError("noise_pct must be positive")
        if not 0 <= self.alpha1_nonzero_frac <= 1:
            raise ConstraintError("alpha1_nonzero_frac must lie in [0, 1]")
        if self.g1_range[0] >= self.g1_range[1]:
            raise ConstraintError("g1_range must be increasing")
        if len(self.T_choices) == 0 or min(self.T_choices) < 1:
            raise ConstraintError("T_choices must be positive visit counts")
        if abs(self.ar1_rho) >= 1:
            raise ConstraintError("ar1_rho must satisfy |rho| < 1")


@dataclass
class GroundTruth:
    B_true: FixedEffects
    G_true: np.ndarray
    Q_true: np.ndarray
    delta_true: np.ndarray
    sigma_true: np.ndarray
    mask_mu1: np.ndarray        # (r,) nonzero fixed slopes mu1_j
    mask_alpha1: np.ndarray     # (r,) nonzero interaction slopes alpha1_j
    mask_random: np.ndarray     # (r,) outcomes with active random slope
    outcome_types: np.ndarray   # (r,) values in {1,2,3,4}
    K_star: int


@dataclass
class SimMetrics:
    err_B: float
    err_G: float
    tpr_fixed: float
    fpr_fixed: float
    tpr_random: float
    fpr_random: float
    K_correct: bool
    K_hat: int


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream: independent across replication indices."""
    return np.random.default_rng((seed, rep))


def ar1_series(T: int, rho: float, sd: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR-1: w_1 ~ N(0, sd^2/(1-rho^2)), w_t = rho w_{t-1} + e_t."""
    if abs(rho) >= 1:
        raise ConstraintError("ar1_series requires |rho| < 1")
    out = np.empty(T)
    out[0] = rng.normal(0.0, sd / np.sqrt(1.0 - rho * rho))
    for t in range(1, T):
        out[t] = rho * out[t - 1] + rng.normal(0.0, sd)
    return out


def _type_blocks(r: int, proportions) -> np.ndarray:
    """Contiguous type assignment: counts for types 2-4 are round(p_k r),
    type 1 takes the remainder."""
    c2 = int(round(proportions[1] * r))
    c3 = int(round(proportions[2] * r))
    c4 = int(round(proportions[3] * r))
    c1 = r - c2 - c3 - c4
    if c1 < 0:
        raise ConstraintError("type proportions are infeasible for this r")
    return np.repeat(np.array([1, 2, 3, 4]), [c1, c2, c3, c4])


def generate_dataset(
    cfg: SimConfig, rng: Optional[np.random.Generator] = None
) -> Tuple[LongitudinalDataset, GroundTruth]:
    """Draw one dataset plus its ground truth.

    The truth's design is (1, u, w, g_std, u * g_std) with u and w on their
    natural scales and g_std the pooled-standardized age; the returned
    dataset carries the raw covariates (standardization is left to the
    fitting pipeline).  Draw order (fixed for determinism): per-outcome
    fixed effects, the active factor loadings, per-subject visit counts /
    first ages / group indicators / AR-1 covariates, the subject random
    effects, and finally the observation noise.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    r, n = cfg.r, cfg.n
    types = _type_blocks(r, cfg.proportions)

    # ----- fixed effects on the generation scale -----------------------
    mu0 = rng.normal(0.0, 1.0, r)
    alpha0 = rng.normal(0.0, 0.1, r)
    gamma = rng.normal(0.0, 0.1, r)
    mu1 = np.zeros(r)
    mu1[types == 2] = rng.uniform(1.0, 2.0, int(np.sum(types == 2)))
    mu1[types == 4] = rng.uniform(-2.0, -1.0, int(np.sum(types == 4)))
    alpha1 = np.zeros(r)
    n_alpha = int(round(cfg.alpha1_nonzero_frac * r))
    alpha_idx = rng.choice(r, size=n_alpha, replace=False)
    alpha1[alpha_idx] = rng.uniform(1.0, 2.0, n_alpha)
    # design layout: (1, u, w, g, u*g)
    B = np.column_stack([mu0, alpha0, gamma, mu1, alpha1])

    # ----- random-effect covariance: active block is QQ' + I ----------
    slope_active = (types == 3) | (types == 4)
    active = np.zeros(2 * r, dtype=bool)
    active[0::2] = True
    active[1::2] = slope_active
    n_active = int(np.sum(active))
    Q_act = rng.uniform(-1.0, 1.0, (n_active, cfg.K_star))
    Q = np.zeros((2 * r, cfg.K_star))
    Q[active] = Q_act
    delta = np.where(active, 1.0, 0.0)
    G = Q @ Q.T
    G[np.diag_indices_from(G)] += delta

    # ----- raw covariates, then standardization ------------------------
    T_all = rng.choice(np.asarray(cfg.T_choices), size=n)
    g1 = rng.uniform(cfg.g1_range[0], cfg.g1_range[1], n)
    u_all = rng.integers(0, 2, n).astype(float)
    w_series = [ar1_series(int(T_all[i]), cfg.ar1_rho, cfg.ar1_sd, rng) for i in range(n)]

    raw_subjects = []
    for i in range(n):
        T = int(T_all[i])
        times = g1[i] + np.arange(T, dtype=float)
        raw_subjects.append(
            Subject(
                id=f"s{i:05d}",
                times=times,
                u=np.array([u_all[i]]),
                w=w_series[i][:, None],
                y=np.zeros((T, r)),
            )
        )
    raw = LongitudinalDataset(subjects=tuple(raw_subjects), standardization=None)
    # Standardized ages only; u and w stay raw in the generating design.
    shell = standardize(raw)
    g_std = [s.times for s in shell.subjects]

    # ----- responses from the generation-scale design -------------------
    zeta = np.empty((n, 2 * r))
    for i in range(n):
        z = rng.normal(size=cfg.K_star)
        e = rng.normal(size=2 * r)
        zeta[i] = Q @ z + np.sqrt(delta) * e

    cond_means = []
    for i, s in enumerate(raw.subjects):
        T = s.n_visits
        X = np.column_stack([
            np.ones(T),
            np.repeat(s.u[None, :], T, axis=0),
            s.w,
            g_std[i],
            g_std[i][:, None] * s.u[None, :],
        ])
        mean = X @ B.T + zeta[i, 0::2][None, :] + g_std[i][:, None] * zeta[i, 1::2][None, :]
        cond_means.append(mean)

    stacked_mean = np.concatenate(cond_means, axis=0)
    sigma = (cfg.noise_pct * stacked_mean.std(axis=0)) ** 2  # ddof=0
    if np.any(sigma <= 0):
        raise ConstraintError("degenerate conditional means; cannot calibrate noise")

    subjects = []
    for i, s in enumerate(raw.subjects):
        noise = rng.normal(0.0, np.sqrt(sigma), (s.n_visits, r))
        subjects.append(dataclasses.replace(s, y=cond_means[i] + noise))
    data = LongitudinalDataset(subjects=tuple(subjects), standardization=None)

    truth = GroundTruth(
        B_true=FixedEffects(B=B, p_time_invariant=1, p_time_varying=1),
        G_true=G,
        Q_true=Q,
        delta_true=delta,
        sigma_true=sigma,
        mask_mu1=mu1 != 0.0,
        mask_alpha1=alpha1 != 0.0,
        mask_random=slope_active,
        outcome_types=types,
        K_star=cfg.K_star,
    )
    return data, truth


# =========================================================================
# evaluation
# =========================================================================

def map_fixed_to_generation_scale(
    fixed: FixedEffects, std: Standardization
) -> np.ndarray:
    """Re-express coefficients fit on standardized covariates on the
    generation scale (raw u, raw w, standardized age).

    With u_std = (u - m_u) / s_u and w_std = (w - m_w) / s_w, matching the
    row models termwise gives, per outcome:

        a_u  = b_u / s_u            a_w   = b_w / s_w
        a_ug = b_ug / s_u           a_g   = b_g - sum_k b_ug,k m_u,k / s_u,k
        a_0  = b_0 - sum_k b_u,k m_u,k / s_u,k - sum_l b_w,l m_w,l / s_w,l

    Ages are standardized identically on both scales, so the g column needs
    no rescaling.  Exact zeros in the u, w and u*g columns are preserved.
    """
    B = fixed.B
    p1, p2 = fixed.p_time_invariant, fixed.p_time_varying
    b0 = B[:, 0]
    bu = B[:, 1 : 1 + p1]
    bw = B[:, 1 + p1 : 1 + p1 + p2]
    bg = B[:, 1 + p1 + p2]
    bug = B[:, 2 + p1 + p2 :]
    u_shift = std.u_offset / std.u_scale
    w_shift = std.w_offset / std.w_scale
    return np.column_stack(
        [
            b0 - bu @ u_shift - bw @ w_shift,
            bu / std.u_scale,
            bw / std.w_scale,
            bg - bug @ u_shift,
            bug / std.u_scale,
        ]
    )


def _rates(est: np.ndarray, true: np.ndarray) -> Tuple[float, float]:
    """(TPR, FPR) with empty denominators resolved to the perfect score."""
    pos = int(np.sum(true))
    neg = int(true.size - pos)
    tp = int(np.sum(est & true))
    fp = int(np.sum(est & ~true))
    tpr = tp / pos if pos else 1.0
    fpr = fp / neg if neg else 0.0
    return tpr, fpr


def evaluate(
    params: ModelParams,
    mask_fixed: np.ndarray,
    mask_random: np.ndarray,
    truth: GroundTruth,
    K_hat: int,
    standardization: Optional[Standardization] = None,
) -> SimMetrics:
    """Table-style criteria: squared Frobenius errors normalized by the
    parameter counts, and selection rates for fixed / random slopes.

    When ``standardization`` is given, ``params.fixed`` is treated as fit on
    the standardized design: coefficient error is computed after mapping the
    estimate back to the generation scale, while selection rates compare the
    fit's own zero pattern (columns of ``mask_fixed``: age slope, then each
    interaction) against the true support expressed in the fitted basis.
    Standardizing u shifts any interaction effect partly into the age-slope
    column (b_g = a_g + a_ug m_u), so an outcome with a true interaction but
    no main age slope genuinely has a nonzero age coefficient there; scoring
    in one basis keeps such detections from being miscounted.  The
    random-slope mask is scale-free and is always used as passed.  Pass
    ``None`` when the estimate already lives on the generation scale.
    """
    from .model import assemble_cov  # local to avoid widening module API

    B_true = truth.B_true.B
    r, p = B_true.shape
    mask_fixed = np.asarray(mask_fixed, dtype=bool)
    if standardization is not None:
        B_hat = map_fixed_to_generation_scale(params.fixed, standardization)
        p1 = params.fixed.p_time_invariant
        p2 = params.fixed.p_time_varying
        a_g = B_true[:, 1 + p1 + p2]
        a_ug = B_true[:, 2 + p1 + p2 :]
        true_fixed = np.column_stack(
            [a_g + a_ug @ standardization.u_offset != 0.0, a_ug != 0.0]
        )
    else:
        B_hat = params.fixed.B
        true_fixed = np.column_stack([truth.mask_mu1, truth.mask_alpha1])
    err_B = float(np.linalg.norm(B_hat - B_true) ** 2) / (p * r)
    G_hat = assemble_cov(params.cov)
    err_G = float(np.linalg.norm(G_hat - truth.G_true) ** 2) / (2 * r) ** 2

    tpr_f, fpr_f = _rates(mask_fixed, true_fixed)
    tpr_r, fpr_r = _rates(np.asarray(mask_random, dtype=bool), truth.mask_random)

    return SimMetrics(
        err_B=err_B,
        err_G=err_G,
        tpr_fixed=tpr_f,
        fpr_fixed=fpr_f,
        tpr_random=tpr_r,
        fpr_random=fpr_r,
        K_correct=K_hat == truth.K_star,
        K_hat=K_hat,
    )
