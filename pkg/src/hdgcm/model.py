"""Domain types and parameterizations for the growth-curve model.

The model: for subject i at visit time g_it, the r-vector of responses is

    y_it = B x_it + Z_it zeta_i + eps_it,

where x_it = (1, u_i, w_it, g_it, u_i * g_it) stacks the fixed-effect
covariates, Z_it = I_r (x) (1, g_it) couples each outcome's random intercept
and random slope, eps_it ~ N(0, diag(sigma)) and zeta_i ~ N(0, G).

Two interchangeable parameterizations of the 2r x 2r latent covariance:

* factor form      G = Q Q' + diag(delta)            (rank-K loadings Q)
* scaled form      G = diag(d) R diag(d),  R = P P' + I - diag(P P')

The scaled form separates per-coordinate standard deviations d (whose even
entries are the selection targets: d_{2j} = 0 removes outcome j's random
slope) from a correlation-like matrix R with unit diagonal.

Vectors over the 2r latent coordinates are ordered (intercept_1, slope_1,
intercept_2, slope_2, ...): coordinate 2j-2 (0-based even) is outcome j's
random intercept and 2j-1 (0-based odd) its random slope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConstraintError, DegenerateDataError, DimensionError

__all__ = [
    "Subject",
    "Standardization",
    "LongitudinalDataset",
    "FixedEffects",
    "FactorCovariance",
    "ScaledCorrelation",
    "ModelParams",
    "PosteriorMoments",
    "expand_design",
    "assemble_G",
    "assemble_R",
    "to_scaled",
    "to_factor",
    "standardize",
]


# =========================================================================
# helpers
# =========================================================================

def _frozen_array(value, name: str, ndim: int) -> np.ndarray:
    """Copy to a float array of the given rank and make it read-only."""
    arr = np.array(value, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have ndim={ndim}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ConstraintError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def row_norms(mat: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(mat) ** 2, axis=1))


# =========================================================================
# data containers
# =========================================================================

@dataclass(frozen=True)
class Subject:
    """One subject's visits: times, baseline covariates, responses.

    times : (T,) strictly increasing visit times
    u     : (p1,) time-invariant covariates
    w     : (T, p2) time-varying covariates
    y     : (T, r) responses
    """

    id: str
    times: np.ndarray
    u: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen_array(self.times, "times", 1))
        object.__setattr__(self, "u", _frozen_array(self.u, "u", 1))
        object.__setattr__(self, "w", _frozen_array(self.w, "w", 2))
        object.__setattr__(self, "y", _frozen_array(self.y, "y", 2))
        T = self.times.shape[0]
        if T == 0:
            raise DimensionError(f"subject {self.id}: no visits")
        if np.any(np.diff(self.times) <= 0):
            raise ConstraintError(f"subject {self.id}: times must be strictly increasing")
        if self.w.shape[0] != T or self.y.shape[0] != T:
            raise DimensionError(
                f"subject {self.id}: w/y rows must match the {T} visit times"
            )

    @property
    def n_visits(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class Standardization:
    """Per-column affine transforms applied to times and covariates.

    Each standardized column is (raw - offset) / scale with scale the pooled
    (population) standard deviation across all (subject, visit) rows.
    """

    g_offset: float
    g_scale: float
    u_offset: np.ndarray
    u_scale: np.ndarray
    w_offset: np.ndarray
    w_scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_offset", _frozen_array(self.u_offset, "u_offset", 1))
        object.__setattr__(self, "u_scale", _frozen_array(self.u_scale, "u_scale", 1))
        object.__setattr__(self, "w_offset", _frozen_array(self.w_offset, "w_offset", 1))
        object.__setattr__(self, "w_scale", _frozen_array(self.w_scale, "w_scale", 1))

    def transform_g(self, g):
        return (np.asarray(g, dtype=float) - self.g_offset) / self.g_scale

    def inverse_g(self, g_std):
        return np.asarray(g_std, dtype=float) * self.g_scale + self.g_offset

    def transform_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_offset) / self.u_scale

    def transform_w(self, w):
        return (np.asarray(w, dtype=float) - self.w_offset) / self.w_scale


@dataclass(frozen=True)
class LongitudinalDataset:
    """Immutable collection of subjects with consistent dimensions."""

    subjects: tuple
    standardization: Optional[Standardization] = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects:
            raise DegenerateDataError("dataset has no subjects")
        first = self.subjects[0]
        r, p1, p2 = first.y.shape[1], first.u.shape[0], first.w.shape[1]
        for s in self.subjects:
            if s.y.shape[1] != r or s.u.shape[0] != p1 or s.w.shape[1] != p2:
                raise DimensionError(
                    f"subject {s.id}: dimensions differ from the first subject"
                )
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ConstraintError("duplicate subject ids")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def r(self) -> int:
        return self.subjects[0].y.shape[1]

    @property
    def p_time_invariant(self) -> int:
        return self.subjects[0].u.shape[0]

    @property
    def p_time_varying(self) -> int:
        return self.subjects[0].w.shape[1]

    @property
    def p(self) -> int:
        """Length of the expanded fixed-effect design vector."""
        return 2 + 2 * self.p_time_invariant + self.p_time_varying

    @property
    def n_obs(self) -> int:
        return sum(s.n_visits for s in self.subjects)


# =========================================================================
# parameter containers
# =========================================================================

@dataclass(frozen=True)
class FixedEffects:
    """Fixed-effect coefficient matrix, one row per outcome.

    Columns follow the expanded design (1 | u | w | g | u*g), so
    p = 2 + 2*p1 + p2.  B1 denotes the first 1 + p1 + p2 columns (intercept
    block) and B2 the last 1 + p1 columns (time-slope block, the selection
    target).
    """

    B: np.ndarray
    p_time_invariant: int
    p_time_varying: int

    def __post_init__(self):
        object.__setattr__(self, "B", _frozen_array(self.B, "B", 2))
        p = 2 + 2 * self.p_time_invariant + self.p_time_varying
        if self.B.shape[1] != p:
            raise DimensionError(
                f"B has {self.B.shape[1]} columns, expected {p} "
                f"(p1={self.p_time_invariant}, p2={self.p_time_varying})"
            )

    @property
    def r(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def n_intercept_cols(self) -> int:
        return 1 + self.p_time_invariant + self.p_time_varying

    # column blocks ------------------------------------------------------
    @property
    def mu0(self) -> np.ndarray:
        return self.B[:, 0]

    @property
    def alpha0(self) -> np.ndarray:
        return self.B[:, 1 : 1 + self.p_time_invariant]

    @property
    def gamma(self) -> np.ndarray:
        k = 1 + self.p_time_invariant
        return self.B[:, k : k + self.p_time_varying]

    @property
    def mu1(self) -> np.ndarray:
        return self.B[:, self.n_intercept_cols]

    @property
    def alpha1(self) -> np.ndarray:
        return self.B[:, self.n_intercept_cols + 1 :]

    @property
    def B1(self) -> np.ndarray:
        return self.B[:, : self.n_intercept_cols]

    @property
    def B2(self) -> np.ndarray:
        return self.B[:, self.n_intercept_cols :]


@dataclass(frozen=True)
class FactorCovariance:
    """Factor parameterization G = Q Q' + diag(delta).

    Q is 2r x K.  delta must be nonnegative; fitted covariances keep
    delta >= 1e-8 so G stays invertible, but exact zeros are representable
    (rows removed by selection carry delta = 0 and a zero Q row).
    """

    Q: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen_array(self.Q, "Q", 2))
        object.__setattr__(self, "delta", _frozen_array(self.delta, "delta", 1))
        two_r, K = self.Q.shape
        if two_r % 2 != 0 or two_r == 0:
            raise DimensionError("Q must have an even, positive number of rows")
        if not 1 <= K <= two_r:
            raise DimensionError(f"rank K={K} must lie in [1, {two_r}]")
        if self.delta.shape[0] != two_r:
            raise DimensionError("delta length must match rows of Q")
        if np.any(self.delta < 0):
            raise ConstraintError("delta entries must be nonnegative")

    @property
    def K(self) -> int:
        return self.Q.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.Q.shape[0] // 2


@dataclass(frozen=True)
class ScaledCorrelation:
    """Scaled parameterization G = diag(d) R diag(d), R = P P' + I - diag(P P').

    Rows of P must have Euclidean norm strictly below 1 so R is positive
    definite.  d is nonnegative; even-indexed entries (0-based odd) are the
    random-slope scales whose exact zeros encode selection.
    """

    P: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", _frozen_array(self.P, "P", 2))
        object.__setattr__(self, "d", _frozen_array(self.d, "d", 1))
        two_r, K = self.P.shape
        if two_r % 2 != 0 or two_r == 0:
            raise DimensionError("P must have an even, positive number of rows")
        if not 1 <= K <= two_r:
            raise DimensionError(f"rank K={K} must lie in [1, {two_r}]")
        if self.d.shape[0] != two_r:
            raise DimensionError("d length must match rows of P")
        norms = row_norms(self.P)
        if np.any(norms >= 1.0):
            worst = int(np.argmax(norms))
            raise ConstraintError(
                f"P row {worst} has norm {norms[worst]:.6f} >= 1"
            )
        if np.any(self.d < 0):
            raise ConstraintError("d entries must be nonnegative")

    @property
    def K(self) -> int:
        return self.P.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.P.shape[0] // 2

    @property
    def d_intercept(self) -> np.ndarray:
        return self.d[0::2]

    @property
    def d_slope(self) -> np.ndarray:
        return self.d[1::2]


CovarianceLike = Union[FactorCovariance, ScaledCorrelation]


@dataclass(frozen=True)
class ModelParams:
    """Complete parameter set: fixed effects, noise variances, covariance."""

    fixed: FixedEffects
    sigma: np.ndarray
    cov: CovarianceLike

    def __post_init__(self):
        object.__setattr__(self, "sigma", _frozen_array(self.sigma, "sigma", 1))
        r = self.fixed.r
        if self.sigma.shape[0] != r:
            raise DimensionError("sigma length must equal the number of outcomes")
        if np.any(self.sigma <= 0):
            raise ConstraintError("sigma entries must be positive")
        if self.cov.n_outcomes != r:
            raise DimensionError("covariance dimension must be 2 * n_outcomes")

    @property
    def r(self) -> int:
        return self.fixed.r

    @property
    def K(self) -> int:
        return self.cov.K


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior mean m, covariance Omega, and second moment Psi of one
    subject's latent vector.  Psi = Omega + m m' holds by construction."""

    m: np.ndarray
    Omega: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _frozen_array(self.m, "m", 1))
        object.__setattr__(self, "Omega", _frozen_array(self.Omega, "Omega", 2))
        object.__setattr__(self, "Psi", _frozen_array(self.Psi, "Psi", 2))

    @classmethod
    def from_mean_cov(cls, m: np.ndarray, Omega: np.ndarray) -> "PosteriorMoments":
        m = np.asarray(m, dtype=float)
        Omega = np.asarray(Omega, dtype=float)
        return cls(m=m, Omega=Omega, Psi=Omega + np.outer(m, m))


# =========================================================================
# design expansion and covariance assembly
# =========================================================================

def expand_design(u, w, g) -> np.ndarray:
    """Expanded fixed-effect covariate vector (1, u, w, g, u*g) for one visit.

    Length is 2 + 2*len(u) + len(w); the trailing block u*g carries the
    subject-specific slope modifiers.
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if u.ndim != 1 or w.ndim != 1:
        raise DimensionError("u and w must be 1-D arrays")
    g = float(g)
    return np.concatenate(([1.0], u, w, [g], u * g))


def assemble_G(cov: FactorCovariance) -> np.ndarray:
    """Dense latent covariance G = Q Q' + diag(delta)."""
    G = cov.Q @ cov.Q.T
    G[np.diag_indices_from(G)] += cov.delta
    return G


def assemble_R(P: np.ndarray) -> np.ndarray:
    """Dense R = P P' + I - diag(P P'): unit diagonal held exactly.

    Raises ConstraintError when any row norm of P reaches 1 (R would lose
    positive definiteness).
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise DimensionError("P must be a 2-D array")
    norms = row_norms(P)
    if np.any(norms >= 1.0):
        worst = int(np.argmax(norms))
        raise ConstraintError(f"P row {worst} has norm {norms[worst]:.6f} >= 1")
    R = P @ P.T
    np.fill_diagonal(R, 1.0)
    return R


def to_scaled(cov: FactorCovariance) -> ScaledCorrelation:
    """Map (Q, delta) to (P, d): d_j = sqrt(G_jj), P = diag(d)^{-1} Q.

    Zero rows of G (zero Q row with delta_j = 0) map to d_j = 0 with a zero
    P row.  A zero delta_j with a nonzero Q row would put the P row on the
    unit sphere and is rejected by the ScaledCorrelation constructor.
    """
    qq_diag = np.sum(cov.Q**2, axis=1)
    d = np.sqrt(qq_diag + cov.delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        P = np.where(d[:, None] > 0, cov.Q / np.where(d == 0, 1.0, d)[:, None], 0.0)
    return ScaledCorrelation(P=P, d=d)


def to_factor(cov: ScaledCorrelation) -> FactorCovariance:
    """Map (P, d) to (Q, delta): Q = diag(d) P, delta_j = d_j^2 (1 - |P_j|^2).

    Rows with d_j = 0 produce a zero Q row and delta_j = 0, so the assembled
    G keeps exact zero rows/columns for de-selected coordinates.
    """
    Q = cov.d[:, None] * cov.P
    delta = cov.d**2 * (1.0 - np.sum(cov.P**2, axis=1))
    # tiny negatives from cancellation round to zero
    delta = np.where(delta < 0, 0.0, delta)
    return FactorCovariance(Q=Q, delta=delta)


def assemble_cov(cov: CovarianceLike) -> np.ndarray:
    """Dense G for either parameterization."""
    if isinstance(cov, FactorCovariance):
        return assemble_G(cov)
    R = assemble_R(cov.P)
    return cov.d[:, None] * R * cov.d[None, :]


# =========================================================================
# standardization
# =========================================================================

def standardize(data: LongitudinalDataset) -> LongitudinalDataset:
    """Standardize times and covariates to pooled mean 0, variance 1.

    Pooling is across all (subject, visit) rows, so time-invariant covariates
    are weighted by each subject's number of visits.  Population (ddof=0)
    variance is used: the two-visit dataset with times (0, 2) maps to
    (-1, 1).  Responses are never touched.  Raises DegenerateDataError if any
    column is constant.
    """
    if data.standardization is not None:
        raise ConstraintError("dataset is already standardized")
    g_all = np.concatenate([s.times for s in data.subjects])
    u_all = np.concatenate(
        [np.repeat(s.u[None, :], s.n_visits, axis=0) for s in data.subjects]
    )
    w_all = np.concatenate([s.w for s in data.subjects])

    def _moments(mat: np.ndarray, label: str):
        mean = mat.mean(axis=0)
        sd = mat.std(axis=0)  # ddof=0
        bad = np.nonzero(sd == 0)[0]
        if bad.size:
            raise DegenerateDataError(
                f"{label} column {bad[0]} is constant; cannot standardize"
            )
        return mean, sd

    g_mean, g_sd = _moments(g_all[:, None], "time")
    if u_all.shape[1]:
        u_mean, u_sd = _moments(u_all, "u")
    else:
        u_mean = np.zeros(0)
        u_sd = np.ones(0)
    if w_all.shape[1]:
        w_mean, w_sd = _moments(w_all, "w")
    else:
        w_mean = np.zeros(0)
        w_sd = np.ones(0)

    record = Standardization(
        g_offset=float(g_mean[0]),
        g_scale=float(g_sd[0]),
        u_offset=u_mean,
        u_scale=u_sd,
        w_offset=w_mean,
        w_scale=w_sd,
    )
    new_subjects = tuple(
        Subject(
            id=s.id,
            times=record.transform_g(s.times),
            u=record.transform_u(s.u),
            w=record.transform_w(s.w),
            y=s.y,
        )
        for s in data.subjects
    )
    return LongitudinalDataset(subjects=new_subjects, standardization=record)
