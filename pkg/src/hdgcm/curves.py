"""Growth-curve tables on the original (unstandardized) time scale.

A fitted model lives on standardized covariates: each outcome's mean is
b0 + bu'u_std + bw'w_std + bg g_std + bug'(u_std g_std) plus the subject's
random intercept and random slope in g_std.  For plotting, curves are wanted
as intercept + slope * g with g the original time.  Substituting the stored
affine transforms gives, per outcome and per curve level,

    slope     = (bg + bug' u_std) / s_g + zeta_slope / s_g
    intercept = b0 + bu'u_std + bw'w_std - m_g * slope + zeta_int

Curves are evaluated at w = 0 on the original scale (the time-varying
covariate is not part of an intercept/slope growth curve).  Three levels are
emitted: the population curve (all time-invariant covariates at 0), one
group curve per time-invariant covariate (that covariate at 1, the rest at
0), and optionally one curve per subject from posterior-mean random effects.

Individual curves are assembled additively — population part, plus the
subject's covariate effects, plus the scaled posterior random effect — and
the parts are stored alongside the assembled coefficients, so the
decomposition reconstructs the curve exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .design import StackedData
from .errors import DimensionError
from .kernels import estep_batch
from .model import (
    LongitudinalDataset,
    ModelParams,
    ScaledCorrelation,
    Standardization,
    Subject,
    to_scaled,
)

__all__ = ["CurveTable", "identity_standardization", "build_curve_table"]


@dataclass
class CurveTable:
    """Original-scale growth-curve coefficients per outcome.

    Group rows give the full curve for a subject with that time-invariant
    covariate equal to 1 (not the delta against the population curve); the
    deltas are stored separately in ``effect_*``.
    """

    pop_intercept: np.ndarray       # (r,)
    pop_slope: np.ndarray           # (r,)
    group_intercept: np.ndarray     # (p', r)
    group_slope: np.ndarray         # (p', r)
    effect_intercept: np.ndarray    # (p', r) group minus population, per unit u
    effect_slope: np.ndarray        # (p', r)
    subject_ids: Tuple[str, ...] = ()
    subject_u: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    re_intercept: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    re_slope: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    indiv_intercept: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    indiv_slope: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def r(self) -> int:
        return self.pop_intercept.shape[0]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)


def identity_standardization(p1: int, p2: int) -> Standardization:
    """The no-op transform, for fits run on unstandardized data."""
    return Standardization(
        g_offset=0.0,
        g_scale=1.0,
        u_offset=np.zeros(p1),
        u_scale=np.ones(p1),
        w_offset=np.zeros(p2),
        w_scale=np.ones(p2),
    )


def _assemble_individual(
    table: CurveTable, u_raw: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """population + covariate effects + scaled random effect, per subject.

    This is the defining arithmetic for the individual rows; reconstruction
    from the stored parts reproduces them bitwise.
    """
    intercept = table.pop_intercept[None, :] + u_raw @ table.effect_intercept
    intercept = intercept + table.re_intercept
    slope = table.pop_slope[None, :] + u_raw @ table.effect_slope
    slope = slope + table.re_slope
    return intercept, slope


def build_curve_table(
    params: ModelParams,
    standardization: Optional[Standardization] = None,
    data: Optional[LongitudinalDataset] = None,
    n_threads: int = 1,
) -> CurveTable:
    """Back-transform fitted coefficients into per-level growth curves.

    ``data`` (original-scale covariates) enables the per-subject rows: it is
    standardized with the fit's stored transforms, posterior means of the
    random effects are computed under ``params``, and each subject's curve
    is assembled from the population curve, its covariate effects, and its
    scaled random effect.
    """
    B = params.fixed.B
    p1 = params.fixed.p_time_invariant
    p2 = params.fixed.p_time_varying
    if standardization is None:
        standardization = identity_standardization(p1, p2)
    if standardization.u_offset.shape[0] != p1 or standardization.w_offset.shape[0] != p2:
        raise DimensionError("standardization does not match the fitted design")

    b0 = B[:, 0]
    bu = B[:, 1 : 1 + p1]
    bw = B[:, 1 + p1 : 1 + p1 + p2]
    bg = B[:, 1 + p1 + p2]
    bug = B[:, 2 + p1 + p2 :]
    m_g, s_g = standardization.g_offset, standardization.g_scale
    u0 = -standardization.u_offset / standardization.u_scale   # u_std at u = 0
    w0 = -standardization.w_offset / standardization.w_scale   # w_std at w = 0

    pop_slope = (bg + bug @ u0) / s_g
    pop_intercept = b0 + bu @ u0 + bw @ w0 - m_g * pop_slope
    # per-unit effect of covariate k: moving u_k from 0 to 1 shifts u_std,k
    # by 1/s_u,k and leaves every other column unchanged
    effect_slope = (bug / standardization.u_scale[None, :]).T / s_g
    effect_intercept = (bu / standardization.u_scale[None, :]).T - m_g * effect_slope
    group_intercept = pop_intercept[None, :] + effect_intercept
    group_slope = pop_slope[None, :] + effect_slope

    table = CurveTable(
        pop_intercept=pop_intercept,
        pop_slope=pop_slope,
        group_intercept=group_intercept,
        group_slope=group_slope,
        effect_intercept=effect_intercept,
        effect_slope=effect_slope,
    )
    if data is None:
        return table

    subjects = data.subjects
    if data.standardization is None:
        std_subjects = LongitudinalDataset(
            subjects=tuple(
                Subject(
                    id=s.id,
                    times=standardization.transform_g(s.times),
                    u=standardization.transform_u(s.u),
                    w=standardization.transform_w(s.w),
                    y=s.y,
                )
                for s in subjects
            ),
            standardization=standardization,
        )
    else:
        std_subjects = data
    stacked = StackedData(std_subjects)
    if stacked.r != params.fixed.r or stacked.p1 != p1 or stacked.p2 != p2:
        raise DimensionError("dataset does not match the fitted design")

    cov = params.cov if isinstance(params.cov, ScaledCorrelation) else to_scaled(params.cov)
    stats = estep_batch(cov, params.sigma, B, stacked, n_threads=n_threads)
    # eta = (zeta_int / d_int, zeta_slope / d_slope); scale back, then to the
    # original time axis: slope / s_g, intercept - m_g * (slope / s_g)
    zeta = stats.m * cov.d[None, :]
    re_slope = zeta[:, 1::2] / s_g
    re_intercept = zeta[:, 0::2] - m_g * re_slope

    if data.standardization is None:
        u_raw = np.array([s.u for s in subjects], dtype=float).reshape(len(subjects), p1)
    else:
        u_std = np.array([s.u for s in subjects], dtype=float).reshape(len(subjects), p1)
        u_raw = u_std * standardization.u_scale[None, :] + standardization.u_offset[None, :]
    table.subject_ids = tuple(s.id for s in subjects)
    table.subject_u = u_raw
    table.re_intercept = re_intercept
    table.re_slope = re_slope
    table.indiv_intercept, table.indiv_slope = _assemble_individual(table, u_raw)
    return table
