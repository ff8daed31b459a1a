"""Shared builders for randomized tests.

Every test that draws randomness seeds its own Generator so failures
reproduce; these helpers only construct objects from a provided rng.
"""

from __future__ import annotations

import numpy as np

from hdgcm.design import StackedData
from hdgcm.model import (
    FactorCovariance,
    FixedEffects,
    LongitudinalDataset,
    ModelParams,
    ScaledCorrelation,
    Subject,
)


def make_dataset(
    rng: np.random.Generator,
    n: int = 4,
    r: int = 3,
    p1: int = 1,
    p2: int = 1,
    T_choices=(2, 3, 4),
) -> LongitudinalDataset:
    """Small random dataset with roughly centered covariates."""
    subjects = []
    for i in range(n):
        T = int(rng.choice(np.asarray(T_choices)))
        times = np.sort(rng.normal(0.0, 1.0, T))
        subjects.append(
            Subject(
                id=f"s{i}",
                times=times,
                u=rng.normal(0.0, 1.0, p1),
                w=rng.normal(0.0, 1.0, (T, p2)),
                y=rng.normal(0.0, 1.0, (T, r)),
            )
        )
    return LongitudinalDataset(subjects=tuple(subjects), standardization=None)


def random_factor(rng: np.random.Generator, r: int, K: int) -> FactorCovariance:
    Q = rng.normal(0.0, 0.4, (2 * r, K))
    delta = rng.uniform(0.3, 1.5, 2 * r)
    return FactorCovariance(Q=Q, delta=delta)


def random_scaled(rng: np.random.Generator, r: int, K: int) -> ScaledCorrelation:
    P = rng.uniform(-1.0, 1.0, (2 * r, K))
    norms = np.linalg.norm(P, axis=1)
    P *= (rng.uniform(0.1, 0.9, 2 * r) / np.maximum(norms, 1e-12))[:, None]
    d = rng.uniform(0.2, 2.0, 2 * r)
    return ScaledCorrelation(P=P, d=d)


def random_params(
    rng: np.random.Generator,
    r: int,
    K: int,
    p1: int = 1,
    p2: int = 1,
    scaled: bool = False,
) -> ModelParams:
    p = 2 + 2 * p1 + p2
    cov = random_scaled(rng, r, K) if scaled else random_factor(rng, r, K)
    return ModelParams(
        fixed=FixedEffects(
            B=rng.normal(0.0, 1.0, (r, p)), p_time_invariant=p1, p_time_varying=p2
        ),
        sigma=rng.uniform(0.3, 2.0, r),
        cov=cov,
    )


def model_dataset(
    rng: np.random.Generator,
    params: ModelParams,
    n: int,
    T_choices=(2, 3, 4),
) -> LongitudinalDataset:
    """Data drawn exactly from the model under ``params``."""
    from hdgcm.model import assemble_cov

    B = params.fixed.B
    r = B.shape[0]
    p1 = params.fixed.p_time_invariant
    p2 = params.fixed.p_time_varying
    G = assemble_cov(params.cov)
    chol = np.linalg.cholesky(G + 1e-12 * np.eye(2 * r))
    subjects = []
    for i in range(n):
        T = int(rng.choice(np.asarray(T_choices)))
        times = np.sort(rng.normal(0.0, 1.0, T))
        u = rng.normal(0.0, 1.0, p1)
        w = rng.normal(0.0, 1.0, (T, p2))
        X = np.column_stack(
            [np.ones(T), np.repeat(u[None, :], T, axis=0), w, times,
             times[:, None] * u[None, :]]
        )
        zeta = chol @ rng.normal(size=2 * r)
        mean = X @ B.T + zeta[0::2][None, :] + times[:, None] * zeta[1::2][None, :]
        noise = rng.normal(0.0, np.sqrt(params.sigma), (T, r))
        subjects.append(Subject(id=f"s{i}", times=times, u=u, w=w, y=mean + noise))
    return LongitudinalDataset(subjects=tuple(subjects), standardization=None)


def stack(data: LongitudinalDataset) -> StackedData:
    return StackedData(data)
