"""Accelerated posterior and log-likelihood kernels.

The marginal covariance of one subject's stacked responses is

    V_i = Z_i diag(s) Gamma diag(s) Z_i' + I_{T_i} (x) diag(sigma),

with Gamma = L L' + diag(psi) covering both parameterizations:

* factor form  (zeta):  L = Q,  psi = delta,              s = 1
* scaled form  (eta):   L = P,  psi = 1 - rownorm2(P),    s = d

Everything reduces to small per-outcome 2x2 blocks and K x K cores.  With
A_i = sum_t (1, g_it)'(1, g_it), the posterior covariance of the latent
vector is

    Omega_i = Gamma - Gamma D_s (C_i - C_i D_s L F_i L' D_s C_i) D_s Gamma,
    C_i     = blockdiag_j[ A_i (sigma_j I + diag(a_j) A_i)^{-1} ],
    F_i     = (I_K + L' D_s C_i D_s L)^{-1},

where a_j holds the two entries of s^2 * psi for outcome j.  Writing C_i this
way (instead of (Sigma (x) A_i^{-1} + ...)^{-1}) never inverts A_i, so the
same code path covers subjects with a single visit or repeated times.  The
determinant needed by the likelihood collapses to

    log|V_i| = (T_i - 2) sum_j log sigma_j
             + sum_j log det(sigma_j I + diag(a_j) A_i)
             + log det(I_K + L' D_s C_i D_s L),

and the Gaussian quadratic form to  SSR_i - b_i' m_i  with
b_i = D_s sum_t Z_it' Sigma^{-1} (y_it - B x_it)  and  m_i = Omega_i b_i.

Dense reference implementations (``posterior_direct_oracle``,
``loglik_direct_oracle``) are kept for testing and guard their input sizes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .design import StackedData
from .errors import DimensionError, NumericalError
from .model import (
    FactorCovariance,
    LongitudinalDataset,
    ModelParams,
    PosteriorMoments,
    ScaledCorrelation,
    Subject,
    expand_design,
)

_DET_EPS = 1e-14
_CHUNK = 64  # subjects per work unit; fixed so results never depend on threads

__all__ = [
    "subject_cross_moment",
    "posterior_eta",
    "posterior_zeta",
    "posterior_direct_oracle",
    "loglik",
    "loglik_direct_oracle",
]


# =========================================================================
# parameterization plumbing
# =========================================================================

def _cov_internals(cov):
    """(L, psi, s) with Gamma = L L' + diag(psi) and coupling scale s."""
    if isinstance(cov, FactorCovariance):
        two_r = cov.Q.shape[0]
        return cov.Q, cov.delta, np.ones(two_r)
    if isinstance(cov, ScaledCorrelation):
        psi = 1.0 - np.sum(cov.P**2, axis=1)
        return cov.P, psi, cov.d
    raise TypeError(f"unsupported covariance type {type(cov).__name__}")


def subject_cross_moment(times) -> np.ndarray:
    """A = sum_t (1, g_t)'(1, g_t), the 2x2 moment the kernels consume."""
    g = np.asarray(times, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise DimensionError("times must be a nonempty 1-D array")
    sg = g.sum()
    return np.array([[g.size, sg], [sg, (g**2).sum()]])


# =========================================================================
# batched 2x2 / K x K cores
# =========================================================================

class CoreBlocks(NamedTuple):
    C: np.ndarray          # (m, r, 2, 2)
    U: np.ndarray          # (m, r, 2, K)   C D_s L block rows
    E: np.ndarray          # (m, K, K)      L' D_s C D_s L
    F: np.ndarray          # (m, K, K)      (I + E)^{-1}
    logdet_M: np.ndarray   # (m,)           sum_j log det(sigma_j I + a_j A)
    logdet_IE: np.ndarray  # (m,)           log det(I + E)


def _block_core(Lr, sLr, apair, sigma, A, subj_offset=0) -> CoreBlocks:
    """Per-subject blocks for a batch of cross moments A (m, 2, 2).

    Lr/sLr are the loadings reshaped to (r, 2, K); apair is (r, 2) holding
    s^2 * psi per outcome.
    """
    m = A.shape[0]
    K = Lr.shape[2]
    eye2 = np.eye(2)

    M = sigma[None, :, None, None] * eye2 + apair[None, :, :, None] * A[:, None, :, :]
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    if np.any(det <= _DET_EPS):
        i, j = np.unravel_index(int(np.argmin(det)), det.shape)
        raise NumericalError(
            f"singular 2x2 noise/scale block (subject index {subj_offset + i}, "
            f"outcome {j}): det={det[i, j]:.3e}"
        )
    Minv = np.empty_like(M)
    Minv[..., 0, 0] = M[..., 1, 1]
    Minv[..., 1, 1] = M[..., 0, 0]
    Minv[..., 0, 1] = -M[..., 0, 1]
    Minv[..., 1, 0] = -M[..., 1, 0]
    Minv /= det[..., None, None]

    C = np.einsum("iab,ijbc->ijac", A, Minv, optimize=True)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))

    U = np.einsum("ijab,jbk->ijak", C, sLr, optimize=True)
    E = np.einsum("jak,ijab,jbl->ikl", sLr, C, sLr, optimize=True)
    IE = np.eye(K)[None] + E
    sign, logdet_IE = np.linalg.slogdet(IE)
    if np.any(sign <= 0):
        bad = int(np.argmin(sign))
        raise NumericalError(
            f"I + L'D_sC D_sL not positive definite (subject index "
            f"{subj_offset + bad})"
        )
    F = np.linalg.inv(IE)
    F = 0.5 * (F + np.swapaxes(F, -1, -2))
    logdet_M = np.log(det).sum(axis=1)
    return CoreBlocks(C=C, U=U, E=E, F=F, logdet_M=logdet_M, logdet_IE=logdet_IE)


def _apply_omega(Lflat, psi, s, sLr, core: CoreBlocks, b: np.ndarray) -> np.ndarray:
    """m = Omega b for a batch of right-hand sides b (m, 2r)."""
    mcount, two_r = b.shape
    r = two_r // 2
    Gb = (b @ Lflat) @ Lflat.T + psi[None, :] * b
    v = (s[None, :] * Gb).reshape(mcount, r, 2)
    Cv = np.einsum("ijab,ijb->ija", core.C, v, optimize=True)
    t1 = np.einsum("jak,ija->ik", sLr, Cv, optimize=True)
    t2 = np.einsum("ikl,il->ik", core.F, t1, optimize=True)
    Ut2 = np.einsum("ijak,ik->ija", core.U, t2, optimize=True)
    inner = (Cv - Ut2).reshape(mcount, two_r)
    w = b - s[None, :] * inner
    return (w @ Lflat) @ Lflat.T + psi[None, :] * w


def _omega_diag_blocks(Lr, psi_pair, s_pair, core: CoreBlocks) -> np.ndarray:
    """2x2 diagonal blocks of Omega for every subject/outcome: (m, r, 2, 2)."""
    X = s_pair[None, :, :, None] * s_pair[None, :, None, :] * core.C
    XL = np.einsum("ijab,jbk->ijak", X, Lr, optimize=True)
    G1 = np.einsum("jak,ijbk->ijab", Lr, XL, optimize=True)  # L_j (X L)'
    LEL = np.einsum("jak,ikl,jbl->ijab", Lr, core.E, Lr, optimize=True)
    term2 = (
        LEL
        + G1 * psi_pair[None, :, None, :]
        + np.swapaxes(G1, -1, -2) * psi_pair[None, :, :, None]
        + X * psi_pair[None, :, :, None] * psi_pair[None, :, None, :]
    )
    Ycoef = np.einsum("jak,ikl->ijal", Lr, core.E, optimize=True) + (
        (psi_pair * s_pair)[None, :, :, None] * core.U
    )
    term3 = np.einsum("ijak,ikl,ijbl->ijab", Ycoef, core.F, Ycoef, optimize=True)
    gamma = np.einsum("jak,jbk->jab", Lr, Lr)
    gamma = gamma + psi_pair[:, None, :] * np.eye(2)[None]  # diag embed
    return gamma[None] - term2 + term3


# =========================================================================
# batched E-step statistics / likelihood over a stacked dataset
# =========================================================================

@dataclass
class EStats:
    """Posterior summaries the M-steps consume.

    m          : (n, 2r) posterior means
    psi_blocks : (n, r, 2, 2) diagonal 2x2 blocks of Psi = Omega + m m'
    Psi_bar    : (2r, 2r) average of Psi over subjects (None if not requested)
    loglik     : observed-data log-likelihood at the same parameters
                 (None if not requested)
    """

    m: np.ndarray
    psi_blocks: np.ndarray
    Psi_bar: Optional[np.ndarray]
    loglik: Optional[float]


def _prep_rhs(stacked: StackedData, B, sigma, s):
    """Residual segment sums and the scaled RHS vectors b (n, 2r)."""
    resid = stacked.residuals(B)
    resid0 = stacked.segment_sum(resid)
    resid1 = stacked.segment_sum(resid * stacked.g[:, None])
    b = np.empty((stacked.n, 2 * stacked.r))
    b[:, 0::2] = (s[0::2] / sigma)[None, :] * resid0
    b[:, 1::2] = (s[1::2] / sigma)[None, :] * resid1
    ssr = stacked.segment_sum(((resid**2) / sigma[None, :]).sum(axis=1)[:, None])[:, 0]
    return b, ssr


def _chunk_slices(n: int):
    return [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]


def _run_chunks(fn, slices, n_threads: int):
    """Map fn over chunk slices; order of results is fixed regardless of
    thread count, so reductions are bitwise reproducible."""
    if n_threads <= 1 or len(slices) <= 1:
        return [fn(lo, hi) for lo, hi in slices]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda se: fn(*se), slices))


def estep_batch(
    cov,
    sigma: np.ndarray,
    B: np.ndarray,
    stacked: StackedData,
    *,
    want_psibar: bool = True,
    want_loglik: bool = False,
    n_threads: int = 1,
) -> EStats:
    """E-step posterior statistics for every subject, chunk-parallel."""
    L, psi, s = _cov_internals(cov)
    r, n = stacked.r, stacked.n
    two_r = 2 * r
    K = L.shape[1]
    Lr = np.ascontiguousarray(L.reshape(r, 2, K))
    s_pair = s.reshape(r, 2)
    psi_pair = psi.reshape(r, 2)
    sLr = s_pair[:, :, None] * Lr
    apair = (s**2 * psi).reshape(r, 2)

    b, ssr = _prep_rhs(stacked, B, sigma, s)
    sumlogsig = float(np.sum(np.log(sigma)))

    m_out = np.empty((n, two_r))
    psi_blocks = np.empty((n, r, 2, 2))

    def work(lo, hi):
        core = _block_core(Lr, sLr, apair, sigma, stacked.A[lo:hi], subj_offset=lo)
        m_chunk = _apply_omega(L, psi, s, sLr, core, b[lo:hi])
        blocks = _omega_diag_blocks(Lr, psi_pair, s_pair, core)
        mr = m_chunk.reshape(hi - lo, r, 2)
        blocks = blocks + np.einsum("ija,ijb->ijab", mr, mr)
        out = {"lo": lo, "hi": hi, "m": m_chunk, "blocks": blocks}
        if want_psibar:
            out["Cbar"] = core.C.sum(axis=0)
            Yfull = np.einsum("ak,ikl->ial", L, core.E, optimize=True) + (
                (psi * s)[None, :, None] * core.U.reshape(hi - lo, two_r, K)
            )
            chol = np.linalg.cholesky(core.F)
            W = Yfull @ chol
            flat = W.transpose(1, 0, 2).reshape(two_r, -1)
            out["t3"] = flat @ flat.T
            out["mouter"] = m_chunk.T @ m_chunk
        if want_loglik:
            quad = ssr[lo:hi] - np.einsum("ij,ij->i", b[lo:hi], m_chunk)
            logdetV = (
                (stacked.T[lo:hi] - 2) * sumlogsig + core.logdet_M + core.logdet_IE
            )
            out["ll"] = -0.5 * float(np.sum(logdetV + quad))
        return out

    results = _run_chunks(work, _chunk_slices(n), n_threads)

    Cbar = np.zeros((r, 2, 2)) if want_psibar else None
    t3 = np.zeros((two_r, two_r)) if want_psibar else None
    mouter = np.zeros((two_r, two_r)) if want_psibar else None
    ll_sum = 0.0
    for res in results:
        m_out[res["lo"] : res["hi"]] = res["m"]
        psi_blocks[res["lo"] : res["hi"]] = res["blocks"]
        if want_psibar:
            Cbar += res["Cbar"]
            t3 += res["t3"]
            mouter += res["mouter"]
        if want_loglik:
            ll_sum += res["ll"]

    Psi_bar = None
    if want_psibar:
        Xbar = s_pair[:, :, None] * s_pair[:, None, :] * Cbar
        Ebar = np.einsum("jak,jab,jbl->kl", Lr, Xbar, Lr, optimize=True)
        XLf = np.einsum("jab,jbk->jak", Xbar, Lr).reshape(two_r, K)
        t_a = L @ Ebar @ L.T
        t_b = (L @ XLf.T) * psi[None, :]
        gamma_term = t_a + t_b + t_b.T
        # block-diagonal remainder of Gamma X Gamma
        diag_part = psi_pair[:, :, None] * psi_pair[:, None, :] * Xbar
        for a in range(2):
            for c in range(2):
                gamma_term[a::2, c::2][np.diag_indices(r)] += diag_part[:, a, c]
        Gamma = L @ L.T + np.diag(psi)
        Psi_bar = (n * Gamma - gamma_term + t3 + mouter) / n
        Psi_bar = 0.5 * (Psi_bar + Psi_bar.T)

    ll = None
    if want_loglik:
        ll = ll_sum - 0.5 * np.log(2.0 * np.pi) * r * stacked.n_obs
    return EStats(m=m_out, psi_blocks=psi_blocks, Psi_bar=Psi_bar, loglik=ll)


def loglik_stacked(cov, sigma, B, stacked: StackedData, n_threads: int = 1) -> float:
    """Observed-data log-likelihood (2*pi constant included)."""
    L, psi, s = _cov_internals(cov)
    r = stacked.r
    K = L.shape[1]
    Lr = np.ascontiguousarray(L.reshape(r, 2, K))
    sLr = s.reshape(r, 2)[:, :, None] * Lr
    apair = (s**2 * psi).reshape(r, 2)
    b, ssr = _prep_rhs(stacked, B, sigma, s)
    sumlogsig = float(np.sum(np.log(sigma)))

    def work(lo, hi):
        core = _block_core(Lr, sLr, apair, sigma, stacked.A[lo:hi], subj_offset=lo)
        m_chunk = _apply_omega(L, psi, s, sLr, core, b[lo:hi])
        quad = ssr[lo:hi] - np.einsum("ij,ij->i", b[lo:hi], m_chunk)
        logdetV = (stacked.T[lo:hi] - 2) * sumlogsig + core.logdet_M + core.logdet_IE
        return -0.5 * float(np.sum(logdetV + quad))

    parts = _run_chunks(work, _chunk_slices(stacked.n), n_threads)
    return float(sum(parts) - 0.5 * np.log(2.0 * np.pi) * r * stacked.n_obs)


def loglik(theta: ModelParams, data: LongitudinalDataset, n_threads: int = 1) -> float:
    """Observed-data log-likelihood of a fitted parameter set on a dataset."""
    stacked = StackedData(data)
    if stacked.r != theta.r:
        raise DimensionError("parameter/outcome dimension mismatch")
    return loglik_stacked(theta.cov, theta.sigma, theta.fixed.B, stacked, n_threads)


# =========================================================================
# per-subject posteriors (public API; dense Omega materialized)
# =========================================================================

def _subject_design(subject: Subject):
    return np.stack(
        [expand_design(subject.u, subject.w[t], subject.times[t])
         for t in range(subject.n_visits)]
    )


def _posterior_single(cov, sigma, B, subject: Subject) -> PosteriorMoments:
    L, psi, s = _cov_internals(cov)
    r = sigma.shape[0]
    two_r = 2 * r
    K = L.shape[1]
    if subject.y.shape[1] != r:
        raise DimensionError("subject outcome dimension mismatch")
    Lr = np.ascontiguousarray(L.reshape(r, 2, K))
    s_pair = s.reshape(r, 2)
    sLr = s_pair[:, :, None] * Lr
    apair = (s**2 * psi).reshape(r, 2)
    A = subject_cross_moment(subject.times)[None]
    core = _block_core(Lr, sLr, apair, sigma, A)

    X = _subject_design(subject)
    resid = subject.y - X @ B.T
    b = np.empty(two_r)
    b[0::2] = s[0::2] / sigma * resid.sum(axis=0)
    b[1::2] = s[1::2] / sigma * (resid * subject.times[:, None]).sum(axis=0)

    # dense Omega = Gamma - W' C W + (W' U) F (W' U)', W = D_s Gamma
    Gamma = L @ L.T + np.diag(psi)
    W = s[:, None] * Gamma
    CW = np.einsum("jab,jbm->jam", core.C[0], W.reshape(r, 2, two_r)).reshape(
        two_r, two_r
    )
    WU = W.T @ core.U[0].reshape(two_r, K)
    Omega = Gamma - W.T @ CW + WU @ core.F[0] @ WU.T
    Omega = 0.5 * (Omega + Omega.T)
    m = Omega @ b
    return PosteriorMoments.from_mean_cov(m, Omega)


def posterior_eta(theta: ModelParams, subject: Subject) -> PosteriorMoments:
    """Posterior moments of the standardized latent vector eta (scaled form)."""
    if not isinstance(theta.cov, ScaledCorrelation):
        raise TypeError("posterior_eta requires ScaledCorrelation parameters")
    return _posterior_single(theta.cov, theta.sigma, theta.fixed.B, subject)


def posterior_zeta(theta: ModelParams, subject: Subject) -> PosteriorMoments:
    """Posterior moments of the latent vector zeta (factor form)."""
    if not isinstance(theta.cov, FactorCovariance):
        raise TypeError("posterior_zeta requires FactorCovariance parameters")
    return _posterior_single(theta.cov, theta.sigma, theta.fixed.B, subject)


# =========================================================================
# dense reference implementations (testing only; size-guarded)
# =========================================================================

_ORACLE_MAX_LATENT = 200     # 2r cap for the posterior oracle
_ORACLE_MAX_STACKED = 400    # r * T cap per subject for the likelihood oracle


def posterior_direct_oracle(theta: ModelParams, subject: Subject) -> PosteriorMoments:
    """Brute-force posterior via one dense 2r x 2r inversion."""
    L, psi, s = _cov_internals(theta.cov)
    r = theta.r
    two_r = 2 * r
    if two_r > _ORACLE_MAX_LATENT:
        raise DimensionError(
            f"posterior oracle is limited to 2r <= {_ORACLE_MAX_LATENT}"
        )
    Gamma = L @ L.T + np.diag(psi)
    A = subject_cross_moment(subject.times)
    J = np.kron(np.diag(1.0 / theta.sigma), A)  # sum_t Z' Sigma^{-1} Z
    Omega = np.linalg.inv(
        np.linalg.inv(Gamma) + (s[:, None] * J * s[None, :])
    )
    X = _subject_design(subject)
    resid = subject.y - X @ theta.fixed.B.T
    h = np.empty(two_r)
    h[0::2] = resid.sum(axis=0) / theta.sigma
    h[1::2] = (resid * subject.times[:, None]).sum(axis=0) / theta.sigma
    m = Omega @ (s * h)
    return PosteriorMoments.from_mean_cov(m, Omega)


def loglik_direct_oracle(theta: ModelParams, data: LongitudinalDataset) -> float:
    """Brute-force log-likelihood from dense per-subject covariances."""
    L, psi, s = _cov_internals(theta.cov)
    r = theta.r
    G = (s[:, None] * (L @ L.T + np.diag(psi))) * s[None, :]
    total = 0.0
    for subject in data.subjects:
        T = subject.n_visits
        if r * T > _ORACLE_MAX_STACKED:
            raise DimensionError(
                f"likelihood oracle is limited to r*T <= {_ORACLE_MAX_STACKED}"
            )
        Zrows = [np.kron(np.eye(r), [1.0, subject.times[t]]) for t in range(T)]
        Z = np.vstack(Zrows)
        V = Z @ G @ Z.T + np.kron(np.eye(T), np.diag(theta.sigma))
        X = _subject_design(subject)
        resid = (subject.y - X @ theta.fixed.B.T).ravel()
        sign, logdet = np.linalg.slogdet(V)
        if sign <= 0:
            raise NumericalError(f"V not positive definite for subject {subject.id}")
        total += -0.5 * (
            logdet + resid @ np.linalg.solve(V, resid) + r * T * np.log(2 * np.pi)
        )
    return float(total)
