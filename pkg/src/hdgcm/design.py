"""Stacked array views of a dataset plus the sufficient statistics the EM
updates reuse every iteration.

All (subject, visit) rows are concatenated in subject order, so per-subject
reductions are contiguous-segment sums (np.add.reduceat).  Everything here is
computed once per fit; the arrays are treated as read-only afterwards.
"""

from __future__ import annotations

import numpy as np

from .model import LongitudinalDataset


class StackedData:
    """Flat observation arrays and per-subject/ global cross moments.

    Y : (N, r) responses            X : (N, p) expanded design rows
    g : (N,)   visit times          subj : (N,) subject index per row
    ptr : (n+1,) segment boundaries (rows of subject i live in
          [ptr[i], ptr[i+1]))
    A : (n, 2, 2) per-subject sum_t (1, g)'(1, g)

    The x-vector column layout is (1 | u | w | g | u*g); ``n_b1`` gives the
    size of the leading intercept block, the remaining ``1 + p1`` columns are
    the time-slope block.
    """

    def __init__(self, data: LongitudinalDataset):
        self.dataset = data
        subs = data.subjects
        self.n = data.n
        self.r = data.r
        self.p1 = data.p_time_invariant
        self.p2 = data.p_time_varying
        self.p = data.p
        self.n_b1 = 1 + self.p1 + self.p2
        self.ids = [s.id for s in subs]

        self.T = np.array([s.n_visits for s in subs], dtype=np.int64)
        self.ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.T, out=self.ptr[1:])
        N = int(self.ptr[-1])
        self.n_obs = N

        self.g = np.concatenate([s.times for s in subs])
        self.Y = np.concatenate([s.y for s in subs], axis=0)
        u_rows = np.concatenate(
            [np.repeat(s.u[None, :], s.n_visits, axis=0) for s in subs], axis=0
        )
        w_rows = np.concatenate([s.w for s in subs], axis=0)
        self.subj = np.repeat(np.arange(self.n), self.T)

        X = np.empty((N, self.p))
        X[:, 0] = 1.0
        X[:, 1 : 1 + self.p1] = u_rows
        X[:, 1 + self.p1 : self.n_b1] = w_rows
        X[:, self.n_b1] = self.g
        X[:, self.n_b1 + 1 :] = u_rows * self.g[:, None]
        self.X = X

        # per-subject cross moments of (1, g)
        sum_g = self.segment_sum(self.g[:, None])[:, 0]
        sum_g2 = self.segment_sum((self.g**2)[:, None])[:, 0]
        A = np.empty((self.n, 2, 2))
        A[:, 0, 0] = self.T
        A[:, 0, 1] = sum_g
        A[:, 1, 0] = sum_g
        A[:, 1, 1] = sum_g2
        self.A = A

        # per-subject design sums reused by the closed-form updates
        self.sum_x = self.segment_sum(X)            # (n, p)
        self.sum_gx = self.segment_sum(X * self.g[:, None])
        self.sum_y = self.segment_sum(self.Y)       # (n, r)
        self.sum_gy = self.segment_sum(self.Y * self.g[:, None])

        # global Gram/cross matrices
        self.gram_x = X.T @ X                        # (p, p)
        self.yx = self.Y.T @ X                       # (r, p)

    # ------------------------------------------------------------------
    def segment_sum(self, rows: np.ndarray) -> np.ndarray:
        """Sum rows within each subject segment -> (n, ...)."""
        return np.add.reduceat(rows, self.ptr[:-1], axis=0)

    def residuals(self, B: np.ndarray) -> np.ndarray:
        """Y - X B' for a coefficient matrix B of shape (r, p)."""
        return self.Y - self.X @ B.T
