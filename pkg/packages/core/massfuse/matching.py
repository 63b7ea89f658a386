"""Nearest-neighbour donor search from Sample B, with replacement.

Ties are broken by the lowest B-row index in both the k-d tree search and the
exhaustive scan, so the two always agree.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from massfuse.errors import DimensionError, DonorPoolError
from massfuse.frame import BigSample, GFunction, g_values

log = logging.getLogger(__name__)

# above this many covariates the tree is slower than a scan
_TREE_MAX_DIM = 20


@dataclass(frozen=True, eq=False)
class MatchResult:
    donor_indices: np.ndarray  # (n, k) B-row positions, nearest first
    distances: np.ndarray  # (n, k) Euclidean
    k: int

    def __len__(self) -> int:
        return int(self.donor_indices.shape[0])

    def head(self, k: int) -> MatchResult:
        """The first k donors of every list."""
        if not 1 <= k <= self.k:
            raise DonorPoolError(f"cannot take {k} donors from a {self.k}-NN match")
        return MatchResult(self.donor_indices[:, :k], self.distances[:, :k], k)

    def first(self) -> MatchResult:
        return self.head(1)

    def to_frame(self, a_ids: np.ndarray, b_ids: np.ndarray) -> pd.DataFrame:
        """Long table of (a_id, rank, donor_id, distance), rank starting at 1."""
        n, k = self.donor_indices.shape
        return pd.DataFrame(
            {
                "a_id": np.repeat(np.asarray(a_ids), k),
                "rank": np.tile(np.arange(1, k + 1), n),
                "donor_id": np.asarray(b_ids)[self.donor_indices.ravel()],
                "distance": self.distances.ravel(),
            }
        )


def _prepare(
    a_covariates: np.ndarray, b_covariates: np.ndarray, k: int, standardize: bool
) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(a_covariates, dtype=float))
    b = np.atleast_2d(np.asarray(b_covariates, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"Sample A has {a.shape[1]} covariates, Sample B has {b.shape[1]}")
    if not 1 <= k <= b.shape[0]:
        raise DonorPoolError(f"requested k={k} donors from a pool of {b.shape[0]}")
    if standardize:
        center = b.mean(axis=0)
        scale = b.std(axis=0)
        scale[scale == 0.0] = 1.0
        a = (a - center) / scale
        b = (b - center) / scale
    return a, b


def _squared_distances(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    # fixed accumulation order so tree and scan produce identical bits
    acc = np.zeros(rows.shape[0])
    for j in range(query.shape[0]):
        diff = rows[:, j] - query[j]
        acc += diff * diff
    return acc


def _nearest(candidates: np.ndarray, sq: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((candidates, sq))[:k]
    return candidates[order], sq[order]


def _scan(a: np.ndarray, b: np.ndarray, k: int) -> MatchResult:
    n = a.shape[0]
    donors = np.empty((n, k), dtype=np.int64)
    sq_out = np.empty((n, k))
    everyone = np.arange(b.shape[0], dtype=np.int64)
    for i in range(n):
        sq = _squared_distances(b, a[i])
        kth = np.partition(sq, k - 1)[k - 1]
        keep = sq <= kth
        donors[i], sq_out[i] = _nearest(everyone[keep], sq[keep], k)
    return MatchResult(donors, np.sqrt(sq_out), k)


class DonorIndex:
    """k-d tree over Sample B covariates. Immutable once built."""

    def __init__(self, b_covariates: np.ndarray):
        self.points = np.ascontiguousarray(np.atleast_2d(np.asarray(b_covariates, dtype=float)))
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if self.points.shape[1] <= _TREE_MAX_DIM else None

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    def query(self, a_covariates: np.ndarray, k: int) -> MatchResult:
        a = np.atleast_2d(np.asarray(a_covariates, dtype=float))
        if a.shape[1] != self.points.shape[1]:
            raise DimensionError(f"Sample A has {a.shape[1]} covariates, Sample B has {self.points.shape[1]}")
        if not 1 <= k <= self.size:
            raise DonorPoolError(f"requested k={k} donors from a pool of {self.size}")
        if self._tree is None:
            return _scan(a, self.points, k)

        # the tree finds the k-th distance; a slightly wider ball then collects
        # every tied candidate so the exact tie rule can be applied
        dist, _ = self._tree.query(a, k=k)
        kth = np.asarray(dist, dtype=float).reshape(a.shape[0], k)[:, -1]
        balls = self._tree.query_ball_point(a, r=kth * (1.0 + 1e-9) + 1e-12, return_sorted=False)

        n = a.shape[0]
        donors = np.empty((n, k), dtype=np.int64)
        sq_out = np.empty((n, k))
        for i in range(n):
            cand = np.asarray(balls[i], dtype=np.int64)
            sq = _squared_distances(self.points[cand], a[i])
            donors[i], sq_out[i] = _nearest(cand, sq, k)
        return MatchResult(donors, np.sqrt(sq_out), k)


def match_knn(
    a_covariates: np.ndarray, b_covariates: np.ndarray, k: int = 1, *, standardize: bool = False
) -> MatchResult:
    """The k nearest Sample B rows for every Sample A row (Euclidean, with replacement)."""
    a, b = _prepare(a_covariates, b_covariates, k, standardize)
    return DonorIndex(b).query(a, k)


def match_knn_bruteforce(
    a_covariates: np.ndarray, b_covariates: np.ndarray, k: int = 1, *, standardize: bool = False
) -> MatchResult:
    """Exhaustive-scan oracle for match_knn."""
    a, b = _prepare(a_covariates, b_covariates, k, standardize)
    return _scan(a, b, k)


def impute_values(match: MatchResult, b_sample: BigSample, g: GFunction) -> np.ndarray:
    """Mean of g over each A-unit's donors."""
    if match.donor_indices.size and match.donor_indices.max() >= b_sample.n:
        raise DonorPoolError("match refers to donors outside this Sample B")
    donor_g = g_values(g, b_sample.frame.y)[match.donor_indices]
    return donor_g.mean(axis=1)
