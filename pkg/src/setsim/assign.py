"""Exact maximization linear assignment on square similarity blocks.

`hungarian_max` is an O(K^3) shortest-augmenting-path solver run on the
negated matrix; `brute_force_assignment` enumerates all permutations and
serves as its oracle.  `block_assign` applies the solver independently to
every KxK block of a stacked batch similarity matrix.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BRUTE_FORCE_MAX_K = 8


@dataclass(frozen=True)
class Assignment:
    """A permutation matching rows to columns of a square similarity matrix.

    perm[m] is the column matched to row m; score is the sum of matched
    similarities; mask is the KxK 0/1 matrix with ones at (m, perm[m]).
    """

    perm: tuple
    score: float

    @property
    def mask(self) -> np.ndarray:
        k = len(self.perm)
        m = np.zeros((k, k))
        m[np.arange(k), list(self.perm)] = 1.0
        return m


def _score(sim: np.ndarray, perm) -> float:
    k = sim.shape[0]
    return float(np.sum(sim[np.arange(k), list(perm)]))


def _check_square(sim) -> np.ndarray:
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"assignment needs a square matrix, got shape {s.shape}")
    if s.shape[0] < 1:
        raise ValueError("assignment needs at least one row")
    if np.isnan(s).any():
        raise ValueError("assignment matrix contains NaN entries")
    return s


def hungarian_max(sim) -> Assignment:
    """Maximum-score assignment via Kuhn-Munkres on the negated matrix."""
    s = _check_square(sim)
    perm = _solve_min(-s)
    return Assignment(perm=tuple(perm), score=_score(s, perm))


def assignment_for(sim, perm) -> Assignment:
    """Assignment of a given permutation scored against `sim`."""
    s = _check_square(sim)
    return Assignment(perm=tuple(int(p) for p in perm), score=_score(s, perm))


def _solve_min(cost: np.ndarray):
    """Shortest augmenting path with potentials; returns perm (row -> col)."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.intp)  # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.intp)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


@lru_cache(maxsize=None)
def _all_perms(k: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(k))), dtype=np.intp)


def brute_force_assignment(sim) -> Assignment:
    """Exhaustive maximum over all K! permutations; ties pick the
    lexicographically smallest permutation.  Guarded to K <= 8."""
    s = _check_square(sim)
    k = s.shape[0]
    if k > BRUTE_FORCE_MAX_K:
        raise ValueError(
            f"brute_force_assignment is limited to K <= {BRUTE_FORCE_MAX_K}, got K = {k}")
    perms = _all_perms(k)
    scores = s[np.arange(k), perms].sum(axis=1)
    best = int(np.argmax(scores))  # first occurrence = lexicographically smallest
    perm = perms[best]
    return Assignment(perm=tuple(int(p) for p in perm), score=_score(s, perm))


def block_assign(batch_sim, k: int):
    """Solve each KxK block of an (N*K)x(N'*K) matrix independently.

    Returns an N x N' nested list of Assignments.  Small blocks take a
    vectorized exact-enumeration path; the result satisfies the same
    contract as per-block hungarian_max (maximal score, deterministic).
    """
    s = np.asarray(batch_sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] % k or s.shape[1] % k:
        raise ValueError(
            f"batch similarity shape {s.shape} is not divisible into {k}x{k} blocks")
    n, n2 = s.shape[0] // k, s.shape[1] // k
    blocks = s.reshape(n, k, n2, k).transpose(0, 2, 1, 3)

    if k <= 6:
        perms = _all_perms(k)  # (P, k), lexicographic order
        # scores[i, j, p] = sum_m blocks[i, j, m, perms[p, m]]
        scores = blocks[:, :, np.arange(k), perms].sum(axis=3)
        best = np.argmax(scores, axis=2)
        grid = [[Assignment(perm=tuple(int(c) for c in perms[best[i, j]]),
                            score=_score(blocks[i, j], perms[best[i, j]]))
                 for j in range(n2)] for i in range(n)]
        return grid
    return [[hungarian_max(blocks[i, j]) for j in range(n2)] for i in range(n)]


def block_mask(batch_sim, k: int) -> np.ndarray:
    """Full-size 0/1 mask selecting each block's optimal matching."""
    s = np.asarray(batch_sim, dtype=np.float64)
    grid = block_assign(s, k)
    mask = np.zeros_like(s)
    for i, row in enumerate(grid):
        for j, asn in enumerate(row):
            mask[i * k:(i + 1) * k, j * k:(j + 1) * k] = asn.mask
    return mask
