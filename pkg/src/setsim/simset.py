"""Set-to-set similarity functions over embedding sets.

Three trainable similarities between KxD embedding sets: MIL (max pairwise
cosine), smooth Chamfer (log-sum-exp smoothed bidirectional average), and
the assignment-based maximal matching score.  All differentiable paths are
built on numgrad Nodes; assignment masks are computed from detached values
so no gradient flows through the matching itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numgrad as ng
from .assign import Assignment, assignment_for, block_mask, hungarian_max
from .numgrad import Node

MIL = "mil"
SMOOTH_CHAMFER = "sc"
MAXMATCH = "maxmatch"


@dataclass(frozen=True)
class SimilarityKind:
    """Which set similarity to use; alpha is the smooth-Chamfer scale."""

    name: str
    alpha: float = 16.0

    def __post_init__(self):
        if self.name not in (MIL, SMOOTH_CHAMFER, MAXMATCH):
            raise ValueError(f"unknown similarity kind {self.name!r}")
        if self.name == SMOOTH_CHAMFER and not self.alpha > 0:
            raise ValueError(f"smooth-Chamfer scale must be positive, got {self.alpha}")

    @classmethod
    def mil(cls):
        return cls(MIL)

    @classmethod
    def smooth_chamfer(cls, alpha: float = 16.0):
        return cls(SMOOTH_CHAMFER, alpha)

    @classmethod
    def maxmatch(cls):
        return cls(MAXMATCH)


@dataclass
class EmbeddingSet:
    """K embeddings of one sample as a KxD matrix."""

    elements: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.float64)
        if self.elements.ndim != 2 or min(self.elements.shape) < 1:
            raise ValueError(f"embedding set needs a KxD matrix, got {self.elements.shape}")
        if self.normalized:
            norms = np.linalg.norm(self.elements, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("normalized flag set but rows are not unit norm")

    @property
    def k(self):
        return self.elements.shape[0]


def _as_set_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, EmbeddingSet):
        return ng.leaf(x.elements)
    return ng.leaf(np.asarray(x, dtype=np.float64))


def cosine_matrix(v, t) -> Node:
    """Pairwise cosine similarities between two sets, rows of v by rows of t."""
    vn = _as_set_node(v)
    tn = _as_set_node(t)
    if vn.shape[1] != tn.shape[1]:
        raise ng.ShapeMismatchError(
            f"sets have different dimensions: {vn.shape} vs {tn.shape}")
    return vn.l2_normalize() @ tn.l2_normalize().T


def mil_similarity(v, t) -> Node:
    """Max pairwise cosine; gradient reaches only the argmax pair."""
    c = cosine_matrix(v, t)
    return c.max(axis=1).max(axis=0)


def smooth_chamfer(v, t, alpha: float = 16.0) -> Node:
    """Log-sum-exp smoothed bidirectional average of pairwise cosines."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    c = cosine_matrix(v, t)
    k1, k2 = c.shape
    e = (alpha * c).exp()
    row_side = e.sum(axis=1).log().sum() * (1.0 / (2.0 * alpha * k1))
    col_side = e.sum(axis=0).log().sum() * (1.0 / (2.0 * alpha * k2))
    return row_side + col_side


def maxmatch_similarity(v, t) -> tuple[Node, Assignment]:
    """Similarity of the optimal one-to-one matching between equal-size sets.

    Returns (1/K) * sum over matched pairs of (exp(cos) - 1), with the
    matching chosen to maximize that amplified score (solved on detached
    exp-cosines, which is not always the plain trace-maximizing matching
    because exp is convex).  Gradients flow only through the K matched
    cosine entries.
    """
    c = cosine_matrix(v, t)
    k1, k2 = c.shape
    if k1 != k2:
        raise ValueError(f"maxmatch needs equal set sizes, got {k1} and {k2}")
    matched = hungarian_max(np.exp(c.value))
    asn = assignment_for(c.value, matched.perm)
    score = (c.mask_mul(asn.mask).exp() - 1.0).sum() * (1.0 / k1)
    return score, asn


def inference_topk(v, t, k: int | None = None) -> float:
    """Mean of the k largest pairwise cosines; evaluation-only, no graph.

    k defaults to the first set's size.
    """
    c = cosine_matrix(v, t).value
    if k is None:
        k = c.shape[0]
    if not 1 <= k <= c.size:
        raise ValueError(f"top-k must satisfy 1 <= k <= {c.size}, got {k}")
    flat = np.sort(c.reshape(-1))[::-1]
    return float(flat[:k].mean())


def pair_similarity(v, t, kind: SimilarityKind) -> Node:
    if kind.name == MIL:
        return mil_similarity(v, t)
    if kind.name == SMOOTH_CHAMFER:
        return smooth_chamfer(v, t, kind.alpha)
    return maxmatch_similarity(v, t)[0]


def _pool_matrices(n: int, n2: int, k: int):
    row_pool = np.zeros((n, n * k))
    for i in range(n):
        row_pool[i, i * k:(i + 1) * k] = 1.0
    col_pool = np.zeros((n2 * k, n2))
    for j in range(n2):
        col_pool[j * k:(j + 1) * k, j] = 1.0
    return row_pool, col_pool


def _block_argmax_mask(c: np.ndarray, n: int, n2: int, k: int) -> np.ndarray:
    blocks = c.reshape(n, k, n2, k).transpose(0, 2, 1, 3).reshape(n, n2, k * k)
    flat = np.argmax(blocks, axis=2)  # first occurrence = lowest flat index
    mask = np.zeros_like(c)
    rows = np.repeat(np.arange(n), n2) * k + (flat // k).reshape(-1)
    cols = np.tile(np.arange(n2), n) * k + (flat % k).reshape(-1)
    mask[rows, cols] = 1.0
    return mask


def batch_similarity_nodes(v_stack: Node, t_stack: Node, n: int, n2: int, k: int,
                           kind: SimilarityKind) -> Node:
    """N x N' similarity grid from stacked (N*K)xD and (N'*K)xD set nodes."""
    c = cosine_matrix(v_stack, t_stack)
    row_pool, col_pool = _pool_matrices(n, n2, k)
    rp, cp = ng.leaf(row_pool), ng.leaf(col_pool)
    if kind.name == MIL:
        picked = c.mask_mul(_block_argmax_mask(c.value, n, n2, k))
        return rp @ picked @ cp
    if kind.name == MAXMATCH:
        scored = c.mask_mul(block_mask(np.exp(c.value), k)).exp() - 1.0
        return (rp @ scored @ cp) * (1.0 / k)
    # smooth Chamfer
    a = kind.alpha
    e = (a * c).exp()
    row_side = rp @ (e @ cp).log() * (1.0 / (2.0 * a * k))
    col_side = (rp @ e).log() @ cp * (1.0 / (2.0 * a * k))
    return row_side + col_side


def stack_sets(sets: Sequence) -> tuple[np.ndarray, int, int]:
    mats = [s.elements if isinstance(s, EmbeddingSet) else np.asarray(s, dtype=np.float64)
            for s in sets]
    k, d = mats[0].shape
    for m in mats:
        if m.shape != (k, d):
            raise ValueError(f"heterogeneous set shapes: {m.shape} vs {(k, d)}")
    return np.concatenate(mats, axis=0), k, d


def batch_similarity(vs: Sequence, ts: Sequence, kind: SimilarityKind) -> Node:
    """Pairwise similarity grid between two collections of embedding sets."""
    v_stack, k, d = stack_sets(vs)
    t_stack, k2, d2 = stack_sets(ts)
    if (k2, d2) != (k, d):
        raise ValueError(f"collections disagree on set shape: {(k, d)} vs {(k2, d2)}")
    return batch_similarity_nodes(ng.leaf(v_stack), ng.leaf(t_stack),
                                  len(vs), len(ts), k, kind)


def cosine_blocks(vs: Sequence, ts: Sequence) -> np.ndarray:
    """Evaluation-only (N, N', Kv, Kt) array of pairwise cosines.

    Query and gallery collections may use different set sizes.
    """
    v_stack, kv, _ = stack_sets(vs)
    t_stack, kt, _ = stack_sets(ts)
    vn = v_stack / np.maximum(np.linalg.norm(v_stack, axis=1, keepdims=True), ng.L2_EPS)
    tn = t_stack / np.maximum(np.linalg.norm(t_stack, axis=1, keepdims=True), ng.L2_EPS)
    c = vn @ tn.T
    return c.reshape(len(vs), kv, len(ts), kt).transpose(0, 2, 1, 3)


def batch_topk(vs: Sequence, ts: Sequence, k: int) -> np.ndarray:
    """Evaluation-only N x N' grid of mean-of-top-k pairwise cosines."""
    blocks = cosine_blocks(vs, ts)
    n, n2, kv, kt = blocks.shape
    if not 1 <= k <= kv * kt:
        raise ValueError(f"top-k must satisfy 1 <= k <= {kv * kt}, got {k}")
    flat = blocks.reshape(n, n2, kv * kt)
    part = np.sort(flat, axis=2)[:, :, ::-1][:, :, :k]
    return part.mean(axis=2)
