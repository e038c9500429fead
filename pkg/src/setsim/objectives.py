"""Training losses: hardest-negative triplet, the two margin-exponential
pushing losses (global-discriminative and intra-set divergence), the slot
diversity regularizer, Gaussian MMD, and symmetric InfoNCE, combined into
one weighted objective with a per-term breakdown."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from . import numgrad as ng
from .numgrad import Node
from .simset import SimilarityKind, batch_similarity_nodes

BIG_NEGATIVE = 1e6


@dataclass
class LossConfig:
    """Margins, scales and term weights of the combined objective."""

    delta1: float = 0.2          # triplet margin
    delta2: float = 0.6          # global-discriminative margin
    delta3: float = 0.6          # intra-set divergence margin
    s: float = 0.5               # exponential scale of the pushing losses
    lambda_gd: float = 0.1
    lambda_isd: float = 0.1
    lambda_mmd: float = 0.01
    lambda_div: float = 0.01
    lambda_con: float = 0.0
    tau: float = 0.05            # contrastive temperature
    mmd_bandwidth: Union[float, str] = "median"

    def __post_init__(self):
        for name in ("delta1", "delta2", "delta3"):
            m = getattr(self, name)
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {m}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lambda_gd", "lambda_isd", "lambda_mmd", "lambda_div", "lambda_con"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if isinstance(self.mmd_bandwidth, str):
            if self.mmd_bandwidth != "median":
                raise ValueError(f"mmd_bandwidth must be positive or 'median', "
                                 f"got {self.mmd_bandwidth!r}")
        elif not self.mmd_bandwidth > 0:
            raise ValueError(f"mmd_bandwidth must be positive, got {self.mmd_bandwidth}")

    def to_dict(self):
        return asdict(self)


@dataclass
class BatchEmbeddings:
    """One training batch: paired image/text embedding sets plus the global
    features and pre-fusion residual slots each loss term consumes.

    Set and residual matrices are stacked (N*K)xD nodes; index i of the
    image side is the positive pair of index i of the text side.
    """

    image_sets: Node
    text_sets: Node
    image_globals: Node
    text_globals: Node
    image_residuals: Node
    text_residuals: Node
    n: int
    k: int


def _diag_mask(n):
    return np.eye(n)


def triplet_hardest(sim: Node, delta1: float) -> Node:
    """Hinge triplet loss with hardest in-batch negatives, both directions.

    The diagonal holds positive-pair scores; negatives exclude it.
    """
    n, n2 = sim.shape
    if n != n2 or n < 2:
        raise ValueError(f"triplet needs a square similarity matrix with N >= 2, "
                         f"got shape {sim.shape}")
    eye = _diag_mask(n)
    off = ng.leaf(-BIG_NEGATIVE * eye)
    diag_col = sim.mask_mul(eye).sum(axis=1)            # (N,1) positives
    hardest_row = (sim + off).max(axis=1)               # (N,1) best negative per image
    hardest_col = (sim + off).max(axis=0)               # (1,N) best negative per text
    row_side = (hardest_row - diag_col + delta1).relu().sum()
    col_side = (hardest_col - sim.mask_mul(eye).sum(axis=0) + delta1).relu().sum()
    return row_side + col_side


def triplet_mean_negatives(sim: Node, delta1: float) -> Node:
    """Warmup variant: hinge averaged over all negatives instead of the hardest."""
    n, n2 = sim.shape
    if n != n2 or n < 2:
        raise ValueError(f"triplet needs a square similarity matrix with N >= 2, "
                         f"got shape {sim.shape}")
    eye = _diag_mask(n)
    diag_col = sim.mask_mul(eye).sum(axis=1)
    diag_row = sim.mask_mul(eye).sum(axis=0)
    row_hinges = (sim - diag_col + delta1).relu().mask_mul(1.0 - eye)
    col_hinges = (sim - diag_row + delta1).relu().mask_mul(1.0 - eye)
    return (row_hinges.sum() + col_hinges.sum()) * (1.0 / (n - 1))


def _gd_modality(sets: Node, globals_: Node, k: int, delta2: float, s: float) -> Node:
    n = globals_.shape[0]
    if sets.shape[0] != n * k:
        raise ValueError(f"sets shape {sets.shape} does not match {n} globals "
                         f"with set size {k}")
    own_global = globals_.l2_normalize().gather_rows(np.repeat(np.arange(n), k))
    cos = (sets.l2_normalize() * own_global).sum(axis=1)   # (N*K, 1)
    return (s * (cos - delta2)).exp().mean()


def global_discriminative(batch: BatchEmbeddings, delta2: float, s: float) -> Node:
    """Mean exponential margin penalty between each set element and its own
    sample's global feature, averaged over the two modalities."""
    img = _gd_modality(batch.image_sets, batch.image_globals, batch.k, delta2, s)
    txt = _gd_modality(batch.text_sets, batch.text_globals, batch.k, delta2, s)
    return (img + txt) * 0.5


def _strict_upper_block_mask(n, k):
    mask = np.zeros((n * k, n * k))
    tri = np.triu(np.ones((k, k)), k=1)
    for i in range(n):
        mask[i * k:(i + 1) * k, i * k:(i + 1) * k] = tri
    return mask


def _isd_modality(sets: Node, n: int, k: int, delta3: float, s: float) -> Node:
    gram = sets.l2_normalize() @ sets.l2_normalize().T
    selected = (s * gram).exp().mask_mul(_strict_upper_block_mask(n, k))
    norm = 2.0 / (k * (k - 1))
    return selected.sum() * (np.exp(-s * delta3) * norm / n)


def intra_set_divergence(batch: BatchEmbeddings, delta3: float, s: float) -> Node:
    """Exponential penalty on pairwise within-set similarity, averaged over
    unordered element pairs and the batch; the two modalities' per-sample
    terms are summed."""
    if batch.k < 2:
        raise ValueError(f"intra-set divergence needs K >= 2, got K = {batch.k}")
    img = _isd_modality(batch.image_sets, batch.n, batch.k, delta3, s)
    txt = _isd_modality(batch.text_sets, batch.n, batch.k, delta3, s)
    return img + txt


def _full_block_mask(n, k):
    mask = np.zeros((n * k, n * k))
    for i in range(n):
        mask[i * k:(i + 1) * k, i * k:(i + 1) * k] = 1.0
    return mask


def diversity_regularizer(residuals: Node, n: int, k: int) -> Node:
    """Mean squared Frobenius distance of each sample's normalized residual
    Gram matrix from the identity."""
    norm = residuals.l2_normalize()
    gram = norm @ norm.T
    centered = (gram + ng.leaf(-np.eye(n * k))).mask_mul(_full_block_mask(n, k))
    return (centered * centered).sum() * (1.0 / n)


def _sq_dists(a: Node, b: Node) -> Node:
    sa = (a * a).sum(axis=1)                     # (N,1)
    sb = (b * b).sum(axis=1)                     # (M,1)
    cross = a @ b.T
    ones_row = ng.leaf(np.ones((1, b.shape[0])))
    ones_col = ng.leaf(np.ones((a.shape[0], 1)))
    return sa @ ones_row + ones_col @ sb.T - 2.0 * cross


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance of the pooled sample; falls back to 1.0 when
    all points coincide."""
    z = np.concatenate([x, y], axis=0)
    sq = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
    upper = sq[np.triu_indices(len(z), k=1)]
    med = float(np.median(upper)) if upper.size else 0.0
    return float(np.sqrt(med)) if med > 0 else 1.0


def mmd_gaussian(x: Node, y: Node, bandwidth: Union[float, str] = "median") -> Node:
    """Biased V-statistic squared MMD with a Gaussian kernel."""
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd needs nonempty samples")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"mmd dimensions differ: {x.shape} vs {y.shape}")
    if bandwidth == "median":
        h = median_bandwidth(x.value, y.value)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {h}")
    scale = -1.0 / (2.0 * h * h)

    def kmean(a, b):
        return (scale * _sq_dists(a, b)).exp().mean()

    return kmean(x, x) + kmean(y, y) - 2.0 * kmean(x, y)


def contrastive_infonce(sim: Node, tau: float) -> Node:
    """Symmetric InfoNCE over a square score matrix with positives on the
    diagonal."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n, n2 = sim.shape
    if n != n2:
        raise ValueError(f"contrastive loss needs a square matrix, got {sim.shape}")
    eye = _diag_mask(n)
    p_row = ((1.0 / tau) * sim).softmax().mask_mul(eye).sum(axis=1).log().sum()
    p_col = ((1.0 / tau) * sim.T).softmax().mask_mul(eye).sum(axis=1).log().sum()
    return (p_row + p_col) * (-1.0 / (2.0 * n))


def combined_loss(batch: BatchEmbeddings, cfg: LossConfig, kind: SimilarityKind,
                  warmup: bool = False) -> tuple[Node, dict]:
    """Weighted sum of the enabled terms plus an unweighted breakdown.

    Terms with a zero weight are not built.  `warmup` swaps the hardest
    negative for the mean over negatives.
    """
    sim = batch_similarity_nodes(batch.image_sets, batch.text_sets,
                                 batch.n, batch.n, batch.k, kind)
    tri = triplet_mean_negatives(sim, cfg.delta1) if warmup \
        else triplet_hardest(sim, cfg.delta1)
    total = tri
    breakdown = {"triplet": tri.item()}
    if cfg.lambda_gd > 0:
        gd = global_discriminative(batch, cfg.delta2, cfg.s)
        total = total + cfg.lambda_gd * gd
        breakdown["gd"] = gd.item()
    if cfg.lambda_isd > 0:
        isd = intra_set_divergence(batch, cfg.delta3, cfg.s)
        total = total + cfg.lambda_isd * isd
        breakdown["isd"] = isd.item()
    if cfg.lambda_mmd > 0:
        mmd = mmd_gaussian(batch.image_sets, batch.text_sets, cfg.mmd_bandwidth)
        total = total + cfg.lambda_mmd * mmd
        breakdown["mmd"] = mmd.item()
    if cfg.lambda_div > 0:
        div = (diversity_regularizer(batch.image_residuals, batch.n, batch.k)
               + diversity_regularizer(batch.text_residuals, batch.n, batch.k)) * 0.5
        total = total + cfg.lambda_div * div
        breakdown["div"] = div.item()
    if cfg.lambda_con > 0:
        con = contrastive_infonce(sim, cfg.tau)
        total = total + cfg.lambda_con * con
        breakdown["con"] = con.item()
    breakdown["total"] = total.item()
    return total, breakdown
