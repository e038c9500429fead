import math

import numpy as np
import pytest

from setsim import numgrad as ng
from setsim.objectives import (BatchEmbeddings, LossConfig, combined_loss,
                               contrastive_infonce, diversity_regularizer,
                               global_discriminative, intra_set_divergence,
                               mmd_gaussian, triplet_hardest,
                               triplet_mean_negatives)
from setsim.simset import SimilarityKind


def make_batch(seed, n=3, k=4, d=8):
    rng = np.random.default_rng(seed)
    unit = lambda m: m / np.linalg.norm(m, axis=1, keepdims=True)
    return BatchEmbeddings(
        image_sets=ng.leaf(unit(rng.normal(size=(n * k, d)))),
        text_sets=ng.leaf(unit(rng.normal(size=(n * k, d)))),
        image_globals=ng.leaf(rng.normal(size=(n, d))),
        text_globals=ng.leaf(rng.normal(size=(n, d))),
        image_residuals=ng.leaf(rng.normal(size=(n * k, d))),
        text_residuals=ng.leaf(rng.normal(size=(n * k, d))),
        n=n, k=k)


# -- triplet -----------------------------------------------------------------

def test_triplet_all_hinges_inactive():
    sim = ng.leaf([[0.9, 0.1], [0.2, 0.8]])
    assert triplet_hardest(sim, 0.2).item() == 0.0


def test_triplet_hand_value():
    sim = ng.leaf([[0.5, 0.6], [0.4, 0.7]])
    assert triplet_hardest(sim, 0.2).item() == pytest.approx(0.5, abs=1e-12)


def test_triplet_zero_margin_separable():
    sim = ng.leaf([[0.9, 0.1, 0.0], [0.2, 0.8, 0.1], [0.0, 0.3, 0.7]])
    assert triplet_hardest(sim, 0.0).item() == 0.0


def test_triplet_rejects_small_batch():
    with pytest.raises(ValueError, match="N >= 2"):
        triplet_hardest(ng.leaf([[1.0]]), 0.2)


def test_triplet_gradient_only_on_active_hinges():
    sim = ng.leaf([[0.9, 0.1], [0.2, 0.8]])  # inactive everywhere
    loss = triplet_hardest(sim, 0.05)
    loss.backward()
    np.testing.assert_array_equal(sim.grad, np.zeros((2, 2)))


def test_triplet_mean_negatives_hand_value():
    # row hinges (j != i): [0.2+0.6-0.5]=0.3, [0.2+0.4-0.7]=0 -> mean over 1 neg each
    # col hinges: [0.2+0.4-0.5]=0.1, [0.2+0.6-0.7]=0.1
    sim = ng.leaf([[0.5, 0.6], [0.4, 0.7]])
    assert triplet_mean_negatives(sim, 0.2).item() == pytest.approx(0.5, abs=1e-12)


def test_triplet_mean_vs_hardest_three_way():
    rng = np.random.default_rng(0)
    sim_v = rng.uniform(-1, 1, size=(4, 4))
    hard = triplet_hardest(ng.leaf(sim_v), 0.2).item()
    mean = triplet_mean_negatives(ng.leaf(sim_v), 0.2).item()
    assert mean <= hard + 1e-12  # hardest negative dominates the average


# -- global discriminative -----------------------------------------------------

def gd_loop_oracle(batch, delta2, s):
    total = 0.0
    for sets, globals_ in ((batch.image_sets.value, batch.image_globals.value),
                           (batch.text_sets.value, batch.text_globals.value)):
        n = globals_.shape[0]
        k = sets.shape[0] // n
        terms = []
        for i in range(n):
            g = globals_[i] / np.linalg.norm(globals_[i])
            for kk in range(k):
                row = sets[i * k + kk]
                cos = float(np.dot(row / np.linalg.norm(row), g))
                terms.append(math.exp(s * (cos - delta2)))
        total += 0.5 * float(np.mean(terms))
    return total


def test_gd_all_slots_at_margin():
    # cos(slot, global) == delta2 for every slot -> every term is exp(0) = 1
    k, d = 2, 4
    delta2 = 0.6
    g = np.zeros(d)
    g[0] = 1.0
    slot = np.array([delta2, math.sqrt(1 - delta2 ** 2), 0.0, 0.0])
    sets = np.tile(slot, (k, 1))
    batch = BatchEmbeddings(
        image_sets=ng.leaf(sets), text_sets=ng.leaf(sets),
        image_globals=ng.leaf(g), text_globals=ng.leaf(g),
        image_residuals=ng.leaf(sets), text_residuals=ng.leaf(sets), n=1, k=k)
    assert global_discriminative(batch, delta2, 0.5).item() == pytest.approx(1.0, abs=1e-12)


def test_gd_single_term_arithmetic():
    # one modality contribution with N=1, K=1 and cos=1: exp(s*(1-delta2))
    from setsim.objectives import _gd_modality
    g = np.array([[2.0, 0.0]])
    sets = ng.leaf([[1.0, 0.0]])
    val = _gd_modality(sets, ng.leaf(g), 1, 0.6, 0.5)
    assert val.item() == pytest.approx(math.exp(0.2), abs=1e-12)
    assert val.item() == pytest.approx(1.2214, abs=1e-4)


def test_gd_matches_loop_oracle():
    batch = make_batch(1)
    got = global_discriminative(batch, 0.6, 0.5).item()
    assert got == pytest.approx(gd_loop_oracle(batch, 0.6, 0.5), abs=1e-12)


def test_gd_monotone_in_margin_and_cosine():
    batch = make_batch(2)
    lo = global_discriminative(batch, 0.7, 0.5).item()
    hi = global_discriminative(batch, 0.5, 0.5).item()
    assert lo < hi  # strictly decreasing in the margin
    # nudging one set row toward its own global raises the loss
    moved = batch.image_sets.value.copy()
    g = batch.image_globals.value[0]
    moved[0] = moved[0] + 0.2 * g / np.linalg.norm(g)
    bumped = BatchEmbeddings(ng.leaf(moved), batch.text_sets, batch.image_globals,
                             batch.text_globals, batch.image_residuals,
                             batch.text_residuals, batch.n, batch.k)
    assert global_discriminative(bumped, 0.6, 0.5).item() > \
        global_discriminative(batch, 0.6, 0.5).item()


# -- intra-set divergence --------------------------------------------------------

def isd_loop_oracle(batch, delta3, s):
    n, k = batch.n, batch.k
    per_sample = []
    for i in range(n):
        acc = 0.0
        for sets in (batch.image_sets.value, batch.text_sets.value):
            rows = sets[i * k:(i + 1) * k]
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            for j in range(k - 1):
                for m in range(j + 1, k):
                    acc += math.exp(s * (float(rows[j] @ rows[m]) - delta3))
        per_sample.append(2.0 / (k * (k - 1)) * acc)
    return float(np.mean(per_sample))


def test_isd_pairs_at_margin():
    d3 = 0.4
    a = np.array([1.0, 0.0])
    b = np.array([d3, math.sqrt(1 - d3 ** 2)])
    sets = np.stack([a, b])
    batch = BatchEmbeddings(
        image_sets=ng.leaf(sets), text_sets=ng.leaf(sets),
        image_globals=ng.leaf(a), text_globals=ng.leaf(a),
        image_residuals=ng.leaf(sets), text_residuals=ng.leaf(sets), n=1, k=2)
    assert intra_set_divergence(batch, d3, 1.0).item() == pytest.approx(2.0, abs=1e-12)


def test_isd_orthogonal_slots():
    sets = np.eye(2)
    batch = BatchEmbeddings(
        image_sets=ng.leaf(sets), text_sets=ng.leaf(sets),
        image_globals=ng.leaf(sets[:1]), text_globals=ng.leaf(sets[:1]),
        image_residuals=ng.leaf(sets), text_residuals=ng.leaf(sets), n=1, k=2)
    assert intra_set_divergence(batch, 0.0, 1.0).item() == pytest.approx(2.0, abs=1e-12)


def test_isd_matches_loop_oracle():
    batch = make_batch(3)
    got = intra_set_divergence(batch, 0.6, 0.5).item()
    assert got == pytest.approx(isd_loop_oracle(batch, 0.6, 0.5), abs=1e-12)


def test_isd_rejects_singleton_sets():
    batch = make_batch(4, k=1)
    with pytest.raises(ValueError, match="K >= 2"):
        intra_set_divergence(batch, 0.6, 0.5)


def test_isd_collapsed_exceeds_orthogonal_by_exp_s():
    s = 0.5
    k, d = 3, 4
    collapsed = np.tile(np.eye(d)[:1], (k, 1))
    orthogonal = np.eye(d)[:k]

    def isd_of(sets):
        batch = BatchEmbeddings(
            image_sets=ng.leaf(sets), text_sets=ng.leaf(sets),
            image_globals=ng.leaf(sets[:1]), text_globals=ng.leaf(sets[:1]),
            image_residuals=ng.leaf(sets), text_residuals=ng.leaf(sets), n=1, k=k)
        return intra_set_divergence(batch, 0.6, s).item()

    ratio = isd_of(collapsed) / isd_of(orthogonal)
    assert ratio == pytest.approx(math.exp(s), rel=1e-9)


# -- diversity regularizer --------------------------------------------------------

def div_gram_oracle(residuals, n, k):
    vals = []
    for i in range(n):
        rows = residuals[i * k:(i + 1) * k]
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        gram = rows @ rows.T
        vals.append(float(((gram - np.eye(k)) ** 2).sum()))
    return float(np.mean(vals))


def test_div_orthonormal_rows_zero():
    r = ng.leaf(np.eye(4)[:3])
    assert diversity_regularizer(r, 1, 3).item() == pytest.approx(0.0, abs=1e-15)


def test_div_identical_unit_slots():
    r = ng.leaf(np.tile(np.array([[1.0, 0.0]]), (2, 1)))
    assert diversity_regularizer(r, 1, 2).item() == pytest.approx(2.0, abs=1e-12)


def test_div_matches_gram_oracle():
    rng = np.random.default_rng(5)
    n, k, d = 3, 4, 8
    r = rng.normal(size=(n * k, d))
    got = diversity_regularizer(ng.leaf(r), n, k).item()
    assert got == pytest.approx(div_gram_oracle(r, n, k), abs=1e-12)


# -- MMD ---------------------------------------------------------------------------

def test_mmd_identical_samples_zero():
    x = np.random.default_rng(6).normal(size=(5, 4))
    assert mmd_gaussian(ng.leaf(x), ng.leaf(x), 1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_mmd_two_points_closed_form():
    d, h = 3.0, 2.0
    x = ng.leaf([[0.0, 0.0]])
    y = ng.leaf([[d, 0.0]])
    expected = 1.0 + 1.0 - 2.0 * math.exp(-d * d / (2 * h * h))
    assert mmd_gaussian(x, y, h).item() == pytest.approx(expected, abs=1e-12)


def test_mmd_separates_shifted_distributions():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(20, 4))
        y_same = rng.normal(size=(20, 4))
        y_shift = rng.normal(size=(20, 4)) + 2.0
        same = mmd_gaussian(ng.leaf(x), ng.leaf(y_same), 1.0).item()
        shifted = mmd_gaussian(ng.leaf(x), ng.leaf(y_shift), 1.0).item()
        assert same < shifted


def test_mmd_nonnegative_and_validates():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    assert mmd_gaussian(ng.leaf(x), ng.leaf(y), "median").item() >= 0.0
    with pytest.raises(ValueError, match="positive"):
        mmd_gaussian(ng.leaf(x), ng.leaf(y), -1.0)
    with pytest.raises(ValueError, match="dimensions"):
        mmd_gaussian(ng.leaf(x), ng.leaf(rng.normal(size=(4, 5))), 1.0)


# -- contrastive --------------------------------------------------------------------

def test_infonce_single_pair_is_zero():
    assert contrastive_infonce(ng.leaf([[0.3]]), 0.05).item() == 0.0


def test_infonce_dominant_diagonal_vanishes():
    n, c_over_tau = 4, 20.0
    sim = ng.leaf(np.eye(n))
    assert contrastive_infonce(sim, 1.0 / c_over_tau).item() < 1e-7


def test_infonce_uniform_matrix_is_log_n():
    for n in (2, 4, 7):
        sim = ng.leaf(np.full((n, n), 0.3))
        assert contrastive_infonce(sim, 0.1).item() == pytest.approx(math.log(n), abs=1e-12)


def test_infonce_matches_direct_softmax():
    rng = np.random.default_rng(8)
    s = rng.uniform(-1, 1, size=(5, 5))
    tau = 0.07
    logits = s / tau
    p_row = np.exp(logits - logits.max(axis=1, keepdims=True))
    p_row /= p_row.sum(axis=1, keepdims=True)
    p_col = np.exp(logits - logits.max(axis=0, keepdims=True))
    p_col /= p_col.sum(axis=0, keepdims=True)
    expected = -0.5 / 5 * (np.log(np.diag(p_row)).sum() + np.log(np.diag(p_col)).sum())
    assert contrastive_infonce(ng.leaf(s), tau).item() == pytest.approx(expected, abs=1e-10)


def test_infonce_rejects_bad_tau():
    with pytest.raises(ValueError, match="tau"):
        contrastive_infonce(ng.leaf(np.eye(2)), 0.0)


# -- combined loss --------------------------------------------------------------------

def test_combined_all_lambdas_zero_equals_triplet():
    batch = make_batch(9)
    cfg = LossConfig(lambda_gd=0, lambda_isd=0, lambda_mmd=0, lambda_div=0, lambda_con=0)
    total, breakdown = combined_loss(batch, cfg, SimilarityKind.maxmatch())
    assert set(breakdown) == {"triplet", "total"}
    assert total.item() == pytest.approx(breakdown["triplet"], abs=1e-12)


def test_combined_weighted_sum_matches_terms():
    batch = make_batch(10)
    cfg = LossConfig(lambda_gd=0.1, lambda_isd=0.1, lambda_mmd=0, lambda_div=0,
                     lambda_con=0)
    total, bd = combined_loss(batch, cfg, SimilarityKind.smooth_chamfer(16.0))
    expected = bd["triplet"] + 0.1 * bd["gd"] + 0.1 * bd["isd"]
    assert total.item() == pytest.approx(expected, abs=1e-12)


def test_combined_terms_all_recorded():
    batch = make_batch(11)
    cfg = LossConfig(lambda_gd=0.1, lambda_isd=0.1, lambda_mmd=0.01,
                     lambda_div=0.01, lambda_con=0.001, mmd_bandwidth=1.0)
    total, bd = combined_loss(batch, cfg, SimilarityKind.mil())
    assert set(bd) == {"triplet", "gd", "isd", "mmd", "div", "con", "total"}
    assert all(v >= 0 for v in bd.values())


@pytest.mark.parametrize("kind", [SimilarityKind.mil(),
                                  SimilarityKind.smooth_chamfer(16.0),
                                  SimilarityKind.maxmatch()])
def test_combined_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(12)
    n, k, d = 4, 3, 5
    cfg = LossConfig(lambda_gd=0.1, lambda_isd=0.1, lambda_mmd=0.01,
                     lambda_div=0.01, lambda_con=0.001, mmd_bandwidth=1.0)

    arrays = [rng.normal(size=(n * k, d)) for _ in range(2)] + \
             [rng.normal(size=(n, d)) for _ in range(2)] + \
             [rng.normal(size=(n * k, d)) for _ in range(2)]

    def build(ps):
        batch = BatchEmbeddings(
            image_sets=ps[0].l2_normalize(), text_sets=ps[1].l2_normalize(),
            image_globals=ps[2], text_globals=ps[3],
            image_residuals=ps[4], text_residuals=ps[5], n=n, k=k)
        return combined_loss(batch, cfg, kind)[0]

    assert ng.finite_diff_check(build, arrays) < 1e-4


def test_loss_config_validation():
    with pytest.raises(ValueError, match="delta1"):
        LossConfig(delta1=1.5)
    with pytest.raises(ValueError, match="s must"):
        LossConfig(s=0.0)
    with pytest.raises(ValueError, match="nonnegative"):
        LossConfig(lambda_mmd=-0.1)
    with pytest.raises(ValueError, match="mmd_bandwidth"):
        LossConfig(mmd_bandwidth="auto")
