import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setsim.encoder import load_checkpoint, zeroed_model, ModelDims
from setsim.objectives import LossConfig
from setsim.runner import (AdamHyper, AdamState, MetricsRecord, NumericError,
                           TrainConfig, adam_step, circular_variance,
                           collapse_experiment, encode_dataset, ensemble_average,
                           evaluate_retrieval, heatmap_export, jensen_check,
                           mean_circular_variance, per_slot_retrieval,
                           recall_at_ks, score_matrix, slot_ablation,
                           slot_ablation_sweep, train)
from setsim.simset import SimilarityKind
from setsim.synthdata import WorldConfig, generate, make_world


def tiny_dataset(seed=0, n_images=6, **world_kw):
    world = make_world(WorldConfig(**world_kw), seed)
    return generate(world, n_images, seed + 100)


def unit_sets(rng, n, k, d):
    m = rng.normal(size=(n, k, d))
    return m / np.linalg.norm(m, axis=2, keepdims=True)


# -- retrieval ----------------------------------------------------------------

def test_identity_dominant_scores_reach_rsum_600():
    n = 12
    scores = np.eye(n) + 0.01 * np.random.default_rng(0).uniform(size=(n, n))
    scores[np.eye(n, dtype=bool)] += 1.0
    positives = [[i] for i in range(n)]
    r = recall_at_ks(scores, positives)
    assert r == (100.0, 100.0, 100.0)


def test_hand_ranked_positives_at_rank_two():
    # three queries, positive always ranked second
    scores = np.array([
        [0.5, 0.9, 0.1, 0.0, 0.0, 0.0],
        [0.9, 0.5, 0.1, 0.0, 0.0, 0.0],
        [0.0, 0.9, 0.5, 0.1, 0.0, 0.0],
    ])
    positives = [[0], [1], [2]]
    r1, r5, r10 = recall_at_ks(scores, positives)
    assert r1 == 0.0
    assert r5 == 100.0
    assert r10 == 100.0


def test_recall_rejects_empty_positives():
    with pytest.raises(ValueError, match="no positives"):
        recall_at_ks(np.ones((2, 3)), [[0], []])


def test_gallery_shuffle_leaves_recalls_unchanged():
    rng = np.random.default_rng(1)
    scores = rng.uniform(size=(8, 20))
    positives = [[int(rng.integers(20))] for _ in range(8)]
    base = recall_at_ks(scores, positives)
    perm = rng.permutation(20)
    inv = np.empty(20, dtype=int)
    inv[perm] = np.arange(20)
    shuffled = recall_at_ks(scores[:, perm], [[int(inv[p]) for p in ps] for ps in positives])
    assert shuffled == base


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_positive_scaling_is_rank_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(5, 9))
    positives = [[int(rng.integers(9))] for _ in range(5)]
    assert recall_at_ks(scores * scale, positives) == recall_at_ks(scores, positives)


def test_evaluate_retrieval_rsum_is_sum_of_six():
    rng = np.random.default_rng(2)
    imgs = unit_sets(rng, 5, 4, 8)
    txts = unit_sets(rng, 10, 4, 8)
    rel = [[2 * i, 2 * i + 1] for i in range(5)]
    res = evaluate_retrieval(imgs, txts, rel, kind=SimilarityKind.mil())
    assert res.rsum == pytest.approx(sum(res.recall_i2t) + sum(res.recall_t2i))


def test_score_matrix_requires_kind_or_topk():
    rng = np.random.default_rng(3)
    sets = unit_sets(rng, 2, 4, 8)
    with pytest.raises(ValueError, match="similarity kind"):
        score_matrix(sets, sets)
    out = score_matrix(sets, sets, topk=4)
    assert out.shape == (2, 2)


# -- circular variance -----------------------------------------------------------

def test_circular_variance_identical_rows_zero():
    rows = np.tile(np.array([[0.6, 0.8]]), (4, 1))
    assert circular_variance(rows) == 0.0


def test_circular_variance_antipodal_pair_is_one():
    rows = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert circular_variance(rows) == 1.0


def test_circular_variance_orthogonal_pair_is_half():
    rows = np.eye(2)
    assert circular_variance(rows) == 0.5


def test_circular_variance_rejects_non_unit_rows():
    with pytest.raises(ValueError, match="unit-norm"):
        circular_variance(np.array([[2.0, 0.0]]))


def test_collapse_anchor_zero_residual_encoder():
    # every sample of the zero-residual model collapses to its global; the
    # variance is zero up to the rounding of the unit normalization
    ds = tiny_dataset(21, n_images=5)
    model = zeroed_model(ModelDims(set_size=4, embed_dim=32, n_blocks=2, raw_dim=32))
    corpus = encode_dataset(model, ds)
    for sets in (corpus.image_sets, corpus.text_sets):
        for rows in sets:
            assert abs(circular_variance(rows)) <= 5e-16


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_circular_variance_invariances(seed):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(5, 6))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    base = circular_variance(rows)
    perm = rng.permutation(5)
    assert circular_variance(rows[perm]) == pytest.approx(base, abs=1e-12)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    assert circular_variance(rows @ q) == pytest.approx(base, abs=1e-9)


# -- slot diagnostics ----------------------------------------------------------------

def test_slot_ablation_full_mask_matches_max_scoring():
    rng = np.random.default_rng(4)
    imgs = unit_sets(rng, 4, 3, 8)
    txts = unit_sets(rng, 8, 3, 8)
    rel = [[2 * i, 2 * i + 1] for i in range(4)]
    from setsim.runner import EncodedCorpus
    corpus = EncodedCorpus(image_sets=imgs, text_sets=txts,
                           image_globals=None, text_globals=None,
                           image_residuals=None, text_residuals=None)
    full = slot_ablation(corpus, rel, np.ones(3, dtype=bool))
    mil_res = evaluate_retrieval(imgs, txts, rel, kind=SimilarityKind.mil())
    assert full == pytest.approx(mil_res.rsum)


def test_slot_ablation_k1_singleton_equals_full():
    rng = np.random.default_rng(5)
    imgs = unit_sets(rng, 4, 1, 8)
    txts = unit_sets(rng, 8, 1, 8)
    rel = [[2 * i, 2 * i + 1] for i in range(4)]
    from setsim.runner import EncodedCorpus
    corpus = EncodedCorpus(image_sets=imgs, text_sets=txts,
                           image_globals=None, text_globals=None,
                           image_residuals=None, text_residuals=None)
    sweep = slot_ablation_sweep(corpus, rel)
    assert sweep["slot_0"] == sweep["full"]


def test_slot_ablation_rejects_empty_mask():
    rng = np.random.default_rng(6)
    from setsim.runner import EncodedCorpus
    corpus = EncodedCorpus(image_sets=unit_sets(rng, 2, 3, 4),
                           text_sets=unit_sets(rng, 2, 3, 4),
                           image_globals=None, text_globals=None,
                           image_residuals=None, text_residuals=None)
    with pytest.raises(ValueError, match="no slots"):
        slot_ablation(corpus, [[0], [1]], np.zeros(3, dtype=bool))


def test_per_slot_retrieval_collapsed_rate_is_one_over_k():
    rng = np.random.default_rng(7)
    k = 4
    row = rng.normal(size=8)
    row /= np.linalg.norm(row)
    queries = np.tile(row, (3, k, 1))  # all slots identical
    gallery = unit_sets(rng, 6, k, 8)
    _, rate = per_slot_retrieval(queries, gallery)
    assert rate == pytest.approx(1.0 / k)


def test_per_slot_retrieval_aligned_slots_rate_one():
    d = 8
    protos = np.eye(d)[:4]
    queries = protos[None, :, :]  # one query, orthogonal slots
    gallery = []
    for j in range(4):
        rows = np.vstack([protos[j], np.eye(d)[4:7]])
        gallery.append(rows)
    top1, rate = per_slot_retrieval(queries, np.stack(gallery))
    assert rate == 1.0
    np.testing.assert_array_equal(top1[0], np.arange(4))


def test_heatmap_export_writes_parseable_csv(tmp_path):
    rng = np.random.default_rng(8)
    from setsim.runner import EncodedCorpus
    k = 3
    corpus = EncodedCorpus(image_sets=unit_sets(rng, 4, k, 8),
                           text_sets=unit_sets(rng, 8, k, 8),
                           image_globals=None, text_globals=None,
                           image_residuals=None, text_residuals=None)
    rel = [[2 * i, 2 * i + 1] for i in range(4)]
    path = tmp_path / "heat.csv"
    heat = heatmap_export(corpus, rel, path, meta={"kind": "mil", "seed": 0, "epoch": 1})
    parsed = np.loadtxt(path, delimiter=",")
    assert parsed.shape == (k, k)
    np.testing.assert_allclose(parsed, heat, rtol=1e-12)
    meta = json.loads((tmp_path / "heat.csv.json").read_text())
    assert meta["kind"] == "mil"


def test_heatmap_of_collapsed_model_is_near_uniform(tmp_path):
    ds = tiny_dataset(9, n_images=4)
    model = zeroed_model(ModelDims(set_size=4, embed_dim=32, n_blocks=2, raw_dim=32))
    corpus = encode_dataset(model, ds)
    heat = heatmap_export(corpus, ds.image_to_captions(), tmp_path / "h.csv", meta={})
    assert float(heat.max() - heat.min()) < 0.05


def test_heatmap_identity_aligned_sets_diagonal_dominant(tmp_path):
    protos = np.eye(8)[:3]
    from setsim.runner import EncodedCorpus
    corpus = EncodedCorpus(image_sets=protos[None], text_sets=protos[None],
                           image_globals=None, text_globals=None,
                           image_residuals=None, text_residuals=None)
    heat = heatmap_export(corpus, [[0]], tmp_path / "h.csv", meta={})
    assert np.all(np.diag(heat) > heat[~np.eye(3, dtype=bool)].max())


# -- ensemble ------------------------------------------------------------------------

def test_ensemble_identity_and_half():
    a = np.random.default_rng(10).normal(size=(3, 4))
    np.testing.assert_array_equal(ensemble_average(a, a), a)
    np.testing.assert_allclose(ensemble_average(np.zeros_like(a), a), a / 2)
    with pytest.raises(ValueError, match="shapes"):
        ensemble_average(a, np.zeros((4, 3)))


def test_ensemble_of_trained_checkpoints_is_at_least_worst_member():
    from setsim.runner import encode_dataset, score_matrix, recall_at_ks, invert_relevance

    ds = tiny_dataset(20, n_images=8)
    rel = ds.image_to_captions()
    c2i = invert_relevance(rel, ds.n_captions)
    for seed in range(5):
        rsums = {}
        scores = {}
        for member in (0, 1):
            cfg = quick_config(seed=100 * seed + member, epochs=4, batch_size=4)
            res = train(cfg, ds)
            corpus = encode_dataset(res.model, ds)
            s = score_matrix(corpus.image_sets, corpus.text_sets, topk=2)
            scores[member] = s
            rsums[member] = sum(recall_at_ks(s, rel)) + sum(recall_at_ks(s.T, c2i))
        mixed = ensemble_average(scores[0], scores[1])
        ens = sum(recall_at_ks(mixed, rel)) + sum(recall_at_ks(mixed.T, c2i))
        assert ens >= min(rsums.values()) - 1e-9


# -- jensen check ----------------------------------------------------------------------

def test_jensen_check_gap_and_gradient():
    rep = jensen_check(n_trials=200, seed=0)
    assert rep.min_gap >= -1e-12
    assert rep.max_grad_err < 1e-8


def test_jensen_identical_elements_gap_zero():
    rep = jensen_check(n_trials=1, n=1, seed=1)  # single element: mean == value
    assert abs(rep.min_gap) < 1e-12


# -- adam ---------------------------------------------------------------------------

def test_adam_zero_grads_leave_params_unchanged():
    params = {"w": np.ones((2, 2))}
    state = AdamState(params)
    adam_step(params, {"w": np.zeros((2, 2))}, state, AdamHyper(weight_decay=0.0))
    np.testing.assert_array_equal(params["w"], np.ones((2, 2)))


def test_adam_first_step_is_signed_lr():
    params = {"w": np.zeros((1, 3))}
    state = AdamState(params)
    g = np.array([[0.5, -2.0, 1e-3]])
    adam_step(params, {"w": g}, state, AdamHyper(lr=0.1))
    np.testing.assert_allclose(params["w"], -0.1 * np.sign(g), rtol=1e-4)


def test_adam_converges_on_quadratic():
    params = {"x": np.array([[3.0]])}
    state = AdamState(params)
    hyper = AdamHyper(lr=0.05)
    for _ in range(500):
        adam_step(params, {"x": 2.0 * params["x"]}, state, hyper)
    assert abs(params["x"][0, 0]) < 1e-3


def test_adam_weight_decay_shrinks_params():
    params = {"w": np.full((1, 1), 10.0)}
    state = AdamState(params)
    adam_step(params, {"w": np.zeros((1, 1))}, state,
              AdamHyper(lr=0.1, weight_decay=0.1))
    assert params["w"][0, 0] == pytest.approx(10.0 - 0.1 * 0.1 * 10.0)


# -- training -------------------------------------------------------------------------

def quick_config(**kw):
    base = dict(kind="maxmatch", epochs=1, batch_size=3, seed=0,
                set_size=2, embed_dim=8, n_blocks=1,
                loss=LossConfig(lambda_gd=0.1, lambda_isd=0.1, lambda_mmd=0.0,
                                lambda_div=0.0, lambda_con=0.0))
    base.update(kw)
    return TrainConfig(**base)


def test_train_one_epoch_writes_log_and_checkpoints(tmp_path):
    ds = tiny_dataset(11, n_images=6)
    out = tmp_path / "run"
    result = train(quick_config(), ds, out_dir=out)
    assert len(result.metrics) == 1
    lines = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["rsum"] == pytest.approx(
        sum(record["recall_i2t"]) + sum(record["recall_t2i"]))
    loaded, meta = load_checkpoint(out / "final.ckpt")
    assert meta["kind"] == "maxmatch"
    for name, arr in result.model.named_arrays().items():
        np.testing.assert_array_equal(loaded.named_arrays()[name], arr)


def test_train_is_deterministic(tmp_path):
    ds = tiny_dataset(12, n_images=6)
    a = train(quick_config(epochs=2), ds, out_dir=tmp_path / "a")
    b = train(quick_config(epochs=2), ds, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == \
        (tmp_path / "b/metrics.jsonl").read_bytes()
    assert (tmp_path / "a/final.ckpt").read_bytes() == \
        (tmp_path / "b/final.ckpt").read_bytes()


def test_train_rejects_small_batch_config():
    with pytest.raises(ValueError, match="batch_size"):
        quick_config(batch_size=1)


def test_train_aborts_on_nan_naming_term(monkeypatch):
    import setsim.runner as runner_mod

    ds = tiny_dataset(13, n_images=4)
    real = runner_mod.combined_loss

    def poisoned(batch, cfg, kind, warmup=False):
        node, breakdown = real(batch, cfg, kind, warmup=warmup)
        breakdown = dict(breakdown, mmd=float("nan"))
        return node, breakdown

    monkeypatch.setattr(runner_mod, "combined_loss", poisoned)
    with pytest.raises(NumericError, match="loss term 'mmd'"):
        train(quick_config(), ds)


def test_train_config_roundtrip():
    cfg = quick_config(eval_topk=4)
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
