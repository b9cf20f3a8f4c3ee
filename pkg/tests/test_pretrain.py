import numpy as np
import pytest
from sklearn.base import clone

from conftest import assert_zero_grad, split_zero_grad, tiny_config, TINY
from ehrjoint import autodiff as ad
from ehrjoint.data import IGNORE, PairDataset
from ehrjoint.gradcheck import grad_check
from ehrjoint.model import GraphTextModel
from ehrjoint.pretrain import (PretrainHeads, Pretrainer, apply_mlm_mask, apply_mlp_mask, build_alignment_batch,
                               counters, make_pretrain_batch, pretrain_step, sample_relation_pairs)
from ehrjoint.validation import check_tasks

SPECIAL = {0, 1, 2, 3, 4}
MASK = 2


# ---------------------------------------------------------------- MLM masking

def test_mlm_p_zero_is_identity(rng):
    ids = [0, 9, 10, 11, 1]
    plan = apply_mlm_mask(ids, 0.0, rng, 50, MASK, SPECIAL)
    assert plan.input_ids == ids and plan.labels == [IGNORE] * 5 and plan.actions == {}


def test_mlm_p_one_all_mask(rng):
    ids = [0, 9, 10, 11, 1, 3]
    plan = apply_mlm_mask(ids, 1.0, rng, 50, MASK, SPECIAL, split=(1.0, 0.0, 0.0))
    assert plan.input_ids == [0, MASK, MASK, MASK, 1, 3]
    assert plan.labels == [IGNORE, 9, 10, 11, IGNORE, IGNORE]
    assert plan.positions == [1, 2, 3]


def test_mlm_monte_carlo_rates():
    r = np.random.default_rng(0)
    ids = r.integers(5, 1000, size=100_000).tolist()
    plan = apply_mlm_mask(ids, 0.15, r, 1000, MASK, SPECIAL)
    n = len(plan.actions)
    assert abs(n / len(ids) - 0.15) <= 0.01
    acts = list(plan.actions.values())
    for name, target in (("mask", 0.8), ("random", 0.1), ("keep", 0.1)):
        assert abs(acts.count(name) / n - target) <= 0.02
    for i, a in plan.actions.items():
        assert plan.labels[i] == ids[i]
        if a == "mask":
            assert plan.input_ids[i] == MASK
        elif a == "keep":
            assert plan.input_ids[i] == ids[i]
        else:
            assert plan.input_ids[i] not in SPECIAL
    unmasked = [i for i in range(len(ids)) if i not in plan.actions]
    assert all(plan.labels[i] == IGNORE and plan.input_ids[i] == ids[i] for i in unmasked)


def test_mlm_rejects_bad_probability(rng):
    with pytest.raises(ValueError):
        apply_mlm_mask([5], 1.5, rng, 10, MASK, SPECIAL)


# ---------------------------------------------------------------- MLP masking

def test_mlp_no_literals_is_noop(rng):
    plan = apply_mlp_mask([0, 1, 2], [False] * 3, 1.0, rng, 5)
    assert plan.input_ids == [0, 1, 2] and plan.actions == {}


def test_mlp_p_one_masks_every_literal(rng):
    plan = apply_mlp_mask([0, 1, 9, 10], [False, False, True, True], 1.0, rng, 5)
    assert plan.input_ids == [0, 1, 5, 5]
    assert plan.labels == [IGNORE, IGNORE, 9, 10]


def test_mlp_monte_carlo_rate_and_no_random_branch():
    r = np.random.default_rng(1)
    ids = r.integers(7, 500, size=100_000).tolist()
    plan = apply_mlp_mask(ids, [True] * len(ids), 0.15, r, 5)
    assert abs(len(plan.actions) / len(ids) - 0.15) <= 0.01
    assert set(plan.actions.values()) == {"mask"}
    assert all(plan.input_ids[i] == 5 for i in plan.actions)


# ---------------------------------------------------------------- relation pairs

def test_rc_two_nodes(rng):
    assert sample_relation_pairs(2, [(0, 1, 3)], 9, 1.0, rng) == [(0, 1, 3)]
    assert sample_relation_pairs(1, [], 9, 1.0, rng) == []


def test_rc_path_exhaustive(rng):
    got = sample_relation_pairs(3, [(0, 1, 0), (2, 1, 1)], 7, 1.0, rng)
    assert sorted(got) == [(0, 1, 0), (0, 2, 7), (1, 2, 1)]


@pytest.mark.parametrize("seed", range(5))
def test_rc_labels_match_edge_set(seed):
    r = np.random.default_rng(seed)
    n = 15
    edges = [(int(r.integers(k)), k, int(r.integers(4))) for k in range(1, n)]
    lookup = {frozenset((s, d)): rel for s, d, rel in edges}
    got = sample_relation_pairs(n, edges, 4, 0.3, r)
    assert len(got) == int(np.ceil(0.3 * n * (n - 1) / 2))
    assert len({(i, j) for i, j, _ in got}) == len(got)
    for i, j, rel in got:
        assert i < j
        assert rel == lookup.get(frozenset((i, j)), 4)


def test_rc_cap_and_balanced(rng):
    n = 60
    edges = [(k - 1, k, 0) for k in range(1, n)]
    assert len(sample_relation_pairs(n, edges, 1, 1.0, rng, cap=512)) == 512
    bal = sample_relation_pairs(n, edges, 1, 0.1, rng, balanced=True)
    labels = [r for _, _, r in bal]
    assert len(bal) == 177
    assert labels.count(0) == min(n - 1, len(bal) // 2)
    with pytest.raises(ValueError):
        sample_relation_pairs(3, [], 1, 0.0, rng)


# ---------------------------------------------------------------- alignment batches

def test_alignment_no_replacement(small_train, rng):
    pairs = build_alignment_batch(small_train.examples[:5], 0.0, rng)
    assert [a for _, a in pairs] == [1] * 5


def test_alignment_full_swap_of_two(small_train, rng):
    a, b = small_train[0], small_train[1]
    (x, la), (y, lb) = build_alignment_batch([a, b], 1.0, rng)
    assert la == lb == 0
    assert x.text_ids == b.text_ids and y.text_ids == a.text_ids
    assert x.node_ids == a.node_ids and y.node_ids == b.node_ids


def test_alignment_single_pair_kept_and_counted(small_train, rng):
    before = counters["alignment_skipped"]
    ((ex, lab),) = build_alignment_batch([small_train[0]], 1.0, rng)
    assert lab == 1 and ex is small_train[0]
    assert counters["alignment_skipped"] == before + 1


def test_alignment_monte_carlo_rate(small_train):
    r = np.random.default_rng(3)
    exs = (small_train.examples * 1000)[:10_000]
    labels = [a for _, a in build_alignment_batch(exs, 0.5, r)]
    assert abs(labels.count(0) / len(labels) - 0.5) <= 0.02


# ---------------------------------------------------------------- batches and steps

def test_batch_invariants_and_determinism(small_train):
    vocab = small_train.vocab
    exs = small_train.examples[:8]
    a = make_pretrain_batch(exs, vocab, np.random.default_rng(5))
    b = make_pretrain_batch(exs, vocab, np.random.default_rng(5))
    for f in ("mlm_labels", "mlp_labels", "rc_pairs", "ap_labels"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    np.testing.assert_array_equal(a.batch.text_ids, b.batch.text_ids)
    special = np.isin(a.batch.text_ids, list(vocab.text.special_ids)) & (a.batch.text_ids != vocab.text.mask_id)
    assert (a.mlm_labels[special] == IGNORE).all()
    for k, (tplan, gplan) in enumerate(a.plans):
        is_lit = [vocab.graph.is_literal_id(g) for g in exs[k].node_ids]
        assert all(is_lit[i] for i in gplan.actions)
        assert all(exs[k].node_ids[i] == gplan.labels[i] for i in gplan.actions) or a.ap_labels[k] == 1
    mis = a.ap_labels == 0
    assert (a.mlm_labels[mis] == IGNORE).all() and (a.mlp_labels[mis] == IGNORE).all()
    edges = [ex.edge_relation() for ex in exs]
    for k, i, j, r in a.rc_pairs:
        assert r == edges[k].get((i, j), vocab.relations.not_connected)


def model_and_heads(vocab, std=0.02):
    cfg = tiny_config(vocab, init_std=std)
    return GraphTextModel(cfg, seed=4), PretrainHeads(cfg, np.random.default_rng(4))


def test_ap_only_loss_near_ln2(small_train):
    m, h = model_and_heads(small_train.vocab)
    pb = make_pretrain_batch(small_train.examples[:8], small_train.vocab, np.random.default_rng(0))
    losses, total = pretrain_step(m, h, pb, ["ap"])
    assert set(losses) == {"ap"}
    assert total.data == pytest.approx(np.log(2), abs=0.02)


def test_zero_masking_gives_zero_mlm_mlp(small_train):
    m, h = model_and_heads(small_train.vocab)
    pb = make_pretrain_batch(small_train.examples[:4], small_train.vocab, np.random.default_rng(0),
                             mlm_prob=0.0, mlp_prob=0.0)
    losses, _ = pretrain_step(m, h, pb, ["mlm", "mlp"])
    assert losses["mlm"].data == 0.0 and losses["mlp"].data == 0.0


def test_total_is_sum_of_tasks(small_train):
    m, h = model_and_heads(small_train.vocab)
    pb = make_pretrain_batch(small_train.examples[:6], small_train.vocab, np.random.default_rng(1), mlm_prob=0.5,
                             mlp_prob=0.5, rc_fraction=0.5)
    losses, total = pretrain_step(m, h, pb, ["mlm", "mlp", "rc", "ap"])
    separate = sum(float(pretrain_step(m, h, pb, [t])[1].data) for t in losses)
    assert float(total.data) == pytest.approx(separate, abs=1e-12)


def test_empty_or_unknown_task_set_rejected(small_train):
    m, h = model_and_heads(small_train.vocab)
    pb = make_pretrain_batch(small_train.examples[:2], small_train.vocab, np.random.default_rng(0))
    with pytest.raises(ValueError):
        pretrain_step(m, h, pb, [])
    with pytest.raises(ValueError):
        check_tasks("mlm,xyz")
    assert check_tasks("ap, mlm,mlm") == ["mlm", "ap"]


def test_ignored_positions_get_zero_gradient(small_train):
    m, h = model_and_heads(small_train.vocab)
    pb = make_pretrain_batch(small_train.examples[:3], small_train.vocab, np.random.default_rng(2), mlm_prob=0.3,
                             p_replace=0.0)
    out = m(pb.batch)
    logits = h.mlm(out.text)
    loss = ad.cross_entropy(logits, pb.mlm_labels.reshape(-1))
    ad.backward(loss)
    g = h.mlm.bias.grad
    assert g is not None and np.isfinite(g).all()
    masked_rows = (pb.mlm_labels != IGNORE).sum()
    assert masked_rows > 0


def test_pretrain_total_gradient_check(toy_vocab_and_pair):
    vocab, ex = toy_vocab_and_pair
    other = type(ex)(**{**ex.__dict__, "admission_key": "2", "text_ids": ex.text_ids[:1] + ex.text_ids[2:]})
    m, h = model_and_heads(vocab, std=0.5)
    # redraw until the batch holds both alignment labels
    third = type(ex)(**{**ex.__dict__, "admission_key": "3"})
    pb = next(b for b in (make_pretrain_batch([ex, other, third], vocab, np.random.default_rng(s), mlm_prob=0.5,
                                              mlp_prob=0.5, rc_fraction=1.0, p_replace=0.5) for s in range(50))
              if set(b.ap_labels) == {0, 1} and (b.mlm_labels != IGNORE).any())
    f = lambda: pretrain_step(m, h, pb, ["mlm", "mlp", "rc", "ap"])[1]
    rest, zero = split_zero_grad(list(m.named_parameters()) + list(h.named_parameters("heads.")))
    assert grad_check(f, rest, n_samples=400) <= 1e-4
    assert_zero_grad(f, zero)


# ---------------------------------------------------------------- estimator

def tiny_pretrainer(**kw):
    base = dict(hidden_size=8, num_heads=2, text_layers=1, graph_layers=1, cross_layers=1, intermediate_size=12,
                epochs=2, batch_size=4, seed=3)
    return Pretrainer(**{**base, **kw})


def test_fit_logs_and_transform(small_train):
    est = tiny_pretrainer().fit(small_train)
    assert len(est.history_) == 2
    steps_per_epoch = int(np.ceil(len(small_train) / 4))
    assert len(est.step_log_) == 2 * steps_per_epoch
    assert set(est.step_log_[0]) == {"epoch", "step", "mlm", "mlp", "rc", "ap", "total"}
    feats = est.transform(small_train)
    assert feats.shape == (len(small_train), 16)
    assert 0.0 <= est.score(small_train) <= 1.0


def test_partial_fit_continues_bit_exactly(small_train):
    full = tiny_pretrainer(epochs=2).fit(small_train)
    half = tiny_pretrainer(epochs=1).fit(small_train).partial_fit(small_train, epochs=1)
    for (n, a), (_, b) in zip(full.model_.named_parameters(), half.model_.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    assert full.step_log_ == half.step_log_


def test_task_subset_and_params(small_train):
    est = tiny_pretrainer(tasks="mlm,ap", epochs=1).fit(small_train)
    assert est.tasks_ == ["mlm", "ap"]
    assert set(est.step_log_[0]) == {"epoch", "step", "mlm", "ap", "total"}
    c = clone(est)
    assert c.get_params()["tasks"] == "mlm,ap" and not hasattr(c, "model_")


def test_save_load_round_trip(small_train, tmp_path):
    est = tiny_pretrainer(epochs=1).fit(small_train)
    est.save(tmp_path / "p.npz", meta={"note": "x"})
    back = Pretrainer.load(tmp_path / "p.npz", small_train.vocab)
    np.testing.assert_array_equal(back.transform(small_train), est.transform(small_train))
    assert back.epoch_ == 1
    for (n, a), (_, b) in zip(est.heads_.named_parameters(), back.heads_.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert back.evaluate_losses(small_train) == est.evaluate_losses(small_train)


def test_estimator_input_validation(small_train):
    with pytest.raises(TypeError):
        tiny_pretrainer().fit([1, 2])
    with pytest.raises(ValueError):
        tiny_pretrainer().fit(PairDataset([], small_train.vocab))
    with pytest.raises(Exception):
        tiny_pretrainer().transform(small_train)


def test_callback_can_stop_training(small_train):
    est = tiny_pretrainer(epochs=5, callback=lambda e: e.epoch_ < 2).fit(small_train)
    assert est.epoch_ == 2
