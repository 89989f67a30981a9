"""Text embedding stub, fusion, mining, and contrastive-loss tests."""

import math

import numpy as np
import pytest

from tracemm import autodiff as ad
from tracemm.autodiff import Tensor
from tracemm.align import (
    AlignConfig,
    AlignedModel,
    AlignmentBatch,
    CrossModalFuse,
    NegativeSets,
    TextEmbedder,
    align,
    alignment_loss,
    corpus_text_features,
    info_nce,
    mine_negatives,
)
from tracemm.dataset import generate_corpus
from tracemm.model import Encoder, ModelConfig
from tracemm.pretrain import epoch_mean_losses, stack_split

from tests.gradcheck import check_gradients


def tiny_aligned_model(seed=0, d=8, channels=2):
    enc = Encoder(
        ModelConfig(d=d, n_layers=1, n_heads=2, patch_len=3, channels=channels, dropout=0.0),
        seed=seed,
    )
    return AlignedModel(
        encoder=enc, textenc=TextEmbedder(d=d, seed=seed), fuse=CrossModalFuse(d=d, seed=seed)
    )


def random_batch(rng, b, c, d):
    batch = AlignmentBatch(
        h_cls=Tensor(rng.standard_normal((b, d))),
        h_cit=Tensor(rng.standard_normal((b, c, d))),
        z_cxt=Tensor(rng.standard_normal((b, d))),
        z_ch=Tensor(rng.standard_normal((b, c, d))),
    )
    return batch.normalize()


# ---------------------------------------------------------------------------
# text embedder


def test_same_text_identical_embedding():
    te = TextEmbedder(d=8, seed=0)
    a = te.features(["rising trend with two spikes"])
    b = te.features(["rising trend with two spikes"])
    np.testing.assert_array_equal(a, b)


def test_disjoint_texts_orthogonal_bags():
    te = TextEmbedder(d=8, seed=0)
    bag_a = te.bag_vector("alpha beta gamma")
    bag_b = te.bag_vector("delta epsilon zeta")
    # no shared hash buckets for these tokens, so the bags are orthogonal
    assert float(bag_a @ bag_b) == 0.0


def test_empty_text_projects_to_bias(caplog):
    te = TextEmbedder(d=8, seed=0)
    with caplog.at_level("WARNING"):
        z = te.project(te.features([""]))
    np.testing.assert_allclose(z.data[0], te.params["textenc.proj.b"].data, atol=1e-12)
    assert "zero bag" in caplog.text


def test_alignment_batch_normalized_views_unit_norm():
    batch = random_batch(np.random.default_rng(11), 4, 3, 6)
    for view in (batch.n_cls, batch.n_cxt):
        np.testing.assert_allclose(np.linalg.norm(view.data, axis=-1), 1.0, atol=1e-6)
    for view in (batch.n_cit, batch.n_ch):
        np.testing.assert_allclose(np.linalg.norm(view.data, axis=-1), 1.0, atol=1e-6)


def test_gradient_reaches_projection_only():
    te = TextEmbedder(d=8, seed=0)
    frozen = te.frozen_matrix.tobytes()
    z = te.project(te.features(["some text"]))
    ad.backward(ad.sum_(ad.mul(z, z)))
    assert te.params["textenc.proj.w"].grad is not None
    assert te.frozen_matrix.tobytes() == frozen


def test_embed_texts_instance_shapes():
    te = TextEmbedder(d=8, seed=0)
    corpus = generate_corpus(0, channels=3, timesteps=24, n_per_class=2, class_count=2, patch_len=3)
    z_cxt, z_ch = te.embed_texts(corpus.instances[0])
    assert z_cxt.shape == (8,)
    assert z_ch.shape == (3, 8)


# ---------------------------------------------------------------------------
# cross-modal fusion


def test_fuse_zero_output_projection_is_identity():
    fuse = CrossModalFuse(d=8, seed=0)
    rng = np.random.default_rng(0)
    h = Tensor(rng.standard_normal((2, 3, 8)))
    z = Tensor(rng.standard_normal((2, 3, 8)))
    refined = fuse.fuse(h, z)
    np.testing.assert_array_equal(refined.data, h.data)


def test_fuse_single_channel_attention_weight_is_one():
    fuse = CrossModalFuse(d=4, seed=0)
    fuse.params["fuse.wo"] = Tensor(np.eye(4), requires_grad=True)
    rng = np.random.default_rng(1)
    h = Tensor(rng.standard_normal((1, 1, 4)))
    z = Tensor(rng.standard_normal((1, 1, 4)))
    refined = fuse.fuse(h, z)
    expected = h.data[0, 0] + z.data[0, 0] @ fuse.params["fuse.wv"].data
    np.testing.assert_allclose(refined.data[0, 0], expected, rtol=1e-12)


def test_fuse_gradients_through_loss():
    fuse = CrossModalFuse(d=6, seed=2)
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((2, 2, 6)))
    z = Tensor(rng.standard_normal((2, 2, 6)), requires_grad=True)
    target = Tensor(rng.standard_normal((2, 2, 6)))

    def loss():
        return ad.mse(fuse.fuse(h, z), target)

    check_gradients(loss, {**fuse.params, "z": z}, tol=1e-4)


# ---------------------------------------------------------------------------
# negative mining


def brute_force_sets(batch: AlignmentBatch, k: int) -> NegativeSets:
    """Exhaustive sort oracle for the general candidate pools."""
    hn = batch.n_cls.data
    zn = batch.n_cxt.data
    b = hn.shape[0]

    def select(anchors, candidates, exclude_same_index):
        out = []
        for i in range(anchors.shape[0]):
            pool = [
                (-float(anchors[i] @ candidates[j]), j)
                for j in range(candidates.shape[0])
                if not (exclude_same_index and j == i)
            ]
            pool.sort()
            out.append([j for _, j in pool[: min(k, len(pool))]])
        return np.array(out)

    hc = batch.n_cit.data.reshape(-1, hn.shape[1])
    zc = batch.n_ch.data.reshape(-1, hn.shape[1])
    return NegativeSets(
        cxt_ts=select(hn, zn, True),
        cxt_text=select(zn, hn, True),
        ch_ts=select(hc, zc, True),
        ch_text=select(zc, hc, True),
    )


def test_mining_b2_only_candidate():
    batch = random_batch(np.random.default_rng(0), 2, 2, 4)
    sets = mine_negatives(batch, k=5)
    np.testing.assert_array_equal(sets.cxt_ts, [[1], [0]])
    np.testing.assert_array_equal(sets.cxt_text, [[1], [0]])


def test_mining_matches_brute_force_random_batches():
    for seed in range(5):
        batch = random_batch(np.random.default_rng(seed), 8, 3, 6)
        for k in (1, 3, 10, 100):
            fast = mine_negatives(batch, k)
            slow = brute_force_sets(batch, k)
            np.testing.assert_array_equal(fast.cxt_ts, slow.cxt_ts)
            np.testing.assert_array_equal(fast.cxt_text, slow.cxt_text)
            np.testing.assert_array_equal(fast.ch_ts, slow.ch_ts)
            np.testing.assert_array_equal(fast.ch_text, slow.ch_text)


def test_mining_k_clamps_to_pool():
    batch = random_batch(np.random.default_rng(1), 4, 2, 4)
    sets = mine_negatives(batch, k=99)
    assert sets.cxt_ts.shape == (4, 3)
    assert sets.ch_ts.shape == (8, 7)
    for i in range(4):
        assert set(sets.cxt_ts[i]) == set(range(4)) - {i}


def test_mining_tie_break_prefers_lower_index():
    d = 4
    anchor = np.zeros((3, d))
    anchor[:, 0] = 1.0
    batch = AlignmentBatch(
        h_cls=Tensor(anchor),
        h_cit=Tensor(np.zeros((3, 1, d)) + np.eye(d)[0]),
        z_cxt=Tensor(anchor.copy()),   # all candidates tie at similarity 1
        z_ch=Tensor(np.zeros((3, 1, d)) + np.eye(d)[0]),
    ).normalize()
    sets = mine_negatives(batch, k=1)
    np.testing.assert_array_equal(sets.cxt_ts, [[1], [0], [0]])


def test_mining_restricted_pool():
    batch = random_batch(np.random.default_rng(2), 3, 3, 5)
    sets = mine_negatives(batch, k=99, restricted_channel_pool=True)
    channels = 3
    assert sets.ch_ts.shape[1] == (channels - 1) + (3 - 1)
    for flat_anchor in range(9):
        i, c = divmod(flat_anchor, channels)
        for flat_cand in np.asarray(sets.ch_ts[flat_anchor]):
            j, c2 = divmod(int(flat_cand), channels)
            assert (j == i and c2 != c) or (j != i and c2 == c)


# ---------------------------------------------------------------------------
# contrastive losses


def test_info_nce_fixture_value():
    # positive similarity 1, one negative at similarity 0, temperature 1
    anchor = Tensor(np.array([1.0, 0.0]))
    positive = Tensor(np.array([1.0, 0.0]))
    negative = Tensor(np.array([0.0, 1.0]))
    loss = info_nce(anchor, positive, [negative], temperature=1.0)
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-10)


def test_info_nce_no_negatives_is_zero():
    anchor = Tensor(np.array([0.6, 0.8]))
    assert info_nce(anchor, Tensor(np.array([1.0, 0.0])), [], 0.07).item() == pytest.approx(0.0, abs=1e-12)


def test_info_nce_negative_equal_to_positive_is_log2():
    anchor = Tensor(np.array([1.0, 0.0]))
    positive = Tensor(np.array([0.0, 1.0]))
    for tau in (0.05, 0.5, 1.0, 3.0):
        loss = info_nce(anchor, positive, [Tensor(positive.data.copy())], tau)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_info_nce_requires_positive_temperature():
    with pytest.raises(ValueError, match="temperature"):
        info_nce(Tensor(np.ones(2)), Tensor(np.ones(2)), [], 0.0)


def independent_alignment_loss(batch, sets, lambda_ch, tau):
    """Scalar re-implementation with explicit loops and library-free math."""

    def norm(v):
        scale = math.sqrt(sum(x * x for x in v) + 1e-24)
        return [x / scale for x in v]

    def nce(anchor, pos, negs):
        logits = [sum(a * b for a, b in zip(anchor, c)) / tau for c in [pos] + negs]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        return lse - logits[0]

    h = [norm(list(row)) for row in batch.h_cls.data]
    z = [norm(list(row)) for row in batch.z_cxt.data]
    b = len(h)
    c = batch.h_cit.shape[1]
    hc = [norm(list(batch.h_cit.data[i, ch])) for i in range(b) for ch in range(c)]
    zc = [norm(list(batch.z_ch.data[i, ch])) for i in range(b) for ch in range(c)]

    g_ts2t = sum(nce(h[i], z[i], [z[j] for j in sets.cxt_ts[i]]) for i in range(b)) / b
    g_t2ts = sum(nce(z[i], h[i], [h[j] for j in sets.cxt_text[i]]) for i in range(b)) / b
    c_ts2t = sum(nce(hc[a], zc[a], [zc[j] for j in sets.ch_ts[a]]) for a in range(b * c)) / (b * c)
    c_t2ts = sum(nce(zc[a], hc[a], [hc[j] for j in sets.ch_text[a]]) for a in range(b * c)) / (b * c)
    return 0.5 * (g_ts2t + g_t2ts) + lambda_ch * 0.5 * (c_ts2t + c_t2ts)


def test_alignment_loss_matches_independent_oracle():
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 2, 2, 4)
    sets = mine_negatives(batch, k=1)
    total, parts = alignment_loss(batch, sets, lambda_ch=1.0, temperature=1.0)
    oracle = independent_alignment_loss(batch, sets, 1.0, 1.0)
    assert total.item() == pytest.approx(oracle, abs=1e-10)


def test_alignment_loss_oracle_across_settings():
    for seed, b, c, k, lam, tau in [(0, 3, 2, 2, 0.5, 0.07), (1, 4, 3, 3, 2.0, 0.5)]:
        batch = random_batch(np.random.default_rng(seed), b, c, 6)
        sets = mine_negatives(batch, k=k)
        total, _ = alignment_loss(batch, sets, lambda_ch=lam, temperature=tau)
        oracle = independent_alignment_loss(batch, sets, lam, tau)
        assert total.item() == pytest.approx(oracle, abs=1e-10)


def test_alignment_loss_lambda_zero_is_pure_sample_level():
    batch = random_batch(np.random.default_rng(5), 4, 2, 6)
    sets = mine_negatives(batch, k=2)
    total, parts = alignment_loss(batch, sets, lambda_ch=0.0, temperature=0.07)
    assert total.item() == pytest.approx(parts["global"], abs=1e-12)


def test_alignment_loss_decomposes_and_parts_nonnegative():
    batch = random_batch(np.random.default_rng(6), 5, 3, 8)
    sets = mine_negatives(batch, k=3)
    lam = 0.7
    total, parts = alignment_loss(batch, sets, lambda_ch=lam, temperature=0.1)
    assert parts["global"] >= 0.0 and parts["channel"] >= 0.0
    assert total.item() == pytest.approx(parts["global"] + lam * parts["channel"], rel=1e-12)


def test_alignment_loss_invariant_to_logit_offset():
    # softmax shift invariance: offsetting every similarity by a constant
    # (implemented on the similarity matrix) leaves each direction unchanged
    rng = np.random.default_rng(7)
    sim = Tensor(rng.standard_normal((4, 4)))
    neg = np.array([[1, 2], [0, 3], [3, 0], [1, 2]])
    from tracemm.align import _direction_loss

    base = _direction_loss(sim, neg, 0.07).item()
    shifted = _direction_loss(Tensor(sim.data + 3.7), neg, 0.07).item()
    assert shifted == pytest.approx(base, abs=1e-9)


def test_alignment_loss_full_gradient_check():
    # through the encoder, fusion, projection, and loss on a 2-instance batch
    model = tiny_aligned_model()
    corpus = generate_corpus(0, channels=2, timesteps=12, n_per_class=1, class_count=2, patch_len=3)
    instances = corpus.instances
    x = np.stack([inst.values for inst in instances])
    cxt_feat, ch_feat = corpus_text_features(model.textenc, instances)

    batch0 = model.batch_embeddings(x, cxt_feat, ch_feat)
    sets = mine_negatives(batch0, k=1)

    def loss():
        batch = model.batch_embeddings(x, cxt_feat, ch_feat)
        return alignment_loss(batch, sets, lambda_ch=1.0, temperature=0.5)[0]

    check_gradients(loss, model.trainable_params(), tol=1e-4)


# ---------------------------------------------------------------------------
# training loop


def test_align_reduces_loss_and_keeps_frozen_table():
    corpus = generate_corpus(
        1, channels=2, timesteps=24, n_per_class=40, class_count=2, patch_len=3, noise_scale=0.05
    )
    model = tiny_aligned_model(d=32)
    frozen = model.textenc.frozen_matrix.tobytes()
    config = AlignConfig(
        k=2, epochs=60, batch_size=16, lr=5e-3, temperature=0.2, seed=0, weight_decay=0.0
    )
    model, history = align(corpus, model, config)
    means = epoch_mean_losses(history)
    assert means[-1] <= 0.5 * means[0]
    assert model.textenc.frozen_matrix.tobytes() == frozen


def test_align_determinism():
    corpus = generate_corpus(2, channels=2, timesteps=24, n_per_class=12, class_count=2, patch_len=3)
    h1 = align(corpus, tiny_aligned_model(seed=4), AlignConfig(k=2, epochs=2, batch_size=8, seed=9))[1]
    h2 = align(corpus, tiny_aligned_model(seed=4), AlignConfig(k=2, epochs=2, batch_size=8, seed=9))[1]
    assert [h.loss for h in h1] == [h.loss for h in h2]


def test_align_margin_on_heldout():
    # pretrain briefly, align, then compare paired vs mismatched cosine on the
    # held-out split
    from tracemm.pretrain import PretrainConfig, pretrain

    corpus = generate_corpus(
        1, channels=2, timesteps=24, n_per_class=60, class_count=2, patch_len=3, noise_scale=0.05
    )
    model = tiny_aligned_model(seed=0, d=32)
    pretrain(corpus, model.encoder, PretrainConfig(epochs=10, batch_size=16, lr=3e-3, seed=0, weight_decay=0.0))
    model, _ = align(
        corpus,
        model,
        AlignConfig(k=2, epochs=150, batch_size=16, lr=5e-3, temperature=0.2, seed=0, weight_decay=0.0),
    )
    held = corpus.split("test")
    x = np.stack([inst.values for inst in held])
    cxt_feat, _ = corpus_text_features(model.textenc, held)
    out, _ = model.encoder.encode_batch(x)
    h = out.h_cls.data / np.linalg.norm(out.h_cls.data, axis=1, keepdims=True)
    z = model.textenc.project(cxt_feat).data
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    paired = float(np.mean(np.sum(h * z, axis=1)))
    mismatched = float(np.mean(np.sum(h * np.roll(z, 1, axis=0), axis=1)))
    assert paired - mismatched >= 0.2
