"""Acceptance criteria, one test per criterion, one printed line each.

The full-scale learnability run (criteria 5-7 share it) takes most of the
module's runtime; run ``pytest -m "not slow"`` to skip it during development.
"""

import math
import time

import numpy as np
import pytest

from tracemm import autodiff as ad
from tracemm.autodiff import Tensor
from tracemm.align import (
    AlignConfig,
    AlignedModel,
    CrossModalFuse,
    TextEmbedder,
    align,
    alignment_loss,
    corpus_text_features,
    info_nce,
    mine_negatives,
)
from tracemm.checkpoint import load_checkpoint, save_checkpoint
from tracemm.dataset import generate_corpus, make_forecast_pairs
from tracemm.model import (
    Encoder,
    ModelConfig,
    SequenceLayout,
    build_attention_mask,
    rope_tables,
    sequence_length,
)
from tracemm.pretrain import PretrainConfig, epoch_mean_losses, pretrain, reconstruction_loss
from tracemm.rag import RagConfig, train_rag
from tracemm.retrieval import (
    EmbeddingIndex,
    build_index,
    evaluate_crossmodal,
    mrr_label,
    precision_at_k,
    query,
    rouge_l_f1,
)

from tests.gradcheck import check_gradients
from tests.test_align import brute_force_sets, independent_alignment_loss, random_batch
from tests.test_retrieval import make_result, paired_indices, unit_rows

# full-scale run settings (criteria 5-7): corpus shape and epoch floors are
# fixed by the criteria; the model is sized for the CPU budget
from tracemm.presets import FULL_SCALE

FULL_DATA = FULL_SCALE["data"]
FULL_MODEL = FULL_SCALE["model"]
FULL_PRETRAIN = FULL_SCALE["pretrain"]
FULL_ALIGN = FULL_SCALE["align"]
POOL = 128


def criterion(number: int, name: str, checks: dict[str, bool], detail: str = ""):
    ok = all(checks.values())
    status = "PASS" if ok else "FAIL"
    suffix = f" — {detail}" if detail else ""
    print(f"\nACCEPTANCE {number} [{name}]: {status}{suffix}")
    assert ok, f"failed checks: {[k for k, v in checks.items() if not v]}"


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness on the tiny config


def test_criterion_1_gradient_correctness():
    started = time.time()
    tol = 1e-4
    enc = Encoder(
        ModelConfig(d=8, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.0), seed=0
    )
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 12))
    mask_rng_seed = 7

    def recon_loss():
        return reconstruction_loss(enc, x, 0.3, np.random.default_rng(mask_rng_seed), train=False)

    recon_errs = check_gradients(recon_loss, enc.params, tol=tol)

    model = AlignedModel(
        encoder=Encoder(
            ModelConfig(d=8, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.0), seed=1
        ),
        textenc=TextEmbedder(d=8, seed=1),
        fuse=CrossModalFuse(d=8, seed=1),
    )
    corpus = generate_corpus(0, channels=2, timesteps=12, n_per_class=1, class_count=2, patch_len=3)
    xb = np.stack([inst.values for inst in corpus.instances])
    cxt_feat, ch_feat = corpus_text_features(model.textenc, corpus.instances)
    sets = mine_negatives(model.batch_embeddings(xb, cxt_feat, ch_feat), k=1)

    def align_loss():
        batch = model.batch_embeddings(xb, cxt_feat, ch_feat)
        return alignment_loss(batch, sets, lambda_ch=1.0, temperature=0.5)[0]

    align_errs = check_gradients(align_loss, model.trainable_params(), tol=tol)
    elapsed = time.time() - started
    criterion(
        1,
        "gradient correctness",
        {
            "reconstruction grads within 1e-4": max(recon_errs.values()) <= tol,
            "alignment grads within 1e-4": max(align_errs.values()) <= tol,
            "runtime under 60s": elapsed < 60,
        },
        detail=(
            f"max rel err recon {max(recon_errs.values()):.2e}, "
            f"align {max(align_errs.values()):.2e}, {elapsed:.1f}s"
        ),
    )


# ---------------------------------------------------------------------------
# criterion 2: structural identities


def test_criterion_2_structural_identities():
    rng = np.random.default_rng(1)
    length_ok = True
    for _ in range(100):
        channels = int(rng.integers(1, 13))
        patch_len = int(rng.integers(1, 17))
        timesteps = patch_len + int(rng.integers(0, 200))
        t_hat = timesteps // patch_len
        length_ok &= sequence_length(channels, timesteps, patch_len) == channels * (t_hat + 1) + 1

    # channel disentanglement of identity rows, checked at every layer
    enc = Encoder(
        ModelConfig(d=16, n_layers=3, n_heads=2, patch_len=4, channels=3, dropout=0.0), seed=2
    )
    layout = SequenceLayout(channels=3, t_hat=5)
    mask = build_attention_mask(layout)
    disentangled = True
    for layer in range(enc.cfg.n_layers):
        hidden = rng.standard_normal((1, layout.length, enc.cfg.d))
        base = enc.cba_layer(Tensor(hidden), mask, layer, layout).data
        for target in range(3):
            perturbed = hidden.copy()
            for other in range(3):
                if other != target:
                    perturbed[0, layout.patch_positions(other)] += rng.standard_normal(
                        (5, enc.cfg.d)
                    )
            moved = enc.cba_layer(Tensor(perturbed), mask, layer, layout).data
            row = layout.cit_pos(target)
            disentangled &= float(np.max(np.abs(moved[0, row] - base[0, row]))) <= 1e-6

    # rotary shift invariance of attention logits
    head_dim = 8
    cos_sin_layout = SequenceLayout(channels=1, t_hat=80)
    cos, sin = rope_tables(cos_sin_layout, head_dim)
    patch0 = cos_sin_layout.patch_positions(0)[0]
    shift_ok = True
    for _ in range(30):
        q = rng.standard_normal(head_dim)
        k = rng.standard_normal(head_dim)
        ti, tj, shift = (int(v) for v in rng.integers(0, 40, size=3))
        def rot(vec, t):
            row = patch0 + t
            out = np.empty_like(vec)
            out[0::2] = vec[0::2] * cos[row] - vec[1::2] * sin[row]
            out[1::2] = vec[0::2] * sin[row] + vec[1::2] * cos[row]
            return out
        base_dot = rot(q, ti) @ rot(k, tj)
        shifted_dot = rot(q, ti + shift) @ rot(k, tj + shift)
        shift_ok &= abs(base_dot - shifted_dot) <= 1e-6

    # softmax rows over unmasked entries sum to one
    scores = rng.standard_normal((4, layout.length, layout.length))
    probs = ad.softmax_lastdim(Tensor(scores), additive_mask=mask).data
    sums_ok = bool(np.all(np.abs(probs.sum(axis=-1) - 1.0) <= 1e-6))

    criterion(
        2,
        "structural identities",
        {
            "sequence-length identity on 100 random shapes": length_ok,
            "identity-row disentanglement <= 1e-6 at every layer": disentangled,
            "rotary shift invariance <= 1e-6": shift_ok,
            "softmax row sums within 1e-6": sums_ok,
        },
    )


# ---------------------------------------------------------------------------
# criterion 3: loss oracles


def test_criterion_3_loss_oracles():
    anchor = Tensor(np.array([1.0, 0.0]))
    fixture = info_nce(anchor, Tensor(np.array([1.0, 0.0])), [Tensor(np.array([0.0, 1.0]))], 1.0)
    nce_ok = abs(fixture.item() - math.log(1 + math.exp(-1))) <= 1e-10

    batch = random_batch(np.random.default_rng(3), 2, 2, 4)
    sets = mine_negatives(batch, k=1)
    total, _ = alignment_loss(batch, sets, lambda_ch=1.0, temperature=1.0)
    oracle = independent_alignment_loss(batch, sets, 1.0, 1.0)
    align_ok = abs(total.item() - oracle) <= 1e-10

    mining_ok = True
    for b in range(2, 9):
        for channels in range(1, 5):
            bt = random_batch(np.random.default_rng(100 + 10 * b + channels), b, channels, 6)
            for k in (1, 3, b * channels):
                fast = mine_negatives(bt, k)
                slow = brute_force_sets(bt, k)
                mining_ok &= (
                    np.array_equal(fast.cxt_ts, slow.cxt_ts)
                    and np.array_equal(fast.cxt_text, slow.cxt_text)
                    and np.array_equal(fast.ch_ts, slow.ch_ts)
                    and np.array_equal(fast.ch_text, slow.ch_text)
                )

    criterion(
        3,
        "loss oracles",
        {
            "info-nce fixture within 1e-10": nce_ok,
            "alignment fixture matches independent oracle within 1e-10": align_ok,
            "mining equals brute force for B<=8, C<=4": mining_ok,
        },
    )


# ---------------------------------------------------------------------------
# criterion 4: metric oracles


def test_criterion_4_metric_oracles():
    hand = make_result(["A", "A", "B", "A", "C"])
    p_ok = precision_at_k(hand, "A", 5) == pytest.approx(0.6)
    mrr_ok = mrr_label(make_result(["B", "C", "A"]), "A") == pytest.approx(1 / 3)
    rouge_ok = rouge_l_f1("the cat sat", "the cat ran") == pytest.approx(2 / 3)

    rng = np.random.default_rng(4)
    n = 1000
    vectors = unit_rows(rng, n, 16)
    index = EmbeddingIndex(
        "TS", [f"q{i:04d}" for i in range(n)], [i % 7 for i in range(n)], vectors, None, [None] * n
    )
    probe = unit_rows(rng, 1, 16)[0]
    result = query(index, probe, k=n)
    scores = vectors @ probe
    expected = sorted(range(n), key=lambda i: (-scores[i], index.ids[i]))
    sort_ok = result.ids == [index.ids[i] for i in expected]

    pool = 2000
    labels = [i % 10 for i in range(pool)]
    ts, text = paired_indices(unit_rows(rng, pool, 16), unit_rows(rng, pool, 16), labels)
    report = evaluate_crossmodal(ts, text, "ts2text")
    p = 1.0 / pool
    sigma = math.sqrt(p * (1 - p) / pool)
    random_ok = abs(report["modality_p@1"] - p) <= 3 * sigma

    criterion(
        4,
        "metric oracles",
        {
            "p@5 hand case": p_ok,
            "mrr hand case": mrr_ok,
            "rouge dp oracle": rouge_ok,
            "top-k equals full sort on 1000 entries": sort_ok,
            "random modality p@1 within 3 sigma of 1/pool": random_ok,
        },
        detail=f"random modality p@1 {report['modality_p@1']:.5f} vs 1/pool {p:.5f}",
    )


# ---------------------------------------------------------------------------
# criteria 5-7 share one full-scale run


@pytest.fixture(scope="module")
def full_run():
    started = time.time()
    corpus = generate_corpus(0, **FULL_DATA)
    encoder = Encoder(ModelConfig(**FULL_MODEL), seed=0)
    encoder, pretrain_history = pretrain(corpus, encoder, PretrainConfig(**FULL_PRETRAIN))
    model = AlignedModel(
        encoder=encoder,
        textenc=TextEmbedder(d=encoder.cfg.d, seed=0),
        fuse=CrossModalFuse(d=encoder.cfg.d, seed=0),
    )
    model, align_history = align(corpus, model, AlignConfig(**FULL_ALIGN))

    held = corpus.split("test")[:POOL]
    index_ts = build_index(held, model, "TS")
    index_text = build_index(held, model, "TEXT")
    reports = {
        direction: evaluate_crossmodal(index_ts, index_text, direction)
        for direction in ("ts2text", "text2ts")
    }
    return {
        "corpus": corpus,
        "model": model,
        "pretrain_history": pretrain_history,
        "align_history": align_history,
        "reports": reports,
        "elapsed": time.time() - started,
    }


@pytest.mark.slow
def test_criterion_5_learnability_end_to_end(full_run):
    reports = full_run["reports"]
    n_train = len(full_run["corpus"].split("train"))
    detail = ", ".join(
        f"{d}: modality_p@1={r['modality_p@1']:.3f} label_p@1={r['label_p@1']:.3f}"
        for d, r in reports.items()
    )
    criterion(
        5,
        "learnability end to end",
        {
            "train split holds >= 2000 instances": n_train >= 2000,
            "pool of 128 pairs": all(r["queries"] == POOL for r in reports.values()),
            "modality p@1 >= 0.50 both directions": all(
                r["modality_p@1"] >= 0.50 for r in reports.values()
            ),
            "label p@1 >= 0.90 both directions": all(
                r["label_p@1"] >= 0.90 for r in reports.values()
            ),
            "runtime <= 30 minutes": full_run["elapsed"] <= 30 * 60,
        },
        detail=f"{detail}, {full_run['elapsed'] / 60:.1f} min",
    )


@pytest.mark.slow
def test_criterion_6_pretraining_efficacy(full_run):
    means = epoch_mean_losses(full_run["pretrain_history"])
    halved = means[-1] <= 0.5 * means[0]

    degenerate = generate_corpus(
        1,
        channels=2,
        timesteps=24,
        n_per_class=20,
        class_count=2,
        patch_len=3,
        noise_scale=0.0,
        trend_scale=0.0,
        cycle_scale=0.0,
        spike_scale=0.0,
        shift_scale=0.0,
    )
    tiny = Encoder(
        ModelConfig(d=16, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.0), seed=0
    )
    _, degen_history = pretrain(
        degenerate, tiny, PretrainConfig(epochs=5, batch_size=16, seed=0, weight_decay=0.0)
    )
    degen_final = epoch_mean_losses(degen_history)[-1]
    criterion(
        6,
        "pretraining efficacy",
        {
            "final loss <= half of initial": halved,
            "degenerate corpus below 1e-3 within 5 epochs": degen_final < 1e-3,
        },
        detail=f"loss {means[0]:.3f} -> {means[-1]:.3f}, degenerate {degen_final:.2e}",
    )


@pytest.mark.slow
def test_criterion_7_rag_direction_of_effect(full_run):
    model = full_run["model"]
    pairs = make_forecast_pairs(full_run["corpus"], **FULL_SCALE["forecast"])
    train = [p for p in pairs if p.instance.split == "train"][:1000]
    test = [p for p in pairs if p.instance.split == "test"]
    before = {k: v.data.copy() for k, v in model.trainable_params().items()}
    report = train_rag(train, test, model, RagConfig(**FULL_SCALE["rag"]))
    frozen_ok = all(
        np.array_equal(before[k], v.data) for k, v in model.trainable_params().items()
    )
    ratio = report["ts_only"]["mse"] / report["no_rag"]["mse"]
    criterion(
        7,
        "rag direction of effect",
        {
            "ts-only mse <= 1.02 x no-rag mse": ratio <= 1.02,
            "frozen backbone unchanged": frozen_ok,
            "report covers three settings": set(report) == {"no_rag", "ts_only", "ts_text"},
        },
        detail=(
            f"no_rag mse {report['no_rag']['mse']:.4f}, ts_only {report['ts_only']['mse']:.4f}, "
            f"ts_text {report['ts_text']['mse']:.4f} (ratio {ratio:.3f})"
        ),
    )


# ---------------------------------------------------------------------------
# criterion 8: persistence and determinism


def test_criterion_8_persistence_and_determinism(tmp_path):
    enc = Encoder(
        ModelConfig(d=16, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.1), seed=3
    )
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(enc, p1)
    loaded = load_checkpoint(p1)
    fresh_exact = all(
        np.array_equal(loaded.params[name].data, p.data) for name, p in enc.params.items()
    )
    save_checkpoint(loaded, p2)
    fixpoint = p1.read_bytes() == p2.read_bytes()

    corpus = generate_corpus(2, channels=2, timesteps=24, n_per_class=10, class_count=2, patch_len=3)
    histories = []
    for _ in range(2):
        model = Encoder(
            ModelConfig(d=16, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.1), seed=3
        )
        _, history = pretrain(corpus, model, PretrainConfig(epochs=3, batch_size=8, seed=11))
        histories.append([h.loss for h in history])
    same_history = histories[0] == histories[1]

    align_histories = []
    for _ in range(2):
        model = AlignedModel(
            encoder=Encoder(
                ModelConfig(d=16, n_layers=1, n_heads=2, patch_len=3, channels=2, dropout=0.1),
                seed=3,
            ),
            textenc=TextEmbedder(d=16, seed=3),
            fuse=CrossModalFuse(d=16, seed=3),
        )
        _, history = align(
            corpus, model, AlignConfig(k=2, epochs=2, batch_size=8, temperature=0.2, seed=11)
        )
        align_histories.append([h.loss for h in history])
        last_model = model
    same_align = align_histories[0] == align_histories[1]

    held = corpus.split("test")
    idx_ts = build_index(held, last_model, "TS")
    idx_text = build_index(held, last_model, "TEXT")
    rep1 = evaluate_crossmodal(idx_ts, idx_text, "ts2text")
    rep2 = evaluate_crossmodal(idx_ts, idx_text, "ts2text")
    same_report = rep1 == rep2

    criterion(
        8,
        "persistence and determinism",
        {
            "fresh checkpoint round-trip bit-exact": fresh_exact,
            "save-load-save byte fixpoint": fixpoint,
            "identical seeds give identical pretraining history": same_history,
            "identical seeds give identical alignment history": same_align,
            "repeated evaluation gives identical report": same_report,
        },
    )
