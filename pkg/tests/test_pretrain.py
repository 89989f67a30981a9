"""Learning-rate schedule and masked-reconstruction training tests."""

import numpy as np
import pytest

from tracemm import autodiff as ad
from tracemm.dataset import generate_corpus
from tracemm.model import Encoder, ModelConfig
from tracemm.pretrain import (
    HistoryEntry,
    LrSchedule,
    PretrainConfig,
    epoch_mean_losses,
    lr_at,
    pretrain,
    reconstruction_loss,
    save_history,
    stack_split,
)


def tiny_model(seed=0, channels=2):
    return Encoder(
        ModelConfig(d=8, n_layers=1, n_heads=2, patch_len=3, channels=channels, dropout=0.0),
        seed=seed,
    )


def tiny_corpus(seed=0, **kw):
    kw.setdefault("channels", 2)
    kw.setdefault("timesteps", 24)
    kw.setdefault("n_per_class", 20)
    kw.setdefault("class_count", 2)
    kw.setdefault("patch_len", 3)
    return generate_corpus(seed, **kw)


# ---------------------------------------------------------------------------
# schedule


def test_lr_zero_at_step_zero():
    sched = LrSchedule(peak=1e-3, warmup_steps=10, total_steps=100)
    assert lr_at(0, sched) == 0.0


def test_lr_peak_at_warmup():
    sched = LrSchedule(peak=1e-3, warmup_steps=10, total_steps=100)
    assert lr_at(10, sched) == pytest.approx(1e-3, rel=1e-12)


def test_lr_zero_at_total():
    sched = LrSchedule(peak=1e-3, warmup_steps=10, total_steps=100)
    assert abs(lr_at(100, sched)) < 1e-12


def test_lr_monotone_rise_then_decay():
    sched = LrSchedule(peak=1.0, warmup_steps=5, total_steps=50)
    values = [lr_at(s, sched) for s in range(51)]
    assert all(values[i] < values[i + 1] for i in range(4))
    assert all(values[i] >= values[i + 1] for i in range(5, 50))


def test_schedule_rejects_bad_warmup():
    with pytest.raises(ValueError):
        LrSchedule(peak=1.0, warmup_steps=10, total_steps=10)


# ---------------------------------------------------------------------------
# loss semantics


def test_loss_covers_only_masked_positions():
    # gamma small enough that exactly one patch token is masked: the loss is
    # that token's squared error divided by the patch length
    model = tiny_model()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 24))  # 8 patches per channel, 16 total

    output, bitmap = model.encode_batch(x, mask_gamma=1e-9, rng=np.random.default_rng(1))
    assert bitmap.sum() == 1
    pred = model.reconstruction_head(output)
    layout = output.seq.layout
    x_norm = (x - output.revin.mean) / output.revin.std
    targets = x_norm.reshape(1, 2, layout.t_hat, 3)

    pos = int(np.flatnonzero(bitmap[0])[0])
    flat_idx = int(np.where(layout.all_patch_positions == pos)[0][0])
    c, t = divmod(flat_idx, layout.t_hat)
    by_hand = float(np.sum((pred.data[0, c, t] - targets[0, c, t]) ** 2) / 3)

    loss = reconstruction_loss(model, x, 1e-9, np.random.default_rng(1), train=False)
    assert loss.item() == pytest.approx(by_hand, rel=1e-9)


def test_initial_loss_near_unit_variance():
    corpus = tiny_corpus(n_per_class=30)
    model = tiny_model()
    x = stack_split(corpus, "train")
    loss = reconstruction_loss(model, x, 0.3, np.random.default_rng(0), train=False)
    assert 0.7 <= loss.item() <= 1.3


def test_degenerate_corpus_reaches_tiny_loss():
    corpus = tiny_corpus(
        noise_scale=0.0, trend_scale=0.0, cycle_scale=0.0, spike_scale=0.0, shift_scale=0.0
    )
    model = tiny_model()
    _, history = pretrain(corpus, model, PretrainConfig(epochs=5, batch_size=16, seed=0))
    assert epoch_mean_losses(history)[-1] < 1e-3


def test_loss_halves_on_structured_corpus():
    corpus = tiny_corpus(n_per_class=40, noise_scale=0.05, spike_scale=0.0)
    model = Encoder(
        ModelConfig(d=32, n_layers=2, n_heads=2, patch_len=3, channels=2, dropout=0.0), seed=0
    )
    _, history = pretrain(corpus, model, PretrainConfig(epochs=30, batch_size=16, lr=3e-3, seed=0))
    means = epoch_mean_losses(history)
    assert means[-1] <= 0.5 * means[0]


def test_identical_seeds_identical_history():
    corpus = tiny_corpus()
    h1 = pretrain(corpus, tiny_model(seed=3), PretrainConfig(epochs=2, batch_size=8, seed=5))[1]
    h2 = pretrain(corpus, tiny_model(seed=3), PretrainConfig(epochs=2, batch_size=8, seed=5))[1]
    assert [h.loss for h in h1] == [h.loss for h in h2]


def test_nan_loss_aborts_with_step():
    corpus = tiny_corpus()
    model = tiny_model()
    model.params["embed.patch.w"].data[:] = np.nan
    with pytest.raises(RuntimeError, match="step 0"):
        pretrain(corpus, model, PretrainConfig(epochs=1, batch_size=8, seed=0))


def test_history_file_round_trip(tmp_path):
    history = [
        HistoryEntry(step=1, epoch=0, loss=0.5),
        HistoryEntry(step=2, epoch=0, loss=0.25),
    ]
    path = tmp_path / "history.txt"
    save_history(history, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].split() == ["1", "0", "0.5"]


def test_stack_split_requires_uniform_shapes():
    corpus = tiny_corpus()
    corpus.instances[0].values = corpus.instances[0].values[:, :-1]
    with pytest.raises(ValueError, match="non-uniform"):
        stack_split(corpus, "train")
