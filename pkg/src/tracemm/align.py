"""Cross-modal alignment: frozen text featurizer with a learnable projection,
cross-attention fusion of channel representations with channel texts,
dual-level hard-negative mining, and the bidirectional contrastive objective.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Corpus, TimeSeriesInstance
from .model import Encoder
from .optim import AdamWState, adamw_step
from .pretrain import HistoryEntry, LrSchedule, lr_at, stack_split
from .rng import substream
from .text import tokenize_text

log = logging.getLogger("trace.align")

TEXT_FEATURE_DIM = 64
BAG_WIDTH = 1024


def _token_bucket(token: str, width: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % width


class TextEmbedder:
    """Deterministic frozen featurizer plus a learnable projection.

    Tokens hash into a fixed-width bag vector which a frozen seeded random
    matrix compresses to ``TEXT_FEATURE_DIM``; only the linear projection to
    the shared embedding width trains. Identical strings always produce
    identical embeddings.
    """

    def __init__(
        self,
        d: int,
        seed: int = 0,
        bag_width: int = BAG_WIDTH,
        d_text: int = TEXT_FEATURE_DIM,
        params: dict[str, Tensor] | None = None,
    ):
        self.d = d
        self.bag_width = bag_width
        self.d_text = d_text
        self.seed = seed
        rng = substream(seed, "textenc-frozen")
        self.frozen_matrix = (
            rng.standard_normal((bag_width, d_text)) / math.sqrt(bag_width)
        ).astype(np.float32).astype(np.float64)
        self.frozen_matrix.flags.writeable = False
        if params is not None:
            self.params = params
        else:
            proj_rng = substream(seed, "textenc-proj")
            w = (proj_rng.standard_normal((d_text, d)) / math.sqrt(d_text)).astype(
                np.float32
            ).astype(np.float64)
            self.params = {
                "textenc.proj.w": Tensor(w, requires_grad=True),
                "textenc.proj.b": Tensor(np.zeros(d), requires_grad=True),
            }

    def bag_vector(self, text: str) -> np.ndarray:
        bag = np.zeros(self.bag_width)
        tokens = tokenize_text(text)
        if not tokens:
            log.warning("empty text maps to the zero bag vector (projection bias only)")
        for token in tokens:
            bag[_token_bucket(token, self.bag_width)] += 1.0
        return bag

    def features(self, texts: list[str]) -> np.ndarray:
        """Frozen (n, d_text) features; no gradient ever flows here."""
        bags = np.stack([self.bag_vector(t) for t in texts])
        return bags @ self.frozen_matrix

    def project(self, features: np.ndarray) -> Tensor:
        return ad.add(
            ad.matmul(Tensor(features), self.params["textenc.proj.w"]),
            self.params["textenc.proj.b"],
        )

    def embed_texts(self, instance: TimeSeriesInstance) -> tuple[Tensor, Tensor]:
        """(context embedding (d,), channel embeddings (C, d)) for one instance."""
        z = self.project(self.features([instance.context_text] + instance.channel_texts))
        z_cxt = ad.reshape(ad.slice_(z, (slice(0, 1),)), (self.d,))
        z_ch = ad.slice_(z, (slice(1, None),))
        return z_cxt, z_ch


class CrossModalFuse:
    """Single-head cross-attention from channel representations onto their
    channel-text embeddings, added residually. The output projection starts
    at zero, so an untrained fuse is the identity."""

    def __init__(self, d: int, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.d = d
        if params is not None:
            self.params = params
            return
        rng = substream(seed, "fuse")

        def w():
            arr = (rng.standard_normal((d, d)) / math.sqrt(d)).astype(np.float32).astype(np.float64)
            return Tensor(arr, requires_grad=True)

        self.params = {
            "fuse.wq": w(),
            "fuse.wk": w(),
            "fuse.wv": w(),
            "fuse.wo": Tensor(np.zeros((d, d)), requires_grad=True),
        }

    def fuse(self, h_cit: Tensor, z_ch: Tensor) -> Tensor:
        """refined = h_cit + Attn(q=h_cit, k=z_ch, v=z_ch); shapes (B, C, d)."""
        batch, channels, d = h_cit.shape

        def proj(x, wname):
            return ad.reshape(
                ad.matmul(ad.reshape(x, (batch * channels, d)), self.params[wname]),
                (batch, channels, d),
            )

        q = proj(h_cit, "fuse.wq")
        k = proj(z_ch, "fuse.wk")
        v = proj(z_ch, "fuse.wv")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        probs = ad.softmax_lastdim(scores)
        mixed = proj(ad.matmul(probs, v), "fuse.wo")
        return ad.add(h_cit, mixed)


# ---------------------------------------------------------------------------
# batches and negative mining


@dataclass
class AlignmentBatch:
    h_cls: Tensor    # (B, d)
    h_cit: Tensor    # (B, C, d) after fusion
    z_cxt: Tensor    # (B, d)
    z_ch: Tensor     # (B, C, d)
    n_cls: Tensor = None  # unit-norm views, filled by normalize()
    n_cit: Tensor = None
    n_cxt: Tensor = None
    n_ch: Tensor = None

    def normalize(self) -> "AlignmentBatch":
        self.n_cls = ad.l2_normalize_lastdim(self.h_cls)
        self.n_cit = ad.l2_normalize_lastdim(self.h_cit)
        self.n_cxt = ad.l2_normalize_lastdim(self.z_cxt)
        self.n_ch = ad.l2_normalize_lastdim(self.z_ch)
        return self


@dataclass
class NegativeSets:
    """Top-K hard-negative candidate indices per anchor, both directions.

    Sample-level arrays are (B, K1) indices into the batch; channel-level
    arrays are (B*C, K2) flattened ``j * C + c`` indices. Ties break toward
    the lower candidate index; K clamps to the candidate-pool size.
    """

    cxt_ts: np.ndarray
    cxt_text: np.ndarray
    ch_ts: np.ndarray
    ch_text: np.ndarray


def _topk_rows(sim: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :k]


def mine_negatives(batch: AlignmentBatch, k: int, restricted_channel_pool: bool = False) -> NegativeSets:
    """Select the K most similar non-matching candidates at both levels.

    Operates on the normalized embeddings' values only; the selection is
    discrete and no gradient flows through it. The channel-level pool is
    every (instance, channel) pair other than the anchor itself; the
    restricted variant keeps only same-instance other channels and
    same-channel other instances.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hn = batch.n_cls.data
    zn = batch.n_cxt.data
    b = hn.shape[0]
    if b < 2:
        raise ValueError("mining needs a batch of at least 2 instances")

    s = hn @ zn.T  # s[i, j] = sim(h_cls_i, z_cxt_j)
    k1 = min(k, b - 1)
    np.fill_diagonal(s, -np.inf)
    cxt_ts = _topk_rows(s, k1)
    cxt_text = _topk_rows(s.T.copy(), k1)

    hc = batch.n_cit.data.reshape(b * batch.n_cit.shape[1], -1)
    zc = batch.n_ch.data.reshape(hc.shape)
    channels = batch.n_cit.shape[1]
    sc = hc @ zc.T
    flat = b * channels
    if restricted_channel_pool:
        allowed = np.zeros((flat, flat), dtype=bool)
        idx = np.arange(flat)
        inst = idx // channels
        chan = idx % channels
        same_inst = inst[:, None] == inst[None, :]
        same_chan = chan[:, None] == chan[None, :]
        allowed = (same_inst & ~same_chan) | (~same_inst & same_chan)
        sc_ts = np.where(allowed, sc, -np.inf)
        sc_text = np.where(allowed, sc.T, -np.inf)
        pool = channels - 1 + b - 1
    else:
        sc_ts = sc.copy()
        np.fill_diagonal(sc_ts, -np.inf)
        sc_text = sc.T.copy()
        np.fill_diagonal(sc_text, -np.inf)
        pool = flat - 1
    k2 = min(k, pool)
    return NegativeSets(
        cxt_ts=cxt_ts,
        cxt_text=cxt_text,
        ch_ts=_topk_rows(sc_ts, k2),
        ch_text=_topk_rows(sc_text, k2),
    )


# ---------------------------------------------------------------------------
# contrastive losses


def info_nce(anchor: Tensor, positive: Tensor, negatives, temperature: float) -> Tensor:
    """-log of the positive's softmax share among {positive} + negatives.

    All vectors must already be unit-normalized; similarity is the dot
    product. With no negatives the loss is exactly zero.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    candidates = [positive] + list(negatives)
    sims = ad.stack([ad.sum_(ad.mul(anchor, c)) for c in candidates])
    scaled = ad.scale(sims, 1.0 / temperature)
    lse = ad.logsumexp_lastdim(scaled)
    return ad.sub(lse, ad.slice_(scaled, (0,)))


def _direction_loss(sim: Tensor, neg_idx: np.ndarray, temperature: float) -> Tensor:
    """Mean over anchors of -log softmax(positive | positive + mined negatives).

    ``sim[i, i]`` is anchor i's positive; ``neg_idx[i]`` lists its negative
    columns."""
    n, k = neg_idx.shape[0], neg_idx.shape[1]
    rows = np.repeat(np.arange(n)[:, None], k + 1, axis=1)
    cols = np.concatenate([np.arange(n)[:, None], neg_idx], axis=1)
    logits = ad.scale(ad.take_pairs(sim, rows, cols), 1.0 / temperature)
    lse = ad.logsumexp_lastdim(logits)
    pos = ad.slice_(logits, (slice(None), 0))
    return ad.mean(ad.sub(lse, pos))


def alignment_loss(
    batch: AlignmentBatch,
    sets: NegativeSets,
    lambda_ch: float,
    temperature: float,
) -> tuple[Tensor, dict[str, float]]:
    """Total objective: the two sample-level directions averaged, plus
    ``lambda_ch`` times the averaged channel-level directions (which already
    average over channels). Returns the scalar and the detached parts."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    b, channels, d = batch.n_cit.shape

    s_global = ad.matmul(batch.n_cls, ad.transpose(batch.n_cxt, (1, 0)))
    g_ts2t = _direction_loss(s_global, sets.cxt_ts, temperature)
    g_t2ts = _direction_loss(ad.transpose(s_global, (1, 0)), sets.cxt_text, temperature)

    hc = ad.reshape(batch.n_cit, (b * channels, d))
    zc = ad.reshape(batch.n_ch, (b * channels, d))
    s_channel = ad.matmul(hc, ad.transpose(zc, (1, 0)))
    c_ts2t = _direction_loss(s_channel, sets.ch_ts, temperature)
    c_t2ts = _direction_loss(ad.transpose(s_channel, (1, 0)), sets.ch_text, temperature)

    global_part = ad.scale(ad.add(g_ts2t, g_t2ts), 0.5)
    channel_part = ad.scale(ad.add(c_ts2t, c_t2ts), 0.5)
    total = ad.add(global_part, ad.scale(channel_part, lambda_ch))
    parts = {
        "global": global_part.item(),
        "channel": channel_part.item(),
    }
    return total, parts


# ---------------------------------------------------------------------------
# stage-2 training


@dataclass
class AlignConfig:
    k: int = 32
    lambda_ch: float = 1.0
    temperature: float = 0.07
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    restricted_channel_pool: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise ValueError("contrastive batches need at least 2 instances")


@dataclass
class AlignedModel:
    encoder: Encoder
    textenc: TextEmbedder
    fuse: CrossModalFuse

    def trainable_params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.textenc.params, **self.fuse.params}

    def batch_embeddings(
        self,
        x: np.ndarray,
        cxt_features: np.ndarray,
        ch_features: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> AlignmentBatch:
        """Encode series and project frozen text features for one batch.

        Channel representations are refined by cross-attention onto the
        channel-text embeddings (training-time fusion); retrieval uses the
        unfused encoder outputs instead.
        """
        b, channels = x.shape[0], x.shape[1]
        output, _ = self.encoder.encode_batch(x, train=train, rng=rng)
        z_cxt = self.textenc.project(cxt_features)
        z_ch = ad.reshape(
            self.textenc.project(ch_features.reshape(b * channels, -1)),
            (b, channels, self.encoder.cfg.d),
        )
        refined = self.fuse.fuse(output.h_cit, z_ch)
        return AlignmentBatch(h_cls=output.h_cls, h_cit=refined, z_cxt=z_cxt, z_ch=z_ch).normalize()


def corpus_text_features(
    textenc: TextEmbedder, instances: list[TimeSeriesInstance]
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen features for all context texts (N, d_text) and channel texts
    (N, C, d_text); computed once since the frozen featurizer never changes."""
    cxt = textenc.features([inst.context_text for inst in instances])
    ch = np.stack([textenc.features(inst.channel_texts) for inst in instances])
    return cxt, ch


def align(
    corpus: Corpus, model: AlignedModel, config: AlignConfig
) -> tuple[AlignedModel, list[HistoryEntry]]:
    """Stage-2 training of encoder + text projection + fusion parameters.

    The frozen text featurizer is untouched; mined negative sets are
    recomputed every step from the current embeddings.
    """
    instances = corpus.split("train")
    data = stack_split(corpus, "train")
    cxt_feat, ch_feat = corpus_text_features(model.textenc, instances)

    n = data.shape[0]
    if n < config.batch_size:
        raise ValueError(f"train split ({n}) smaller than batch size ({config.batch_size})")
    steps_per_epoch = max(1, n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    schedule = LrSchedule(
        peak=config.lr,
        warmup_steps=max(1, int(config.warmup_frac * total_steps)),
        total_steps=total_steps,
    )
    order_rng = substream(config.seed, "align-order")
    train_rng = substream(config.seed, "align-dropout")
    params = model.trainable_params()
    frozen_before = model.textenc.frozen_matrix.tobytes()

    state = AdamWState()
    history: list[HistoryEntry] = []
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for bi in range(steps_per_epoch):
            sel = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            if sel.size < 2:
                continue
            batch = model.batch_embeddings(
                data[sel], cxt_feat[sel], ch_feat[sel], train=True, rng=train_rng
            )
            sets = mine_negatives(batch, config.k, config.restricted_channel_pool)
            ad.zero_grad(params.values())
            loss, parts = alignment_loss(batch, sets, config.lambda_ch, config.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"alignment diverged: non-finite loss at step {step}")
            ad.backward(loss)
            adamw_step(params, state, lr=lr_at(step, schedule), weight_decay=config.weight_decay)
            step += 1
            epoch_losses.append(value)
            history.append(HistoryEntry(step=step, epoch=epoch, loss=value, extras=parts))
        log.info(
            "align epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, float(np.mean(epoch_losses))
        )

    assert model.textenc.frozen_matrix.tobytes() == frozen_before
    return model, history
