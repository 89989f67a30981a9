"""Retrieval-augmented forecasting with a frozen backbone.

A query's nearest (series, text) pairs are compressed by one trainable
affine map into a single prefix vector prepended to the frozen encoder's
token sequence; only that projection and the forecasting head train.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .align import AlignedModel
from .dataset import ForecastPair, TimeSeriesInstance
from .model import Encoder, ForecastHead
from .optim import AdamWState, adamw_step
from .retrieval import EmbeddingIndex, build_index, query
from .rng import substream

log = logging.getLogger("trace.rag")

MODE_TS_ONLY = "ts_only"
MODE_TS_TEXT = "ts_text"


@dataclass
class RagConfig:
    r: int = 3
    mode: str = MODE_TS_TEXT
    d_f: int | None = None  # defaults to the encoder width; anything else is rejected
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.mode not in (MODE_TS_ONLY, MODE_TS_TEXT):
            raise ValueError(f"mode must be '{MODE_TS_ONLY}' or '{MODE_TS_TEXT}', got {self.mode!r}")


class PromptProjector:
    """Affine map from R concatenated retrieved-pair embeddings to one prefix
    vector of the backbone width. Zero-initialized by default, so an untrained
    prompt is the zero vector."""

    def __init__(
        self,
        d: int,
        r: int,
        mode: str,
        d_f: int | None = None,
        zero_init: bool = True,
        seed: int = 0,
    ):
        d_f = d if d_f is None else d_f
        if d_f != d:
            raise ValueError(
                f"prompt width d_f={d_f} must equal the backbone width d={d}"
            )
        if mode not in (MODE_TS_ONLY, MODE_TS_TEXT):
            raise ValueError(f"unknown prompt mode {mode!r}")
        self.d = d
        self.r = r
        self.mode = mode
        self.width_in = (2 * r * d) if mode == MODE_TS_TEXT else r * d
        if zero_init:
            w = np.zeros((self.width_in, d_f))
        else:
            rng = substream(seed, "rag-proj")
            w = rng.standard_normal((self.width_in, d_f)).astype(np.float32).astype(np.float64) * 0.02
        self.params = {
            "rag.proj.w": Tensor(w, requires_grad=True),
            "rag.proj.b": Tensor(np.zeros(d_f), requires_grad=True),
        }

    def build(self, h_ts: np.ndarray, z_cxt: np.ndarray | None) -> Tensor:
        """Soft prompts for a batch: h_ts is (B, R, d); z_cxt is required and
        interleaved per retrieved pair in the ts+text mode."""
        b, r, d = h_ts.shape
        if r != self.r or d != self.d:
            raise ValueError(f"expected (B, {self.r}, {self.d}) retrieved embeddings, got {h_ts.shape}")
        if self.mode == MODE_TS_TEXT:
            if z_cxt is None:
                raise ValueError("ts+text prompts need text embeddings")
            if z_cxt.shape != h_ts.shape:
                raise ValueError(f"text embeddings {z_cxt.shape} must match {h_ts.shape}")
            blocks = np.concatenate([h_ts[:, :, None, :], z_cxt[:, :, None, :]], axis=2)
            flat = blocks.reshape(b, self.width_in)
        else:
            flat = h_ts.reshape(b, self.width_in)
        return ad.add(ad.matmul(Tensor(flat), self.params["rag.proj.w"]), self.params["rag.proj.b"])


def retrieve_context(
    query_series: np.ndarray,
    index: EmbeddingIndex,
    r: int,
    model: AlignedModel,
    exclude_id: str | None = None,
) -> list[TimeSeriesInstance]:
    """Top-R corpus pairs by aggregate-embedding cosine; delegates ranking to
    the retrieval engine. R beyond the pool clamps to the pool."""
    output, _ = model.encoder.encode_batch(np.asarray(query_series)[None], train=False)
    vec = output.h_cls.data[0]
    vec = vec / np.sqrt(np.sum(vec * vec) + 1e-24)
    result = query(index, vec, k=r, exclude_id=exclude_id)
    return [index.payload(item.id) for item in result.items]


def rag_forecast(
    query_series: np.ndarray,
    prompt: Tensor | None,
    encoder: Encoder,
    head: ForecastHead,
    prefix_visible: bool = True,
) -> Tensor:
    """Forecast with the soft prompt prepended as a prefix row.

    The prefix attends and is attended like a patch token with the identity
    rotation, except channel-identity rows never see it (it belongs to no
    channel). ``prefix_visible=False`` hides it from every row, which makes
    the output exactly equal to the promptless forecast."""
    x = np.asarray(query_series, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    output, _ = encoder.encode_batch(x, train=False, prompt=prompt, prefix_visible=prefix_visible)
    return head.forward(encoder.patch_outputs(output), output.revin)


# ---------------------------------------------------------------------------
# training


def _history_instances(pairs: list[ForecastPair]) -> list[TimeSeriesInstance]:
    return [
        TimeSeriesInstance(
            id=pair.instance.id,
            values=pair.history,
            channel_texts=pair.instance.channel_texts,
            context_text=pair.instance.context_text,
            label=pair.instance.label,
            split=pair.instance.split,
        )
        for pair in pairs
    ]


def _context_embeddings(
    pairs: list[ForecastPair],
    index: EmbeddingIndex,
    text_vectors: np.ndarray,
    model: AlignedModel,
    r: int,
    exclude_self: bool,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Per query: (R, d) retrieved series embeddings and (R, d) retrieved
    context-text embeddings. Fixed for the whole run since the backbone and
    the corpus are frozen."""
    d = index.vectors.shape[1]
    queries = np.zeros((len(pairs), d))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        x = np.stack([p.history for p in chunk])
        output, _ = model.encoder.encode_batch(x, train=False)
        h = output.h_cls.data
        queries[start : start + len(chunk)] = h / np.sqrt(
            np.sum(h * h, axis=1, keepdims=True) + 1e-24
        )
    h_ts = np.zeros((len(pairs), r, d))
    z_cxt = np.zeros((len(pairs), r, d))
    for i, pair in enumerate(pairs):
        result = query(
            index, queries[i], k=r, exclude_id=pair.instance.id if exclude_self else None
        )
        positions = [index.position(item.id) for item in result.items]
        if len(positions) < r:  # pool smaller than R: repeat the last hit
            positions += [positions[-1]] * (r - len(positions))
        h_ts[i] = index.vectors[positions]
        z_cxt[i] = text_vectors[positions]
    return h_ts, z_cxt


def _params_checksum(model: AlignedModel) -> bytes:
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(model.trainable_params()):
        digest.update(model.trainable_params()[name].data.tobytes())
    return digest.digest()


def _train_one_setting(
    setting: str,
    model: AlignedModel,
    train_pairs: list[ForecastPair],
    test_pairs: list[ForecastPair],
    context: dict[str, tuple[np.ndarray, np.ndarray]],
    config: RagConfig,
) -> dict[str, float]:
    encoder = model.encoder
    x_train = np.stack([p.history for p in train_pairs])
    y_train = np.stack([p.future for p in train_pairs])
    x_test = np.stack([p.history for p in test_pairs])
    y_test = np.stack([p.future for p in test_pairs])
    horizon = y_train.shape[2]
    t_hat = x_train.shape[2] // encoder.cfg.patch_len

    head = ForecastHead(encoder.cfg.d, t_hat, horizon, seed=config.seed)
    params = dict(head.params)
    proj = None
    if setting != "no_rag":
        proj = PromptProjector(encoder.cfg.d, config.r, setting, zero_init=True)
        params.update(proj.params)

    def prompts_for(split: str, sel: np.ndarray) -> Tensor | None:
        if proj is None:
            return None
        h_ts, z_cxt = context[split]
        return proj.build(h_ts[sel], z_cxt[sel] if setting == MODE_TS_TEXT else None)

    state = AdamWState()
    rng = substream(config.seed, f"rag-order-{setting}")
    n = x_train.shape[0]
    steps_per_epoch = max(1, n // config.batch_size)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for bi in range(steps_per_epoch):
            sel = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            prompt = prompts_for("train", sel)
            pred = rag_forecast(x_train[sel], prompt, encoder, head)
            ad.zero_grad(params.values())
            loss = ad.mse(pred, Tensor(y_train[sel]))
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"rag training diverged at step {step} ({setting})")
            ad.backward(loss)
            adamw_step(params, state, lr=config.lr, weight_decay=config.weight_decay)
            step += 1

    mae_total, mse_total, count = 0.0, 0.0, 0
    for start in range(0, x_test.shape[0], config.batch_size):
        sel = np.arange(start, min(start + config.batch_size, x_test.shape[0]))
        pred = rag_forecast(x_test[sel], prompts_for("test", sel), encoder, head).data
        diff = pred - y_test[sel]
        mae_total += float(np.abs(diff).sum())
        mse_total += float((diff * diff).sum())
        count += diff.size
    report = {"mae": mae_total / count, "mse": mse_total / count}
    log.info("rag setting %-8s test mae %.4f mse %.4f", setting, report["mae"], report["mse"])
    return report


def train_rag(
    train_pairs: list[ForecastPair],
    test_pairs: list[ForecastPair],
    model: AlignedModel,
    config: RagConfig,
) -> dict[str, dict[str, float]]:
    """Train and evaluate the three conditioning settings on a frozen backbone.

    Returns {"no_rag": {mae, mse}, "ts_only": ..., "ts_text": ...}. The no-RAG
    baseline trains an identical fresh head for the same number of steps with
    no prefix. Backbone parameters are verified unchanged.
    """
    if not train_pairs or not test_pairs:
        raise ValueError("need non-empty train and test forecast pairs")
    before = _params_checksum(model)
    backbone = model.trainable_params()
    for p in backbone.values():  # frozen: no gradients accumulate on the backbone
        p.requires_grad = False

    try:
        index = build_index(_history_instances(train_pairs), model, "TS")
        feats = model.textenc.features([p.instance.context_text for p in train_pairs])
        text_vecs = model.textenc.project(feats).data
        text_vecs = text_vecs / np.sqrt(np.sum(text_vecs * text_vecs, axis=1, keepdims=True) + 1e-24)

        context = {
            "train": _context_embeddings(train_pairs, index, text_vecs, model, config.r, exclude_self=True),
            "test": _context_embeddings(test_pairs, index, text_vecs, model, config.r, exclude_self=False),
        }

        report = {
            setting: _train_one_setting(setting, model, train_pairs, test_pairs, context, config)
            for setting in ("no_rag", MODE_TS_ONLY, MODE_TS_TEXT)
        }
    finally:
        for p in backbone.values():
            p.requires_grad = True
    if _params_checksum(model) != before:
        raise RuntimeError("backbone parameters changed during rag training")
    return report
