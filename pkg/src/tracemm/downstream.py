"""Desk-scale downstream heads on a frozen encoder: classification on the
aggregate-token embedding, optionally conditioned by a retrieval prompt."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamWState, adamw_step
from .rng import substream

log = logging.getLogger("trace.downstream")


@dataclass
class EvalConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    with_rag: bool = False
    seed: int = 0


def train_classifier(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    n_classes: int,
    config: EvalConfig,
) -> dict[str, Tensor]:
    """Softmax-regression head on fixed embeddings."""
    n, d = train_features.shape
    rng = substream(config.seed, "cls-head")
    params = {
        "w": Tensor(rng.standard_normal((d, n_classes)) * 0.02, requires_grad=True),
        "b": Tensor(np.zeros(n_classes), requires_grad=True),
    }
    state = AdamWState()
    order_rng = substream(config.seed, "cls-order")
    steps = max(1, n // config.batch_size)
    for _ in range(config.epochs):
        order = order_rng.permutation(n)
        for bi in range(steps):
            sel = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            if sel.size == 0:
                continue
            logits = ad.add(ad.matmul(Tensor(train_features[sel]), params["w"]), params["b"])
            lse = ad.logsumexp_lastdim(logits)
            picked = ad.take_pairs(logits, np.arange(sel.size), train_labels[sel])
            loss = ad.mean(ad.sub(lse, picked))
            ad.zero_grad(params.values())
            ad.backward(loss)
            adamw_step(params, state, lr=config.lr, weight_decay=config.weight_decay)
    return params


def classification_metrics(
    params: dict[str, Tensor], features: np.ndarray, labels: np.ndarray, n_classes: int
) -> dict[str, float]:
    logits = features @ params["w"].data + params["b"].data
    pred = logits.argmax(axis=1)
    accuracy = float(np.mean(pred == labels))
    f1s = []
    for c in range(n_classes):
        tp = float(np.sum((pred == c) & (labels == c)))
        fp = float(np.sum((pred == c) & (labels != c)))
        fn = float(np.sum((pred != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return {"accuracy": accuracy, "macro_f1": float(np.mean(f1s))}
