"""Embedding index, exact top-k cosine retrieval, and the evaluation metric
suite: label/modality precision and reciprocal rank, longest-common-
subsequence text overlap, and raw-space series error of the top hit.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .align import AlignedModel
from .dataset import TimeSeriesInstance
from .text import tokenize_text

MODALITY_TS = "TS"
MODALITY_TEXT = "TEXT"


@dataclass
class RetrievedItem:
    id: str
    score: float
    label: int


@dataclass
class RetrievalResult:
    items: list[RetrievedItem]
    per_channel: np.ndarray | None = None  # (k, C) channel-wise scores

    @property
    def ids(self) -> list[str]:
        return [item.id for item in self.items]


class EmbeddingIndex:
    """Immutable store of unit-normalized embeddings for one modality."""

    def __init__(
        self,
        modality: str,
        ids: list[str],
        labels: list[int],
        vectors: np.ndarray,
        channel_vectors: np.ndarray | None,
        payloads: list[TimeSeriesInstance],
    ):
        if modality not in (MODALITY_TS, MODALITY_TEXT):
            raise ValueError(f"unknown modality {modality!r}")
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique within a modality")
        self.modality = modality
        self.ids = list(ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.channel_vectors = channel_vectors
        self.payloads = list(payloads)
        self._pos = {i: p for p, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, entry_id: str) -> int:
        return self._pos[entry_id]

    def payload(self, entry_id: str) -> TimeSeriesInstance:
        return self.payloads[self._pos[entry_id]]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + 1e-24)


def build_index(
    instances: list[TimeSeriesInstance],
    model: AlignedModel,
    modality: str,
    batch_size: int = 64,
) -> EmbeddingIndex:
    """Encode one modality of every instance into unit vectors.

    Time-series entries store the aggregate-token embedding plus per-channel
    identity-token embeddings; text entries store the projected context
    embedding plus projected channel-text embeddings. Retrieval always uses
    the unfused encoder outputs.
    """
    if not instances:
        raise ValueError("cannot build an index from zero instances")
    sample_vecs = []
    channel_vecs = []
    if modality == MODALITY_TS:
        for start in range(0, len(instances), batch_size):
            chunk = instances[start : start + batch_size]
            x = np.stack([inst.values for inst in chunk])
            output, _ = model.encoder.encode_batch(x, train=False)
            sample_vecs.append(output.h_cls.data)
            channel_vecs.append(output.h_cit.data)
    elif modality == MODALITY_TEXT:
        for inst in instances:
            feats = model.textenc.features([inst.context_text] + inst.channel_texts)
            z = model.textenc.project(feats).data
            sample_vecs.append(z[:1])
            channel_vecs.append(z[None, 1:])
    else:
        raise ValueError(f"unknown modality {modality!r}")
    vectors = _normalize_rows(np.concatenate(sample_vecs, axis=0))
    channels = _normalize_rows(np.concatenate(channel_vecs, axis=0))
    return EmbeddingIndex(
        modality=modality,
        ids=[inst.id for inst in instances],
        labels=[inst.label for inst in instances],
        vectors=vectors,
        channel_vectors=channels,
        payloads=instances,
    )


def query(
    index: EmbeddingIndex, vec: np.ndarray, k: int, exclude_id: str | None = None
) -> RetrievalResult:
    """Exact top-k by cosine of unit vectors; ties break toward the lower id.

    ``k`` larger than the pool returns the whole pool.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vec = np.asarray(vec, dtype=np.float64)
    scores = index.vectors @ vec
    keep = np.ones(len(index), dtype=bool)
    if exclude_id is not None and exclude_id in index._pos:
        keep[index.position(exclude_id)] = False
    candidates = np.flatnonzero(keep)
    order = candidates[np.lexsort((np.asarray(index.ids, dtype=object)[candidates], -scores[candidates]))]
    top = order[:k]
    return RetrievalResult(
        items=[
            RetrievedItem(id=index.ids[i], score=float(scores[i]), label=int(index.labels[i]))
            for i in top
        ]
    )


# ---------------------------------------------------------------------------
# metrics


def precision_at_k(result: RetrievalResult, query_label: int, k: int) -> float:
    """Fraction of the top-k sharing the query's label."""
    top = result.items[:k]
    if not top:
        raise ValueError("empty retrieval result")
    return sum(1 for item in top if item.label == query_label) / k


def mrr_label(result: RetrievalResult, query_label: int) -> float:
    """1 / rank of the first item sharing the query's label; 0 if absent."""
    for rank, item in enumerate(result.items, start=1):
        if item.label == query_label:
            return 1.0 / rank
    return 0.0


def precision_modality_at_k(result: RetrievalResult, paired_id: str, k: int) -> float:
    """1 if the true counterpart appears in the top-k, else 0."""
    return 1.0 if paired_id in [item.id for item in result.items[:k]] else 0.0


def mrr_modality(result: RetrievalResult, paired_id: str) -> float:
    """1 / rank of the true counterpart; 0 if absent."""
    for rank, item in enumerate(result.items, start=1):
        if item.id == paired_id:
            return 1.0 / rank
    return 0.0


def rouge_l_f1(candidate: str, reference: str) -> float:
    """F1 of longest-common-subsequence precision and recall over tokens."""
    a = tokenize_text(candidate)
    b = tokenize_text(reference)
    if not a or not b:
        return 0.0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    precision = lcs / len(a)
    recall = lcs / len(b)
    return 2 * precision * recall / (precision + recall)


def ts_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(MAE, MSE) over all entries of two equal-shape raw-space series."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"series shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(np.abs(diff))), float(np.mean(diff * diff))


def _eval_workers() -> int:
    raw = os.environ.get("TRACE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_crossmodal(
    index_ts: EmbeddingIndex,
    index_text: EmbeddingIndex,
    direction: str,
    k_list: tuple[int, ...] = (1, 5),
) -> dict[str, float]:
    """Aggregate retrieval metrics over every paired query in one direction.

    ``direction`` is "ts2text" (series query retrieving texts) or "text2ts".
    Pairing is by shared instance id across the two indices. TRACE_THREADS
    caps the query parallelism; results are order-independent means.
    """
    if direction == "ts2text":
        src, dst = index_ts, index_text
    elif direction == "text2ts":
        src, dst = index_text, index_ts
    else:
        raise ValueError(f"direction must be 'ts2text' or 'text2ts', got {direction!r}")
    missing = set(src.ids) - set(dst.ids)
    if missing:
        raise ValueError(f"{len(missing)} query ids lack counterparts in the target index")
    max_k = max(k_list)

    def one(position: int) -> dict[str, float]:
        qid = src.ids[position]
        label = int(src.labels[position])
        inst = src.payloads[position]
        result = query(dst, src.vectors[position], max(max_k, len(dst)))
        row = {}
        for k in k_list:
            row[f"label_p@{k}"] = precision_at_k(result, label, k)
            row[f"modality_p@{k}"] = precision_modality_at_k(result, qid, k)
        row["label_mrr"] = mrr_label(result, label)
        row["modality_mrr"] = mrr_modality(result, qid)
        top = dst.payload(result.items[0].id)
        row["rouge_top1"] = rouge_l_f1(top.context_text, inst.context_text)
        mae, mse = ts_similarity(inst.values, top.values)
        row["mae_top1"] = mae
        row["mse_top1"] = mse
        return row

    positions = range(len(src))
    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, positions))
    else:
        rows = [one(p) for p in positions]
    keys = rows[0].keys()
    report = {key: float(np.mean([r[key] for r in rows])) for key in keys}
    report["queries"] = float(len(rows))
    return report


# ---------------------------------------------------------------------------
# series-to-series retrieval


def ts_to_ts(
    index_ts: EmbeddingIndex,
    query_vec: np.ndarray,
    query_channel_vecs: np.ndarray | None,
    k: int,
    exclude_id: str | None = None,
) -> RetrievalResult:
    """Rank by aggregate-embedding cosine; attach per-channel identity-token
    cosines for each returned item when channel vectors exist on both sides."""
    result = query(index_ts, query_vec, k, exclude_id=exclude_id)
    if query_channel_vecs is not None and index_ts.channel_vectors is not None:
        q = _normalize_rows(np.asarray(query_channel_vecs, dtype=np.float64))
        per_channel = np.stack(
            [
                np.sum(index_ts.channel_vectors[index_ts.position(item.id)] * q, axis=1)
                for item in result.items
            ]
        )
        result.per_channel = per_channel
    return result


def euclidean_baseline(
    instances: list[TimeSeriesInstance], query_series: np.ndarray, k: int
) -> RetrievalResult:
    """Rank by Euclidean distance between per-channel time-mean vectors.

    Scores are negated distances so the ranking contract (non-increasing
    scores, ties toward the lower id) carries over.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query_series, dtype=np.float64).mean(axis=-1)
    pooled = np.stack([inst.values.mean(axis=-1) for inst in instances])
    dist = np.sqrt(np.sum((pooled - q) ** 2, axis=1))
    ids = np.array([inst.id for inst in instances], dtype=object)
    order = np.lexsort((ids, dist))[:k]
    return RetrievalResult(
        items=[
            RetrievedItem(id=instances[i].id, score=float(-dist[i]), label=instances[i].label)
            for i in order
        ]
    )


# ---------------------------------------------------------------------------
# report formatting


def format_report_kv(report: dict[str, float]) -> str:
    return "".join(f"{key}={repr(value)}\n" for key, value in sorted(report.items()))


def format_report_table(reports: dict[str, dict[str, float]]) -> str:
    """Rows = report names, columns = union of metric keys."""
    keys = sorted({k for r in reports.values() for k in r})
    name_width = max(len(n) for n in reports) + 2
    header = "".ljust(name_width) + "  ".join(k.rjust(14) for k in keys)
    lines = [header, "-" * len(header)]
    for name, report in reports.items():
        cells = [
            (f"{report[k]:.4f}" if k in report else "-").rjust(14) for k in keys
        ]
        lines.append(name.ljust(name_width) + "  ".join(cells))
    return "\n".join(lines) + "\n"
