"""Command-line orchestration: corpus generation, the two training stages,
index building, retrieval evaluation, retrieval-augmented forecasting, and
downstream classification. Each subcommand reads one JSON config, writes its
artifact under the output directory, and is idempotent for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .align import AlignConfig, AlignedModel, CrossModalFuse, TextEmbedder, align, corpus_text_features
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .dataset import CorpusFormatError, generate_corpus, load_corpus, make_forecast_pairs, save_corpus
from .downstream import classification_metrics, train_classifier
from .model import Encoder
from .pretrain import pretrain, save_history
from .rag import PromptProjector, train_rag
from .retrieval import (
    EmbeddingIndex,
    build_index,
    evaluate_crossmodal,
    format_report_kv,
    format_report_table,
)

log = logging.getLogger("trace")


class MissingArtifactError(FileNotFoundError):
    pass


def _require_file(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {hint}: expected it at {path}")
    return path


def _load_aligned(path: str) -> AlignedModel:
    model = load_checkpoint(path)
    if not isinstance(model, AlignedModel):
        raise CheckpointError(f"{path} holds a stage-1 checkpoint; an aligned one is required")
    return model


def _write_report(cfg: RunConfig, name: str, reports: dict[str, dict[str, float]]) -> str:
    kv_path = cfg.path(f"{name}_report.kv")
    with open(kv_path, "w", encoding="utf-8") as fh:
        for section, report in reports.items():
            fh.write(f"[{section}]\n")
            fh.write(format_report_kv(report))
    table = format_report_table(reports)
    sys.stdout.write(table)
    with open(cfg.path(f"{name}_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    return kv_path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    d = cfg.data
    corpus = generate_corpus(
        cfg.seed,
        channels=d.channels,
        timesteps=d.timesteps,
        n_per_class=d.n_per_class,
        class_count=d.class_count,
        noise_scale=d.noise_scale,
        trend_scale=d.trend_scale,
        cycle_scale=d.cycle_scale,
        spike_scale=d.spike_scale,
        shift_scale=d.shift_scale,
        patch_len=cfg.model.patch_len,
    )
    save_corpus(corpus, cfg.corpus_path)
    log.info("[gen] wrote %d instances to %s", len(corpus.instances), cfg.corpus_path)
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))
    model = Encoder(cfg.model, seed=cfg.seed)
    model, history = pretrain(corpus, model, cfg.pretrain)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_checkpoint(model, cfg.pretrain_ckpt)
    save_history(history, cfg.path("pretrain_history.txt"))
    log.info("[pretrain] %d steps, final loss %.6f -> %s", len(history), history[-1].loss, cfg.pretrain_ckpt)
    return 0


def cmd_align(cfg: RunConfig) -> int:
    corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))
    encoder = load_checkpoint(
        _require_file(cfg.pretrain_ckpt, "pretraining checkpoint (run `trace pretrain` first)")
    )
    if isinstance(encoder, AlignedModel):
        encoder = encoder.encoder
    model = AlignedModel(
        encoder=encoder,
        textenc=TextEmbedder(d=cfg.model.d, seed=cfg.seed),
        fuse=CrossModalFuse(d=cfg.model.d, seed=cfg.seed),
    )
    model, history = align(corpus, model, cfg.align)
    save_checkpoint(model, cfg.aligned_ckpt)
    save_history(history, cfg.path("align_history.txt"))
    log.info("[align] %d steps, final loss %.6f -> %s", len(history), history[-1].loss, cfg.aligned_ckpt)
    return 0


def _build_eval_indices(cfg: RunConfig, model: AlignedModel, split: str = "test"):
    corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))
    instances = corpus.split(split)
    if not instances:
        raise ValueError(f"corpus has no '{split}' instances to index")
    return (
        build_index(instances, model, "TS"),
        build_index(instances, model, "TEXT"),
        corpus,
    )


def save_index(path: str, index_ts: EmbeddingIndex, index_text: EmbeddingIndex) -> None:
    np.savez(
        path,
        ts_ids=np.array(index_ts.ids),
        ts_labels=index_ts.labels,
        ts_vectors=index_ts.vectors,
        ts_channel_vectors=index_ts.channel_vectors,
        text_ids=np.array(index_text.ids),
        text_labels=index_text.labels,
        text_vectors=index_text.vectors,
        text_channel_vectors=index_text.channel_vectors,
    )


def load_index(path: str, corpus) -> tuple[EmbeddingIndex, EmbeddingIndex]:
    data = np.load(path, allow_pickle=False)
    by_id = {inst.id: inst for inst in corpus.instances}

    def rebuild(prefix: str, modality: str) -> EmbeddingIndex:
        ids = [str(i) for i in data[f"{prefix}_ids"]]
        return EmbeddingIndex(
            modality=modality,
            ids=ids,
            labels=list(data[f"{prefix}_labels"]),
            vectors=data[f"{prefix}_vectors"],
            channel_vectors=data[f"{prefix}_channel_vectors"],
            payloads=[by_id[i] for i in ids],
        )

    return rebuild("ts", "TS"), rebuild("text", "TEXT")


def cmd_index(cfg: RunConfig) -> int:
    model = _load_aligned(
        _require_file(cfg.aligned_ckpt, "aligned checkpoint (run `trace align` first)")
    )
    index_ts, index_text, _ = _build_eval_indices(cfg, model)
    save_index(cfg.index_path, index_ts, index_text)
    log.info("[index] %d entries per modality -> %s", len(index_ts), cfg.index_path)
    return 0


def _ts2ts_report(index_ts: EmbeddingIndex) -> dict[str, dict[str, float]]:
    """Series-to-series retrieval (self excluded) for the learned embeddings
    and the pooled-Euclidean-distance baseline, label metrics only."""
    from .retrieval import euclidean_baseline, mrr_label, precision_at_k, ts_to_ts

    rows_emb, rows_ed = [], []
    instances = index_ts.payloads
    for position, inst in enumerate(instances):
        emb = ts_to_ts(
            index_ts,
            index_ts.vectors[position],
            index_ts.channel_vectors[position] if index_ts.channel_vectors is not None else None,
            k=5,
            exclude_id=inst.id,
        )
        ed = euclidean_baseline([p for p in instances if p.id != inst.id], inst.values, k=5)
        for rows, result in ((rows_emb, emb), (rows_ed, ed)):
            rows.append(
                {
                    "label_p@1": precision_at_k(result, inst.label, 1),
                    "label_p@5": precision_at_k(result, inst.label, 5),
                    "label_mrr": mrr_label(result, inst.label),
                }
            )
    summarize = lambda rows: {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return {"ts2ts_embedding": summarize(rows_emb), "ts2ts_euclidean": summarize(rows_ed)}


def cmd_retrieve(cfg: RunConfig) -> int:
    model = _load_aligned(
        _require_file(cfg.aligned_ckpt, "aligned checkpoint (run `trace align` first)")
    )
    if os.path.exists(cfg.index_path):
        corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))
        index_ts, index_text = load_index(cfg.index_path, corpus)
        log.info("[retrieve] using prebuilt index %s", cfg.index_path)
    else:
        index_ts, index_text, _ = _build_eval_indices(cfg, model)
        log.info("[retrieve] no index artifact found; built indices in memory")
    reports = {
        "ts2text": evaluate_crossmodal(index_ts, index_text, "ts2text"),
        "text2ts": evaluate_crossmodal(index_ts, index_text, "text2ts"),
    }
    reports.update(_ts2ts_report(index_ts))
    path = _write_report(cfg, "retrieve", reports)
    log.info("[retrieve] report -> %s", path)
    return 0


def cmd_rag(cfg: RunConfig) -> int:
    model = _load_aligned(
        _require_file(cfg.aligned_ckpt, "aligned checkpoint (run `trace align` first)")
    )
    corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))
    pairs = make_forecast_pairs(corpus, cfg.forecast.history_len, cfg.forecast.horizon)
    train = [p for p in pairs if p.instance.split == "train"]
    test = [p for p in pairs if p.instance.split == "test"]
    report = train_rag(train, test, model, cfg.rag)
    path = _write_report(cfg, "rag", report)
    log.info("[rag] report -> %s", path)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_aligned(
        _require_file(cfg.aligned_ckpt, "aligned checkpoint (run `trace align` first)")
    )
    corpus = load_corpus(_require_file(cfg.corpus_path, "corpus (run `trace gen` first)"))

    def embeddings(instances, prompts=None):
        out = []
        for start in range(0, len(instances), 64):
            chunk = instances[start : start + 64]
            x = np.stack([inst.values for inst in chunk])
            prompt = None
            if prompts is not None:
                from .autodiff import Tensor

                prompt = Tensor(prompts[start : start + len(chunk)])
            output, _ = model.encoder.encode_batch(x, train=False, prompt=prompt)
            out.append(output.h_cls.data)
        return np.concatenate(out, axis=0)

    train_insts = corpus.split("train")
    test_insts = corpus.split("test")
    prompts_train = prompts_test = None
    if cfg.eval.with_rag:
        proj = PromptProjector(cfg.model.d, cfg.rag.r, cfg.rag.mode, zero_init=False, seed=cfg.seed)
        index = build_index(train_insts, model, "TS")
        feats = model.textenc.features([inst.context_text for inst in train_insts])
        text_vecs = model.textenc.project(feats).data
        text_vecs /= np.sqrt(np.sum(text_vecs**2, axis=1, keepdims=True) + 1e-24)

        def prompt_inputs(instances, exclude_self):
            from .retrieval import query as rquery

            h = embeddings(instances)
            h = h / np.sqrt(np.sum(h * h, axis=1, keepdims=True) + 1e-24)
            h_ts = np.zeros((len(instances), cfg.rag.r, cfg.model.d))
            z = np.zeros_like(h_ts)
            for i, inst in enumerate(instances):
                res = rquery(index, h[i], cfg.rag.r, exclude_id=inst.id if exclude_self else None)
                pos = [index.position(item.id) for item in res.items]
                pos += [pos[-1]] * (cfg.rag.r - len(pos))
                h_ts[i] = index.vectors[pos]
                z[i] = text_vecs[pos]
            return proj.build(h_ts, z if cfg.rag.mode == "ts_text" else None).data

        prompts_train = prompt_inputs(train_insts, True)
        prompts_test = prompt_inputs(test_insts, False)

    feats_train = embeddings(train_insts, prompts_train)
    feats_test = embeddings(test_insts, prompts_test)
    labels_train = np.array([inst.label for inst in train_insts])
    labels_test = np.array([inst.label for inst in test_insts])
    head = train_classifier(feats_train, labels_train, cfg.model.n_classes, cfg.eval)
    reports = {
        "classification_train": classification_metrics(head, feats_train, labels_train, cfg.model.n_classes),
        "classification_test": classification_metrics(head, feats_test, labels_test, cfg.model.n_classes),
    }
    path = _write_report(cfg, "eval", reports)
    log.info("[eval] report -> %s", path)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "rag": cmd_rag,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trace",
        description="channel-aware multimodal time-series retriever pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="path to a JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the root seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(name)s] %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        raw = {}
        if args.config is not None:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out is not None:
            raw["out_dir"] = args.out
        from .config import run_config_from_dict

        cfg = run_config_from_dict(raw)
        status = COMMANDS[args.command](cfg)
    except (ConfigError, CorpusFormatError, CheckpointError, MissingArtifactError, ValueError) as err:
        log.error("[%s] %s", args.command, err)
        return 1
    except json.JSONDecodeError as err:
        log.error("[%s] config is not valid JSON: %s", args.command, err)
        return 1
    except FileNotFoundError as err:
        log.error("[%s] %s", args.command, err)
        return 1
    log.info("[%s] done in %.1fs", args.command, time.time() - started)
    return status


if __name__ == "__main__":
    sys.exit(main())
