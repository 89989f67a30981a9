#!/usr/bin/env python3
"""Run the full-scale learnability experiment outside pytest.

Generates the standard corpus, pretrains, aligns, evaluates cross-modal
retrieval on a held-out pool of 128 pairs, and reports retrieval-augmented
forecasting across the three conditioning settings.
"""

import argparse
import time

import numpy as np

from tracemm.align import AlignConfig, AlignedModel, CrossModalFuse, TextEmbedder, align
from tracemm.dataset import generate_corpus, make_forecast_pairs
from tracemm.model import Encoder, ModelConfig
from tracemm.presets import FULL_SCALE
from tracemm.pretrain import PretrainConfig, epoch_mean_losses, pretrain
from tracemm.rag import RagConfig, train_rag
from tracemm.retrieval import build_index, evaluate_crossmodal, format_report_table


def run() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-rag", action="store_true")
    args = parser.parse_args()

    started = time.time()
    corpus = generate_corpus(args.seed, **FULL_SCALE["data"])
    print(f"corpus: {len(corpus.instances)} instances ({len(corpus.split('train'))} train)")

    encoder = Encoder(ModelConfig(**FULL_SCALE["model"]), seed=args.seed)
    encoder, history = pretrain(
        corpus, encoder, PretrainConfig(**{**FULL_SCALE["pretrain"], "seed": args.seed})
    )
    means = epoch_mean_losses(history)
    print(f"pretrain loss {means[0]:.3f} -> {means[-1]:.3f} [{time.time() - started:.0f}s]")

    model = AlignedModel(
        encoder=encoder,
        textenc=TextEmbedder(d=encoder.cfg.d, seed=args.seed),
        fuse=CrossModalFuse(d=encoder.cfg.d, seed=args.seed),
    )
    model, ahistory = align(corpus, model, AlignConfig(**{**FULL_SCALE["align"], "seed": args.seed}))
    ameans = epoch_mean_losses(ahistory)
    print(f"align loss {ameans[0]:.3f} -> {ameans[-1]:.3f} [{time.time() - started:.0f}s]")

    held = corpus.split("test")[:128]
    index_ts = build_index(held, model, "TS")
    index_text = build_index(held, model, "TEXT")
    reports = {
        direction: evaluate_crossmodal(index_ts, index_text, direction)
        for direction in ("ts2text", "text2ts")
    }
    print(format_report_table(reports))

    if not args.skip_rag:
        pairs = make_forecast_pairs(corpus, **FULL_SCALE["forecast"])
        train = [p for p in pairs if p.instance.split == "train"][:1000]
        test = [p for p in pairs if p.instance.split == "test"]
        report = train_rag(
            train, test, model, RagConfig(**{**FULL_SCALE["rag"], "seed": args.seed})
        )
        print(format_report_table(report))
    print(f"total {time.time() - started:.0f}s")


if __name__ == "__main__":
    run()
