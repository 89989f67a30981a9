"""Channel-aware multimodal time-series retriever.

Stages: masked-reconstruction pretraining of a channel-biased transformer
encoder, dual-level contrastive alignment with channel and context texts,
cosine-similarity retrieval with a full metric suite, and soft-prompt
retrieval-augmented forecasting on the frozen backbone.
"""

from .align import AlignConfig, AlignedModel, CrossModalFuse, TextEmbedder, align
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, run_config_from_dict
from .dataset import Corpus, TimeSeriesInstance, generate_corpus, load_corpus, make_forecast_pairs, save_corpus
from .model import Encoder, EncoderOutput, ForecastHead, ModelConfig, revin_denormalize, revin_normalize
from .pretrain import PretrainConfig, pretrain
from .rag import RagConfig, rag_forecast, retrieve_context, train_rag
from .retrieval import EmbeddingIndex, build_index, evaluate_crossmodal, query, rouge_l_f1, ts_similarity

__all__ = [
    "AlignConfig",
    "AlignedModel",
    "Corpus",
    "CrossModalFuse",
    "EmbeddingIndex",
    "Encoder",
    "EncoderOutput",
    "ForecastHead",
    "ModelConfig",
    "PretrainConfig",
    "RagConfig",
    "RunConfig",
    "TextEmbedder",
    "TimeSeriesInstance",
    "align",
    "build_index",
    "evaluate_crossmodal",
    "generate_corpus",
    "load_checkpoint",
    "load_corpus",
    "load_run_config",
    "make_forecast_pairs",
    "pretrain",
    "query",
    "rag_forecast",
    "retrieve_context",
    "revin_denormalize",
    "revin_normalize",
    "rouge_l_f1",
    "run_config_from_dict",
    "save_checkpoint",
    "save_corpus",
    "train_rag",
    "ts_similarity",
]
