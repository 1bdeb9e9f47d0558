"""Report generation from chest images with anatomical alignment."""

from ._a3net import (
    Checkpoint,
    CheckpointError,
    ConfigError,
    CorpusError,
    Vocabulary,
    bleu,
    corpus_stats,
    default_config,
    evaluate,
    layer_norm,
    matmul,
    meteor,
    model_digest,
    full_scale_config,
    resolve_config,
    rouge_l,
    run_cli,
    softmax,
    synthetic_reports,
    tokenize,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CorpusError",
    "Vocabulary",
    "bleu",
    "corpus_stats",
    "default_config",
    "evaluate",
    "layer_norm",
    "matmul",
    "meteor",
    "model_digest",
    "full_scale_config",
    "resolve_config",
    "rouge_l",
    "run_cli",
    "softmax",
    "synthetic_reports",
    "tokenize",
]
