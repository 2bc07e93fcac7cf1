"""Sequential recommendation that models clicks and skips jointly.

The package trains a next-click recommender whose user state fuses a
clicked-history encoding with an impressed-but-skipped-history encoding
through a learned confidence gate, shaped by a symmetric triplet metric
loss, and evaluates it with top-K retrieval metrics over a synthetic
browse corpus with known ground truth.
"""

from .data import (
    CatalogIndex,
    DatasetSplit,
    Event,
    ItemMeta,
    SequenceConfig,
    TrainingExample,
    build_examples,
    parse_catalog,
    parse_events,
    split_temporal,
)
from .encoders import Model, build_model
from .estimator import SkipAwareRecommender
from .evaluation import MetricsReport, compute_metrics, evaluate, run_ablation
from .losses import LossConfig, NegativeSampler, sampled_softmax_ce, score
from .simulate import GenConfig, generate_corpus
from .training import (
    OptimizerState,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CatalogIndex",
    "DatasetSplit",
    "Event",
    "GenConfig",
    "ItemMeta",
    "LossConfig",
    "MetricsReport",
    "Model",
    "NegativeSampler",
    "OptimizerState",
    "SequenceConfig",
    "SkipAwareRecommender",
    "TrainConfig",
    "TrainingExample",
    "build_examples",
    "build_model",
    "compute_metrics",
    "evaluate",
    "generate_corpus",
    "load_checkpoint",
    "parse_catalog",
    "parse_events",
    "run_ablation",
    "sampled_softmax_ce",
    "save_checkpoint",
    "score",
    "split_temporal",
    "train",
    "__version__",
]
