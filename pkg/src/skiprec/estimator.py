"""Scikit-learn style estimator facade over the training engine.

SkipAwareRecommender follows the sklearn contract: hyperparameters are
stored verbatim in __init__, fit(X, catalog=...) learns the embedding
tables and encoders from a list of TrainingExample and returns self,
fitted state lives in trailing-underscore attributes, and get_params /
set_params / clone work as usual. predict ranks the catalog per example;
score returns the mean hit rate at the first cutoff, so bigger is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import CatalogIndex, ItemMeta, TrainingExample
from .encoders import CLICKED_VARIANTS, all_item_encodings, build_model, forward_example
from .evaluation import MetricsReport, evaluate, rank_items
from .losses import LossConfig, NegativeSampler, fuse
from .training import OptimizerState, TrainConfig, train


def _as_catalog_index(catalog) -> CatalogIndex:
    if isinstance(catalog, CatalogIndex):
        return catalog
    if isinstance(catalog, list) and catalog and isinstance(catalog[0], ItemMeta):
        return CatalogIndex(catalog)
    raise TypeError(
        "catalog must be a CatalogIndex or a non-empty list of ItemMeta, "
        f"got {type(catalog).__name__}"
    )


def _check_examples(X, known_items: set[str]) -> None:
    if not isinstance(X, list) or not X:
        raise ValueError("X must be a non-empty list of TrainingExample")
    for ex in X:
        if not isinstance(ex, TrainingExample):
            raise TypeError(f"X entries must be TrainingExample, got {type(ex).__name__}")
        if not ex.clicked_seq:
            raise ValueError(f"{ex.user_id}@{ex.anchor_time}: empty clicked_seq")
        for item in (*ex.clicked_seq, *ex.unclicked_seq, *ex.labels):
            if item not in known_items:
                raise ValueError(
                    f"{ex.user_id}@{ex.anchor_time}: unknown item id '{item}'"
                )


class SkipAwareRecommender(BaseEstimator):
    """Sequential recommender that learns from clicks and skips jointly.

    Parameters mirror the engine configs: model shape (embedding_dim,
    clicked_encoder, share_label_ffn), objective (fusion_mode, metric_mode,
    margin, margin_star, trade_off, num_negatives, correction,
    stop_label_gradient), and optimization (learning_rate, clip_norm,
    batch_size, epochs, seed).
    """

    def __init__(
        self,
        embedding_dim: int = 32,
        clicked_encoder: str = "meanpool",
        share_label_ffn: bool = False,
        fusion_mode: str = "gated",
        metric_mode: str = "sym",
        margin: float = 5.0,
        margin_star: float = 5.0,
        trade_off: float = 10.0,
        num_negatives: int = 200,
        correction: bool = True,
        stop_label_gradient: bool = False,
        learning_rate: float = 0.1,
        clip_norm: float = 5.0,
        batch_size: int = 64,
        epochs: int = 10,
        seed: int = 0,
        cutoffs: tuple[int, ...] = (50, 80),
    ):
        self.embedding_dim = embedding_dim
        self.clicked_encoder = clicked_encoder
        self.share_label_ffn = share_label_ffn
        self.fusion_mode = fusion_mode
        self.metric_mode = metric_mode
        self.margin = margin
        self.margin_star = margin_star
        self.trade_off = trade_off
        self.num_negatives = num_negatives
        self.correction = correction
        self.stop_label_gradient = stop_label_gradient
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.cutoffs = cutoffs

    def _loss_config(self) -> LossConfig:
        cfg = LossConfig(
            fusion_mode=self.fusion_mode,
            metric_mode=self.metric_mode,
            margin=self.margin,
            margin_star=self.margin_star,
            trade_off=self.trade_off,
            num_negatives=self.num_negatives,
            correction=self.correction,
            stop_label_gradient=self.stop_label_gradient,
        )
        cfg.validate()
        return cfg

    def _train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )
        cfg.validate()
        return cfg

    def fit(self, X, y=None, *, catalog):
        """Learn parameters from training examples.

        X is a list of TrainingExample (y is ignored; labels travel inside
        the examples, as is natural for next-click data). catalog supplies
        the item vocabulary and side features.
        """
        if self.clicked_encoder not in CLICKED_VARIANTS:
            raise ValueError(
                f"clicked_encoder must be one of {CLICKED_VARIANTS}, "
                f"got {self.clicked_encoder!r}"
            )
        if not isinstance(self.embedding_dim, int) or self.embedding_dim < 1:
            raise ValueError(
                f"embedding_dim must be a positive integer, got {self.embedding_dim!r}"
            )
        loss_cfg = self._loss_config()
        train_cfg = self._train_config()
        index = _as_catalog_index(catalog)
        _check_examples(X, set(index.ids))
        for ex in X:
            if not ex.labels:
                raise ValueError(
                    f"{ex.user_id}@{ex.anchor_time}: training examples need labels"
                )
        users = sorted({ex.user_id for ex in X})
        model = build_model(
            index,
            users,
            embed_dim=self.embedding_dim,
            clicked_variant=self.clicked_encoder,
            share_label_ffn=self.share_label_ffn,
            seed=self.seed,
        )
        optimizer = OptimizerState.fresh(model.params)
        sampler = NegativeSampler.from_click_frequency(X, index)
        result = train(
            model, X, loss_cfg, train_cfg, optimizer=optimizer, sampler=sampler
        )
        self.model_ = model
        self.optimizer_ = optimizer
        self.sampler_ = sampler
        self.loss_trace_ = result.loss_trace
        self.n_examples_ = len(X)
        return self

    def predict(self, X, k: int | None = None) -> list[list[str]]:
        """Top-k catalog item ids per example (k defaults to the first cutoff)."""
        check_is_fitted(self, "model_")
        if k is None:
            k = int(self.cutoffs[0])
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        model = self.model_
        _check_examples(X, set(model.catalog.ids))
        loss_cfg = self._loss_config()
        q_all = all_item_encodings(model)
        ids = model.catalog.ids
        id_order = np.argsort(np.argsort(np.asarray(ids)))
        k = min(k, len(ids))
        out: list[list[str]] = []
        for ex in X:
            state = forward_example(model, ex)
            zhat, _ = fuse(state.h, state.n, model.params, loss_cfg.fusion_mode)
            picked = rank_items(q_all @ zhat, id_order, k)
            out.append([ids[i] for i in picked])
        return out

    def evaluate(self, X, cutoffs: tuple[int, ...] | None = None) -> MetricsReport:
        """Full metrics report on held-out examples."""
        check_is_fitted(self, "model_")
        chosen = tuple(cutoffs) if cutoffs is not None else tuple(self.cutoffs)
        return evaluate(self.model_, X, self._loss_config(), chosen)

    def score(self, X, y=None) -> float:
        """Mean hit rate at the first configured cutoff."""
        report = self.evaluate(X, (int(self.cutoffs[0]),))
        return report.hr[int(self.cutoffs[0])]
