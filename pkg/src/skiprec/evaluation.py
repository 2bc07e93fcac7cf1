"""Catalog ranking, top-K metrics, the ablation harness, and exports.

Ranking scores every catalog item against the fused user state and sorts
descending, with exact ties broken by ascending item id so a report is
reproducible down to the last rank. Metrics per cutoff K against the label
set C: hit rate (any label in the top K), MRR (reciprocal rank of the
first label found), recall (labels found / |C|), precision (labels found /
K), and their F1.

The ablation harness retrains one model per objective variant from an
identical parameter initialization (same seed, same shapes), evaluates each
on the same held-out anchors, and reports per-cutoff metrics plus each
variant's relative hit-rate delta against the plain-classification "base"
row.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import CatalogIndex, TrainingExample
from .encoders import Model, all_item_encodings, build_model, forward_example
from .losses import LossConfig, NegativeSampler, fuse
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

# Ablation rows: variant name -> (fusion_mode, metric_mode). "base" ranks on
# the clicked encoding alone; "gated+sym" is the full model.
ABLATION_VARIANTS: dict[str, tuple[str, str]] = {
    "base": ("none", "none"),
    "fusion-simple": ("simple", "none"),
    "fusion-gated": ("gated", "none"),
    "triplet-asym": ("none", "asym"),
    "gated+asym": ("gated", "asym"),
    "gated+sym": ("gated", "sym"),
    "pair-label-clicked": ("gated", "pair_label_clicked"),
    "pair-unclicked-label": ("gated", "pair_unclicked_label"),
    "pair-unclicked-clicked": ("gated", "pair_unclicked_clicked"),
}


@dataclass
class MetricsReport:
    cutoffs: list[int]
    n_cases: int
    hr: dict[int, float]
    mrr: dict[int, float]
    recall: dict[int, float]
    f1: dict[int, float]
    fingerprint: str


@dataclass
class AblationRow:
    variant: str
    fusion_mode: str
    metric_mode: str
    report: MetricsReport
    loss_trace: list[float]
    delta_vs_base: dict[int, float]


def rank_items(
    scores: np.ndarray, id_order: np.ndarray, k: int
) -> np.ndarray:
    """Indices of the top-k scores, ties broken by ascending item id.

    id_order[i] is item i's rank in the id-sorted catalog; lexsort makes the
    tie-break exact rather than relying on float sort stability.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.lexsort((id_order, -scores))
    return order[:k]


def topk(z: np.ndarray, item_encodings: np.ndarray, item_ids: list[str], k: int) -> list[str]:
    """Top-k catalog item ids for a fused state."""
    scores = item_encodings @ z
    id_order = np.argsort(np.argsort(np.asarray(item_ids)))
    picked = rank_items(scores, id_order, min(k, len(item_ids)))
    return [item_ids[i] for i in picked]


def compute_metrics(
    ranked: list[str], labels: list[str], k: int
) -> tuple[float, float, float, float, float]:
    """(hr, mrr, recall, precision, f1) for one ranked list at cutoff k.

    Duplicate labels collapse: recall is against the distinct label set.
    Precision divides by k even when fewer than k items were supplied.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not labels:
        raise ValueError("labels must be non-empty")
    label_set = set(labels)
    top = ranked[:k]
    hits = sum(1 for item in top if item in label_set)
    hr = 1.0 if hits > 0 else 0.0
    mrr = 0.0
    for pos, item in enumerate(top, start=1):
        if item in label_set:
            mrr = 1.0 / pos
            break
    recall = hits / len(label_set)
    precision = hits / k
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0.0
        else 0.0
    )
    return hr, mrr, recall, precision, f1


def _fingerprint(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def evaluate(
    model: Model,
    examples: list[TrainingExample],
    loss_cfg: LossConfig,
    cutoffs: tuple[int, ...] = (50, 80),
) -> MetricsReport:
    """Rank the full catalog for every example and average the metrics."""
    if not examples:
        raise ValueError("no evaluation examples")
    if not cutoffs or any(k < 1 for k in cutoffs):
        raise ValueError(f"cutoffs must be positive, got {cutoffs!r}")
    cutoffs = tuple(sorted(cutoffs))
    q_all = all_item_encodings(model)
    ids = model.catalog.ids
    id_order = np.argsort(np.argsort(np.asarray(ids)))
    k_max = min(max(cutoffs), len(ids))

    sums = {k: np.zeros(4) for k in cutoffs}  # hr, mrr, recall, f1
    for ex in examples:
        state = forward_example(model, ex)
        zhat, _ = fuse(state.h, state.n, model.params, loss_cfg.fusion_mode)
        scores = q_all @ zhat
        picked = rank_items(scores, id_order, k_max)
        ranked = [ids[i] for i in picked]
        for k in cutoffs:
            hr, mrr, recall, _, f1 = compute_metrics(ranked, ex.labels, k)
            sums[k] += (hr, mrr, recall, f1)

    n = len(examples)
    fingerprint = _fingerprint(
        {
            "embed_dim": model.embed_dim,
            "clicked_variant": model.clicked_variant,
            "share_label_ffn": model.share_label_ffn,
            "fusion_mode": loss_cfg.fusion_mode,
            "metric_mode": loss_cfg.metric_mode,
            "margin": loss_cfg.margin,
            "margin_star": loss_cfg.margin_star,
            "trade_off": loss_cfg.trade_off,
            "cutoffs": list(cutoffs),
            "n_items": model.catalog.n_items,
            "n_users": len(model.user_ids),
            "n_cases": n,
        }
    )
    return MetricsReport(
        cutoffs=list(cutoffs),
        n_cases=n,
        hr={k: sums[k][0] / n for k in cutoffs},
        mrr={k: sums[k][1] / n for k in cutoffs},
        recall={k: sums[k][2] / n for k in cutoffs},
        f1={k: sums[k][3] / n for k in cutoffs},
        fingerprint=fingerprint,
    )


def run_ablation(
    catalog: CatalogIndex,
    user_ids: list[str],
    train_examples: list[TrainingExample],
    test_examples: list[TrainingExample],
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    embed_dim: int = 32,
    clicked_variant: str = "meanpool",
    share_label_ffn: bool = False,
    cutoffs: tuple[int, ...] = (50, 80),
    variants: dict[str, tuple[str, str]] | None = None,
) -> list[AblationRow]:
    """Train and evaluate every objective variant from one shared init.

    loss_cfg supplies everything except fusion_mode/metric_mode, which each
    variant overrides. The negative sampler is shared (it only depends on
    the training examples), and every model starts from the same seeded
    initialization so rows differ only by objective.
    """
    chosen = ABLATION_VARIANTS if variants is None else variants
    sampler = NegativeSampler.from_click_frequency(train_examples, catalog)
    rows: list[AblationRow] = []
    base_hr: dict[int, float] | None = None
    for name, (fusion_mode, metric_mode) in chosen.items():
        variant_cfg = replace(loss_cfg, fusion_mode=fusion_mode, metric_mode=metric_mode)
        model = build_model(
            catalog,
            user_ids,
            embed_dim=embed_dim,
            clicked_variant=clicked_variant,
            share_label_ffn=share_label_ffn,
            seed=train_cfg.seed,
        )
        logger.info("ablation variant %s: fusion=%s metric=%s", name, fusion_mode, metric_mode)
        result: TrainResult = train(model, train_examples, variant_cfg, train_cfg, sampler=sampler)
        report = evaluate(model, test_examples, variant_cfg, cutoffs)
        if base_hr is None:
            base_hr = report.hr
        delta = {
            k: (report.hr[k] - base_hr[k]) / base_hr[k] if base_hr[k] > 0 else float("nan")
            for k in report.hr
        }
        rows.append(
            AblationRow(
                variant=name,
                fusion_mode=fusion_mode,
                metric_mode=metric_mode,
                report=report,
                loss_trace=result.loss_trace,
                delta_vs_base=delta,
            )
        )
    return rows


def metrics_table_csv(report: MetricsReport) -> str:
    lines = ["k,hr,mrr,recall,f1"]
    for k in report.cutoffs:
        lines.append(
            f"{k},{report.hr[k]:.6f},{report.mrr[k]:.6f},"
            f"{report.recall[k]:.6f},{report.f1[k]:.6f}"
        )
    return "\n".join(lines) + "\n"


def metrics_table_text(report: MetricsReport) -> str:
    lines = [
        f"cases: {report.n_cases}   fingerprint: {report.fingerprint}",
        f"{'k':>4}  {'hr':>8}  {'mrr':>8}  {'recall':>8}  {'f1':>8}",
    ]
    for k in report.cutoffs:
        lines.append(
            f"{k:>4}  {report.hr[k]:8.4f}  {report.mrr[k]:8.4f}  "
            f"{report.recall[k]:8.4f}  {report.f1[k]:8.4f}"
        )
    return "\n".join(lines) + "\n"


def ablation_table_csv(rows: list[AblationRow]) -> str:
    lines = ["variant,fusion_mode,metric_mode,k,hr,mrr,recall,f1,delta_vs_base"]
    for row in rows:
        for k in row.report.cutoffs:
            lines.append(
                f"{row.variant},{row.fusion_mode},{row.metric_mode},{k},"
                f"{row.report.hr[k]:.6f},{row.report.mrr[k]:.6f},"
                f"{row.report.recall[k]:.6f},{row.report.f1[k]:.6f},"
                f"{row.delta_vs_base[k]:.6f}"
            )
    return "\n".join(lines) + "\n"


def ablation_table_text(rows: list[AblationRow]) -> str:
    header = (
        f"{'variant':<24} {'fusion':<8} {'metric':<24} {'k':>4} "
        f"{'hr':>8} {'mrr':>8} {'recall':>8} {'f1':>8} {'d_base':>8}"
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        for k in row.report.cutoffs:
            lines.append(
                f"{row.variant:<24} {row.fusion_mode:<8} {row.metric_mode:<24} {k:>4} "
                f"{row.report.hr[k]:8.4f} {row.report.mrr[k]:8.4f} "
                f"{row.report.recall[k]:8.4f} {row.report.f1[k]:8.4f} "
                f"{row.delta_vs_base[k]:+8.4f}"
            )
    return "\n".join(lines) + "\n"


def export_embeddings(
    model: Model,
    examples: list[TrainingExample],
    loss_cfg: LossConfig,
    path,
) -> int:
    """Write per-example encodings (h, n, c, zhat) and catalog item encodings.

    One CSV row per vector: kind, id, then the components. Example rows are
    keyed "user:anchor_time" and require labels (c is part of the export);
    the catalog block follows, one row per item, giving 4 * n_examples +
    n_items data rows. An empty example list writes the header only.
    Returns the data row count.
    """
    L = model.embed_dim
    header = "kind,id," + ",".join(f"v{i}" for i in range(L))
    rows_written = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        if not examples:
            return 0
        for ex in examples:
            if not ex.labels:
                raise ValueError(
                    f"example {ex.user_id}@{ex.anchor_time} has no labels"
                )
            state = forward_example(model, ex)
            zhat, _ = fuse(state.h, state.n, model.params, loss_cfg.fusion_mode)
            key = f"{ex.user_id}:{ex.anchor_time}"
            for kind, vec in (("h", state.h), ("n", state.n), ("c", state.c), ("zhat", zhat)):
                fh.write(f"{kind},{key}," + ",".join(f"{v:.8f}" for v in vec) + "\n")
                rows_written += 1
        q_all = all_item_encodings(model)
        for i, item_id in enumerate(model.catalog.ids):
            fh.write(f"item,{item_id}," + ",".join(f"{v:.8f}" for v in q_all[i]) + "\n")
            rows_written += 1
    return rows_written
