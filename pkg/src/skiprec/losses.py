"""Scoring, fusion, triplet metrics, negative sampling, and the training loss.

The ranking score of an item is the dot product between the fused user
state and the item encoding. Fusion combines the clicked encoding h with
the skipped encoding n:

* "none":   z = h
* "simple": z = h - n
* "gated":  z = h - G * n, with G = sigmoid(W_g [h; n] + b_g) a per-dim
            confidence gate on the skip signal.

The metric term shapes the (h, n, c) geometry, where c encodes the actual
next clicks. With squared distances D_hc, D_hn, D_cn:

* "asym":  max(0, D_hc - D_hn + margin)
* "sym":   max(0, 2 D_hc - D_hn - D_cn + margin_star), which adds the
           label-vs-skip separation the asymmetric form leaves free
* "pair_label_clicked":     D_hc
* "pair_unclicked_label":   max(0, margin - D_cn)
* "pair_unclicked_clicked": max(0, margin - D_hn)
* "none":  0

The classification term is sampled softmax over the next-click labels with
a log-uniform (Zipf-like) proposal over frequency ranks,
P(rank r) = (log(r+2) - log(r+1)) / log(N+1). With correction enabled the
log proposal probability is subtracted from negative logits only, so with
exhaustive negatives and correction off the term equals the full softmax
cross-entropy exactly.

The total per-example loss is ce + trade_off * triplet. Everything here is
differentiated by hand; the test suite holds these formulas to the
finite-difference oracle.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import CatalogIndex, TrainingExample
from .encoders import (
    ForwardState,
    Model,
    encoder_backward,
    embed_items,
    forward_example,
    table_backward,
)
from .numeric import as_vector, stable_sigmoid

FUSION_MODES = ("none", "simple", "gated")
METRIC_MODES = (
    "none",
    "asym",
    "sym",
    "pair_label_clicked",
    "pair_unclicked_label",
    "pair_unclicked_clicked",
)


@dataclass
class LossConfig:
    """Objective shape and sampling knobs."""

    fusion_mode: str = "gated"
    metric_mode: str = "sym"
    margin: float = 5.0          # hinge margin for asym and pairwise modes
    margin_star: float = 5.0     # combined margin for the symmetric mode
    trade_off: float = 10.0      # weight of the metric term
    num_negatives: int = 200
    correction: bool = True      # subtract log proposal prob from neg logits
    stop_label_gradient: bool = False  # freeze c inside the metric term

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.metric_mode not in METRIC_MODES:
            raise ValueError(
                f"metric_mode must be one of {METRIC_MODES}, got {self.metric_mode!r}"
            )
        for name in ("margin", "margin_star"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be a finite non-negative float, got {value!r}")
        if not (np.isfinite(self.trade_off) and self.trade_off >= 0.0):
            raise ValueError(f"trade_off must be >= 0, got {self.trade_off!r}")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")


def score(z: np.ndarray, q: np.ndarray) -> float:
    """Ranking score: dot product of the fused state and an item encoding."""
    z = as_vector(z, "score state")
    q = as_vector(q, "score item")
    if z.size != q.size:
        raise ValueError(f"score: lengths differ, {z.size} vs {q.size}")
    return float(z @ q)


def fuse(
    h: np.ndarray, n: np.ndarray, params: dict[str, np.ndarray], mode: str
) -> tuple[np.ndarray, np.ndarray | None]:
    """Combine clicked and skipped encodings; returns (z, gate)."""
    if mode == "none":
        return h, None
    if mode == "simple":
        return h - n, None
    if mode == "gated":
        gate = stable_sigmoid(params["w_gate"] @ np.concatenate([h, n]) + params["b_gate"])
        return h - gate * n, gate
    raise ValueError(f"unknown fusion mode {mode!r}")


def fuse_backward(
    h: np.ndarray,
    n: np.ndarray,
    gate: np.ndarray | None,
    dz: np.ndarray,
    params: dict[str, np.ndarray],
    mode: str,
):
    """Backward of fuse; returns (dh, dn, dw_gate, db_gate)."""
    if mode == "none":
        return dz.copy(), np.zeros_like(dz), None, None
    if mode == "simple":
        return dz.copy(), -dz, None, None
    if mode == "gated":
        L = h.size
        da = (dz * -n) * gate * (1.0 - gate)
        w = params["w_gate"]
        dh = dz + w[:, :L].T @ da
        dn = -gate * dz + w[:, L:].T @ da
        dw = np.outer(da, np.concatenate([h, n]))
        return dh, dn, dw, da.copy()
    raise ValueError(f"unknown fusion mode {mode!r}")


def triplet_loss(h, n, c, cfg: LossConfig) -> float:
    """Metric term for one (clicked, skipped, label) encoding triple."""
    loss, _, _, _ = triplet_grads(
        as_vector(h, "triplet h"), as_vector(n, "triplet n"), as_vector(c, "triplet c"), cfg
    )
    return loss


def triplet_grads(h, n, c, cfg: LossConfig):
    """Loss and subgradients (loss, dh, dn, dc); zero at hinge kinks."""
    mode = cfg.metric_mode
    if mode == "none":
        z = np.zeros_like(h)
        return 0.0, z, z.copy(), z.copy()
    hc = h - c
    hn = h - n
    cn = c - n
    d_hc = float(hc @ hc)
    d_hn = float(hn @ hn)
    d_cn = float(cn @ cn)
    dh = np.zeros_like(h)
    dn = np.zeros_like(h)
    dc = np.zeros_like(h)
    if mode == "asym":
        inside = d_hc - d_hn + cfg.margin
        if inside > 0.0:
            dh = 2.0 * hc - 2.0 * hn
            dc = -2.0 * hc
            dn = 2.0 * hn
        return max(0.0, inside), dh, dn, dc
    if mode == "sym":
        inside = 2.0 * d_hc - d_hn - d_cn + cfg.margin_star
        if inside > 0.0:
            dh = 4.0 * hc - 2.0 * hn
            dc = -4.0 * hc - 2.0 * cn
            dn = 2.0 * hn + 2.0 * cn
        return max(0.0, inside), dh, dn, dc
    if mode == "pair_label_clicked":
        dh = 2.0 * hc
        dc = -2.0 * hc
        return d_hc, dh, dn, dc
    if mode == "pair_unclicked_label":
        inside = cfg.margin - d_cn
        if inside > 0.0:
            dc = -2.0 * cn
            dn = 2.0 * cn
        return max(0.0, inside), dh, dn, dc
    if mode == "pair_unclicked_clicked":
        inside = cfg.margin - d_hn
        if inside > 0.0:
            dh = -2.0 * hn
            dn = 2.0 * hn
        return max(0.0, inside), dh, dn, dc
    raise ValueError(f"unknown metric mode {mode!r}")


class NegativeSampler:
    """Log-uniform sampler over items ranked by training-set click frequency.

    Rank r (0-based, most clicked first) has proposal probability
    (log(r+2) - log(r+1)) / log(N+1); the masses telescope to 1 over the
    catalog. Draws are inverse-CDF on that distribution with rejection of
    the per-example positive set, independent across draws (sampling with
    replacement).
    """

    def __init__(self, ranked_ids: list[str], catalog: CatalogIndex | None = None):
        if not ranked_ids:
            raise ValueError("sampler needs at least one item")
        if len(set(ranked_ids)) != len(ranked_ids):
            raise ValueError("ranked item ids must be unique")
        self.ranked_ids = list(ranked_ids)
        self.rank_of = {item: r for r, item in enumerate(self.ranked_ids)}
        n = len(self.ranked_ids)
        self._log_n1 = np.log(n + 1.0)
        ranks = np.arange(n, dtype=np.float64)
        self.mass = (np.log(ranks + 2.0) - np.log(ranks + 1.0)) / self._log_n1
        self.cumulative = np.cumsum(self.mass)
        # Catalog-row mirrors of the rank order, for the row-based fast path.
        self._ranked_rows: np.ndarray | None = None
        self._rank_by_row: np.ndarray | None = None
        if catalog is not None:
            self.ensure_rows(catalog)

    def ensure_rows(self, catalog: CatalogIndex) -> None:
        """Build the catalog-row mirrors used by sample_rows (idempotent)."""
        if self._rank_by_row is not None:
            return
        self._ranked_rows = np.array(
            [catalog.require(i) for i in self.ranked_ids], dtype=np.int64
        )
        self._rank_by_row = np.full(len(catalog.ids), -1, dtype=np.int64)
        self._rank_by_row[self._ranked_rows] = np.arange(self.n_items, dtype=np.int64)

    @classmethod
    def from_click_frequency(
        cls, examples: list[TrainingExample], catalog: CatalogIndex
    ) -> "NegativeSampler":
        """Rank by occurrences in clicked_seq and labels; ties by item id."""
        counts = Counter()
        for ex in examples:
            counts.update(ex.clicked_seq)
            counts.update(ex.labels)
        ranked = sorted(catalog.ids, key=lambda item: (-counts[item], item))
        return cls(ranked, catalog)

    @property
    def n_items(self) -> int:
        return len(self.ranked_ids)

    def proposal_prob(self, item_id: str) -> float:
        return float(self.mass[self.rank_of[item_id]])

    def _sample_ranks(
        self, avoid_ranks: np.ndarray, count: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Inverse-CDF draws in rank space, rejecting the avoid set."""
        n = self.n_items
        out = np.empty(count, dtype=np.int64)
        got = 0
        while got < count:
            want = max(16, 2 * (count - got))
            u = rng.random(size=want)
            ranks = np.minimum(np.exp(u * self._log_n1).astype(np.int64) - 1, n - 1)
            if len(avoid_ranks):
                keep = (ranks[:, None] != avoid_ranks[None, :]).all(axis=1)
                ranks = ranks[keep]
            take = min(count - got, len(ranks))
            out[got : got + take] = ranks[:take]
            got += take
        return out

    def sample(
        self, positives: set[str], count: int, rng: np.random.Generator
    ) -> tuple[list[str], np.ndarray]:
        """Draw `count` negatives avoiding positives; returns (ids, probs)."""
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if len(positives) >= self.n_items:
            raise ValueError("positive set covers the whole catalog")
        avoid = np.array(
            sorted(self.rank_of[i] for i in positives if i in self.rank_of),
            dtype=np.int64,
        )
        ranks = self._sample_ranks(avoid, count, rng)
        return [self.ranked_ids[r] for r in ranks], self.mass[ranks]

    def sample_rows(
        self, avoid_rows: np.ndarray, count: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Row-based twin of sample; needs a catalog-backed sampler.

        Draws the same ranks as sample would for the matching positive set,
        but returns catalog rows, skipping all id strings on the hot path.
        """
        if self._rank_by_row is None:
            raise ValueError("sampler was built without a catalog")
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if len(avoid_rows) >= self.n_items:
            raise ValueError("positive set covers the whole catalog")
        avoid = self._rank_by_row[avoid_rows]
        ranks = self._sample_ranks(avoid, count, rng)
        return self._ranked_rows[ranks], self.mass[ranks]


def _log_sum_exp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def _ce_forward(
    zhat: np.ndarray,
    q_pos: np.ndarray,
    q_neg: np.ndarray,
    neg_correction: np.ndarray | None,
):
    """Per-label candidate sets {label} + negatives; returns (loss, pos, neg, lse)."""
    pos = q_pos @ zhat
    neg = q_neg @ zhat
    if neg_correction is not None:
        neg = neg - neg_correction
    lse_neg = _log_sum_exp(neg)
    lse = np.logaddexp(pos, lse_neg)
    return float(np.mean(lse - pos)), pos, neg, lse


def sampled_softmax_ce(
    model: Model,
    zhat: np.ndarray,
    labels: list[str],
    negatives: list[str],
    neg_probs: np.ndarray,
    correction: bool = True,
) -> float:
    """Sampled-softmax cross-entropy, averaged over the label items."""
    if not labels:
        raise ValueError("labels must be non-empty")
    if len(negatives) != len(neg_probs):
        raise ValueError(
            f"{len(negatives)} negatives but {len(neg_probs)} proposal probs"
        )
    overlap = set(labels) & set(negatives)
    if overlap:
        raise ValueError(f"negatives overlap labels: {sorted(overlap)[:3]}")
    q_pos = embed_items(model, labels)
    q_neg = embed_items(model, negatives)
    corr = np.log(np.asarray(neg_probs, dtype=np.float64)) if correction else None
    loss, _, _, _ = _ce_forward(as_vector(zhat, "fused state"), q_pos, q_neg, corr)
    return loss


@dataclass
class LossParts:
    total: float
    ce: float
    triplet: float


def _objective_forward(
    model: Model,
    state: ForwardState,
    neg_correction: np.ndarray | None,
    cfg: LossConfig,
) -> LossParts:
    zhat, _ = fuse(state.h, state.n, model.params, cfg.fusion_mode)
    ce, _, _, _ = _ce_forward(
        zhat, state.q[state.pos_labels], state.q[state.pos_extra], neg_correction
    )
    tri, _, _, _ = triplet_grads(state.h, state.n, state.c, cfg)
    return LossParts(total=ce + cfg.trade_off * tri, ce=ce, triplet=tri)


def example_loss(
    model: Model,
    example: TrainingExample,
    negatives: list[str],
    neg_probs: np.ndarray,
    cfg: LossConfig,
) -> float:
    """Forward-only total loss for one example with fixed negatives."""
    state = forward_example(model, example, tuple(negatives))
    corr = np.log(np.asarray(neg_probs, dtype=np.float64)) if cfg.correction else None
    return _objective_forward(model, state, corr, cfg).total


def state_objective_grads(
    model: Model,
    state: ForwardState,
    neg_correction: np.ndarray | None,
    cfg: LossConfig,
    grads: dict[str, np.ndarray],
    dq: np.ndarray,
) -> LossParts:
    """Objective forward + backward down to the per-item q rows.

    The negatives are the state's extra items. dq must come in zeroed with
    state.q's shape; it leaves holding the full upstream gradient on q, and
    the caller owns the remaining projection/table backward (table_backward
    per example, or one shared scatter per mini-batch).
    """
    zhat, gate = fuse(state.h, state.n, model.params, cfg.fusion_mode)
    q_pos = state.q[state.pos_labels]
    q_neg = state.q[state.pos_extra]
    ce, pos, neg, lse = _ce_forward(zhat, q_pos, q_neg, neg_correction)
    k = len(state.pos_labels)

    # CE gradients. Within label l's candidate set the softmax weight of the
    # label is exp(pos_l - lse_l); each negative keeps weight exp(neg - lse_l).
    d_pos = (np.exp(pos - lse) - 1.0) / k                    # (k,)
    p_neg = np.exp(neg[None, :] - lse[:, None])              # (k, j)
    d_neg = p_neg.sum(axis=0) / k                            # (j,)
    dz = q_pos.T @ d_pos + q_neg.T @ d_neg
    np.add.at(dq, state.pos_labels, d_pos[:, None] * zhat[None, :])
    np.add.at(dq, state.pos_extra, d_neg[:, None] * zhat[None, :])

    tri, t_dh, t_dn, t_dc = triplet_grads(state.h, state.n, state.c, cfg)

    dh, dn, dw_gate, db_gate = fuse_backward(
        state.h, state.n, gate, dz, model.params, cfg.fusion_mode
    )
    lam = cfg.trade_off
    dh = dh + lam * t_dh
    dn = dn + lam * t_dn
    dc = None if cfg.stop_label_gradient else lam * t_dc
    if dw_gate is not None:
        grads["w_gate"] += dw_gate
        grads["b_gate"] += db_gate

    encoder_backward(model, state, dh, dn, dc, dq, grads)
    return LossParts(total=ce + lam * tri, ce=ce, triplet=tri)


def example_loss_and_grads(
    model: Model,
    example: TrainingExample,
    negatives: list[str],
    neg_probs: np.ndarray,
    cfg: LossConfig,
    grads: dict[str, np.ndarray],
) -> LossParts:
    """Total loss for one example; parameter gradients accumulate into grads.

    The example must carry labels. Negatives may overlap the clicked or
    unclicked history (they share q rows there) but never the labels.
    """
    if not example.labels:
        raise ValueError("training example carries no labels")
    state = forward_example(model, example, tuple(negatives))
    corr = np.log(np.asarray(neg_probs, dtype=np.float64)) if cfg.correction else None
    dq = np.zeros_like(state.q)
    parts = state_objective_grads(model, state, corr, cfg, grads, dq)
    table_backward(model, state, dq, grads)
    return parts
