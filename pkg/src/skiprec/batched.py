"""Batch-vectorized twin of the per-example objective, meanpool only.

The per-example forward/backward in encoders.py and losses.py is the
canonical definition of the model; it is what the finite-difference suite
verifies. Running it example by example spends most of the time in numpy
call overhead, so the trainer uses this module when it can: every formula
here is the same equation with a leading batch axis, and the test suite
pins both paths together to near machine precision.

Restrictions: the clicked encoder must be meanpool (the recurrent encoder
keeps per-example backprop through time) and every example in the batch
must carry the same number of labels. The trainer falls back to the
per-example loop whenever either fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import ExampleIndex, Model
from .losses import LossConfig
from .numeric import stable_sigmoid


def _segments(blocks: list[np.ndarray], offsets: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-example position blocks into global (positions, seg ids)."""
    counts = np.array([len(b) for b in blocks], dtype=np.int64)
    if counts.sum() == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pos = np.concatenate(
        [b + off for b, off in zip(blocks, offsets) if len(b)]
    )
    seg = np.repeat(np.arange(len(blocks), dtype=np.int64), counts)
    return pos, seg


@dataclass
class PooledBatch:
    """Global q-buffer positions for one mini-batch, meanpool layout."""

    cpos: np.ndarray        # clicked occurrence positions into q_all
    cseg: np.ndarray        # owning example per clicked occurrence
    inv_nc: np.ndarray      # (B,) 1/len(clicked)
    upos: np.ndarray
    useg: np.ndarray
    inv_nu: np.ndarray      # (B,) 1/len(unclicked), 0 when empty
    lpos: np.ndarray        # (B, k) label positions
    npos: np.ndarray        # (B, j) negative positions
    user_rows: np.ndarray   # (B,)
    corr: np.ndarray | None  # (B, j) log proposal probs, None when off

    def remap(self, mapping: np.ndarray) -> None:
        """Rewrite every q position through mapping (old index -> new)."""
        self.cpos = mapping[self.cpos]
        self.upos = mapping[self.upos]
        self.lpos = mapping[self.lpos]
        self.npos = mapping[self.npos]


def prepare_pooled(
    indices: list[ExampleIndex],
    pos_extras: list[np.ndarray],
    neg_log_probs: list[np.ndarray] | None,
    bounds: list[int],
) -> PooledBatch | None:
    """Lay one batch out for the vectorized path; None when it cannot run."""
    k = len(indices[0].pos_labels)
    if k == 0 or any(len(ix.pos_labels) != k for ix in indices):
        return None
    offsets = bounds[:-1]
    cpos, cseg = _segments([ix.pos_clicked for ix in indices], offsets)
    upos, useg = _segments([ix.pos_unclicked for ix in indices], offsets)
    n_uncl = np.array([len(ix.pos_unclicked) for ix in indices], dtype=np.float64)
    return PooledBatch(
        cpos=cpos,
        cseg=cseg,
        inv_nc=1.0 / np.array([len(ix.pos_clicked) for ix in indices]),
        upos=upos,
        useg=useg,
        inv_nu=np.divide(1.0, n_uncl, out=np.zeros_like(n_uncl), where=n_uncl > 0),
        lpos=np.stack([ix.pos_labels + off for ix, off in zip(indices, offsets)]),
        npos=np.stack([pe + off for pe, off in zip(pos_extras, offsets)]),
        user_rows=np.array([ix.user_row for ix in indices], dtype=np.int64),
        corr=np.stack(neg_log_probs) if neg_log_probs is not None else None,
    )


def _triplet_batch(H, N, C, cfg: LossConfig):
    """Vectorized metric term; returns (loss_b, dH, dN, dC) over the batch."""
    mode = cfg.metric_mode
    if mode == "none":
        z = np.zeros_like(H)
        return np.zeros(H.shape[0]), z, z.copy(), z.copy()
    hc = H - C
    hn = H - N
    cn = C - N
    d_hc = np.einsum("bl,bl->b", hc, hc)
    d_hn = np.einsum("bl,bl->b", hn, hn)
    d_cn = np.einsum("bl,bl->b", cn, cn)
    if mode == "asym":
        inside = d_hc - d_hn + cfg.margin
        act = (inside > 0.0).astype(np.float64)[:, None]
        return np.maximum(0.0, inside), (2.0 * hc - 2.0 * hn) * act, 2.0 * hn * act, -2.0 * hc * act
    if mode == "sym":
        inside = 2.0 * d_hc - d_hn - d_cn + cfg.margin_star
        act = (inside > 0.0).astype(np.float64)[:, None]
        return (
            np.maximum(0.0, inside),
            (4.0 * hc - 2.0 * hn) * act,
            (2.0 * hn + 2.0 * cn) * act,
            (-4.0 * hc - 2.0 * cn) * act,
        )
    if mode == "pair_label_clicked":
        zero = np.zeros_like(H)
        return d_hc, 2.0 * hc, zero, -2.0 * hc
    if mode == "pair_unclicked_label":
        inside = cfg.margin - d_cn
        act = (inside > 0.0).astype(np.float64)[:, None]
        return np.maximum(0.0, inside), np.zeros_like(H), 2.0 * cn * act, -2.0 * cn * act
    if mode == "pair_unclicked_clicked":
        inside = cfg.margin - d_hn
        act = (inside > 0.0).astype(np.float64)[:, None]
        return np.maximum(0.0, inside), -2.0 * hn * act, 2.0 * hn * act, np.zeros_like(H)
    raise ValueError(f"unknown metric mode {mode!r}")


def pooled_batch_step(
    model: Model,
    pb: PooledBatch,
    q_all: np.ndarray,
    dq_all: np.ndarray,
    cfg: LossConfig,
    grads: dict[str, np.ndarray],
) -> tuple[float, float, float]:
    """Objective forward + backward for a whole batch down to dq_all.

    Returns summed (total, ce, triplet) over the batch; the caller averages
    and runs the shared projection/table backward.
    """
    p = model.params
    L = model.embed_dim
    B, k = pb.lpos.shape

    # Encoder forward: segment means over the shared q buffer.
    means_c = np.zeros((B, L))
    np.add.at(means_c, pb.cseg, q_all[pb.cpos])
    means_c *= pb.inv_nc[:, None]
    means_u = np.zeros((B, L))
    if len(pb.upos):
        np.add.at(means_u, pb.useg, q_all[pb.upos])
        means_u *= pb.inv_nu[:, None]
    q_pos = q_all[pb.lpos]                       # (B, k, L)
    means_l = q_pos.mean(axis=1)

    clicked_in = np.concatenate([means_c, p["emb_user"][pb.user_rows]], axis=1)
    H = np.tanh(clicked_in @ p["w_clicked"].T + p["b_clicked"])
    N = np.tanh(means_u @ p["w_unclicked"].T + p["b_unclicked"])
    w_label, b_label = model.label_weight_names()
    C = np.tanh(means_l @ p[w_label].T + p[b_label])

    # Fusion.
    mode = cfg.fusion_mode
    gate = None
    gate_in = None
    if mode == "none":
        Z = H
    elif mode == "simple":
        Z = H - N
    elif mode == "gated":
        gate_in = np.concatenate([H, N], axis=1)
        gate = stable_sigmoid(gate_in @ p["w_gate"].T + p["b_gate"])
        Z = H - gate * N
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")

    # Sampled-softmax CE over per-label candidate sets.
    q_neg = q_all[pb.npos]                       # (B, j, L)
    pos = np.einsum("bkl,bl->bk", q_pos, Z)
    neg = np.einsum("bjl,bl->bj", q_neg, Z)
    if pb.corr is not None:
        neg = neg - pb.corr
    m = neg.max(axis=1)
    lse_neg = m + np.log(np.exp(neg - m[:, None]).sum(axis=1))
    lse = np.logaddexp(pos, lse_neg[:, None])    # (B, k)
    ce_b = (lse - pos).mean(axis=1)

    tri_b, t_dH, t_dN, t_dC = _triplet_batch(H, N, C, cfg)

    # CE gradients, batched over the label axis.
    d_pos = (np.exp(pos - lse) - 1.0) / k                          # (B, k)
    p_neg = np.exp(neg[:, None, :] - lse[:, :, None])              # (B, k, j)
    d_neg = p_neg.sum(axis=1) / k                                  # (B, j)
    dZ = np.einsum("bk,bkl->bl", d_pos, q_pos) + np.einsum("bj,bjl->bl", d_neg, q_neg)

    # Fusion backward.
    if mode == "none":
        dH = dZ.copy()
        dN = np.zeros_like(dZ)
    elif mode == "simple":
        dH = dZ.copy()
        dN = -dZ
    else:
        dA = (dZ * -N) * gate * (1.0 - gate)
        w = p["w_gate"]
        dH = dZ + dA @ w[:, :L]
        dN = -gate * dZ + dA @ w[:, L:]
        grads["w_gate"] += dA.T @ gate_in
        grads["b_gate"] += dA.sum(axis=0)

    lam = cfg.trade_off
    dH = dH + lam * t_dH
    dN = dN + lam * t_dN

    # Label encoder backward; merged with the CE label-row scatter so the
    # label positions take a single add.
    label_vals = d_pos[:, :, None] * Z[:, None, :]                 # (B, k, L)
    if not cfg.stop_label_gradient:
        dC = lam * t_dC
        dpre_c = dC * (1.0 - C * C)
        grads[w_label] += dpre_c.T @ means_l
        grads[b_label] += dpre_c.sum(axis=0)
        dmean_l = (dpre_c @ p[w_label]) / k
        label_vals = label_vals + dmean_l[:, None, :]
    np.add.at(dq_all, pb.lpos.ravel(), label_vals.reshape(-1, L))
    np.add.at(dq_all, pb.npos.ravel(), (d_neg[:, :, None] * Z[:, None, :]).reshape(-1, L))

    # Unclicked encoder backward.
    dpre_n = dN * (1.0 - N * N)
    grads["w_unclicked"] += dpre_n.T @ means_u
    grads["b_unclicked"] += dpre_n.sum(axis=0)
    if len(pb.upos):
        dmean_u = (dpre_n @ p["w_unclicked"]) * pb.inv_nu[:, None]
        np.add.at(dq_all, pb.upos, dmean_u[pb.useg])

    # Clicked encoder backward.
    dpre_h = dH * (1.0 - H * H)
    grads["w_clicked"] += dpre_h.T @ clicked_in
    grads["b_clicked"] += dpre_h.sum(axis=0)
    din = dpre_h @ p["w_clicked"]                                  # (B, 2L)
    np.add.at(grads["emb_user"], pb.user_rows, din[:, L:])
    dtop = din[:, :L] * pb.inv_nc[:, None]
    np.add.at(dq_all, pb.cpos, dtop[pb.cseg])

    return float(ce_b.sum() + lam * tri_b.sum()), float(ce_b.sum()), float(tri_b.sum())
