"""Embedding tables and the three sequence encoders, forward and backward.

An item is embedded by concatenating five table rows (item id, leaf
category, first-level category, brand, shop) and projecting through a
single tanh layer to the shared width L:

    q_i = tanh(W_p x_i + b_p),   x_i = [e_item; e_leaf; e_cat; e_brand; e_shop]

Three encodings are produced per example, all length L:

* h, the clicked-history encoding. Either "meanpool" (mean of the clicked
  q vectors) or "recurrent" (a GRU over them); the pooled vector or final
  GRU state is concatenated with the user embedding and passed through one
  tanh layer.
* n, the skipped-history encoding: tanh layer over the mean of the
  unclicked q vectors (the zero vector when the skip list is empty).
* c, the label encoding: same architecture as n over the label items, with
  its own weights unless the model is built with share_label_ffn.

Gradients are hand-derived. backward_example consumes the upstream
gradients on h, n, c and on the per-item q rows, and accumulates parameter
gradients into a dict that mirrors the parameter tree. Every formula here
is checked against the central-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CatalogIndex, TrainingExample
from .numeric import stable_sigmoid

CLICKED_VARIANTS = ("meanpool", "recurrent")

# Share of the concatenated width owed to each feature field, item id first.
_FEATURE_FRACTIONS = (
    ("item", 1 / 2),
    ("leaf", 3 / 16),
    ("cat", 1 / 8),
    ("brand", 3 / 32),
    ("shop", 3 / 32),
)


@dataclass(frozen=True)
class FeatureDims:
    """Per-field embedding widths; concat_width is their sum."""

    item: int
    leaf: int
    cat: int
    brand: int
    shop: int

    @property
    def concat_width(self) -> int:
        return self.item + self.leaf + self.cat + self.brand + self.shop

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.item, self.leaf, self.cat, self.brand, self.shop)


def feature_dims_for(embed_dim: int) -> FeatureDims:
    """Split the model width across feature fields, at least one dim each.

    The item id gets half the budget, the category levels most of the rest.
    Half-way values round up, so the split is stable across platforms.
    """
    if embed_dim < 1:
        raise ValueError(f"embed_dim must be >= 1, got {embed_dim}")
    dims = {name: max(1, int(frac * embed_dim + 0.5)) for name, frac in _FEATURE_FRACTIONS}
    return FeatureDims(**dims)


@dataclass
class Model:
    """Parameter tree plus the vocabularies it was sized for."""

    catalog: CatalogIndex
    user_ids: list[str]
    embed_dim: int
    clicked_variant: str
    share_label_ffn: bool
    dims: FeatureDims
    params: dict[str, np.ndarray]
    user_row: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_row:
            self.user_row = {u: i for i, u in enumerate(self.user_ids)}

    def require_user(self, user_id: str) -> int:
        try:
            return self.user_row[user_id]
        except KeyError:
            raise LookupError(f"unknown user id '{user_id}'") from None

    def label_weight_names(self) -> tuple[str, str]:
        if self.share_label_ffn:
            return ("w_unclicked", "b_unclicked")
        return ("w_label", "b_label")


def parameter_shapes(
    catalog: CatalogIndex,
    n_users: int,
    embed_dim: int,
    clicked_variant: str,
    share_label_ffn: bool,
) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every tensor, in their canonical order."""
    if clicked_variant not in CLICKED_VARIANTS:
        raise ValueError(
            f"clicked_variant must be one of {CLICKED_VARIANTS}, got {clicked_variant!r}"
        )
    if n_users < 1:
        raise ValueError(f"need at least one user, got {n_users}")
    dims = feature_dims_for(embed_dim)
    sizes = catalog.vocab_sizes()
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("emb_item", (sizes["item"], dims.item)),
        ("emb_leaf", (sizes["leaf"], dims.leaf)),
        ("emb_cat", (sizes["cat"], dims.cat)),
        ("emb_brand", (sizes["brand"], dims.brand)),
        ("emb_shop", (sizes["shop"], dims.shop)),
        ("emb_user", (n_users, embed_dim)),
        ("w_item_proj", (embed_dim, dims.concat_width)),
        ("b_item_proj", (embed_dim,)),
        ("w_clicked", (embed_dim, 2 * embed_dim)),
        ("b_clicked", (embed_dim,)),
    ]
    if clicked_variant == "recurrent":
        shapes += [
            ("w_update_in", (embed_dim, embed_dim)),
            ("u_update", (embed_dim, embed_dim)),
            ("b_update", (embed_dim,)),
            ("w_reset_in", (embed_dim, embed_dim)),
            ("u_reset", (embed_dim, embed_dim)),
            ("b_reset", (embed_dim,)),
            ("w_cand_in", (embed_dim, embed_dim)),
            ("u_cand", (embed_dim, embed_dim)),
            ("b_cand", (embed_dim,)),
        ]
    shapes += [
        ("w_unclicked", (embed_dim, embed_dim)),
        ("b_unclicked", (embed_dim,)),
    ]
    if not share_label_ffn:
        shapes += [
            ("w_label", (embed_dim, embed_dim)),
            ("b_label", (embed_dim,)),
        ]
    shapes += [
        ("w_gate", (embed_dim, 2 * embed_dim)),
        ("b_gate", (embed_dim,)),
    ]
    return shapes

INIT_SCALE = 0.05
_STREAM_INIT = 11


def build_model(
    catalog: CatalogIndex,
    user_ids: list[str],
    embed_dim: int = 32,
    clicked_variant: str = "meanpool",
    share_label_ffn: bool = False,
    seed: int = 0,
) -> Model:
    """Allocate and initialize all parameters, uniform in [-0.05, 0.05].

    Tensors are drawn in canonical order from a dedicated rng stream, so a
    (catalog, users, dims, seed) tuple always yields the same parameters.
    """
    if len(set(user_ids)) != len(user_ids):
        raise ValueError("user ids must be unique")
    shapes = parameter_shapes(
        catalog, len(user_ids), embed_dim, clicked_variant, share_label_ffn
    )
    rng = np.random.default_rng([seed, _STREAM_INIT])
    params = {
        name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape) for name, shape in shapes
    }
    return Model(
        catalog=catalog,
        user_ids=list(user_ids),
        embed_dim=embed_dim,
        clicked_variant=clicked_variant,
        share_label_ffn=share_label_ffn,
        dims=feature_dims_for(embed_dim),
        params=params,
    )


def zero_grads(model: Model) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in model.params.items()}


def _split_columns(dims: FeatureDims) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for width in dims.as_tuple():
        spans.append((start, start + width))
        start += width
    return spans


def embed_items(model: Model, item_ids: list[str]) -> np.ndarray:
    """Item encodings q for a list of ids, shape (len(ids), L)."""
    rows = np.array([model.catalog.require(i) for i in item_ids], dtype=np.int64)
    feat = model.catalog.feature_rows[rows]
    x = _gather_concat(model, feat)
    p = model.params
    return np.tanh(x @ p["w_item_proj"].T + p["b_item_proj"])


def embed_item(model: Model, item_id: str) -> np.ndarray:
    return embed_items(model, [item_id])[0]


def _gather_concat(model: Model, feat_rows: np.ndarray) -> np.ndarray:
    p = model.params
    tables = ("emb_item", "emb_leaf", "emb_cat", "emb_brand", "emb_shop")
    return np.concatenate(
        [p[tab][feat_rows[:, f]] for f, tab in enumerate(tables)], axis=1
    )


def all_item_encodings(model: Model) -> np.ndarray:
    """q for the whole catalog in row order, shape (n_items, L)."""
    feat = model.catalog.feature_rows
    x = _gather_concat(model, feat)
    p = model.params
    return np.tanh(x @ p["w_item_proj"].T + p["b_item_proj"])


@dataclass
class ExampleIndex:
    """Cached static structure of one example in catalog-row space.

    rows holds the distinct catalog rows touched by the clicked, unclicked,
    and label sequences (first-occurrence order); the pos_* arrays map each
    occurrence back into rows. sorted_rows/sort_order support merging extra
    rows in without a per-item lookup. Building this is pure string work, so
    the trainer caches it across epochs.
    """

    rows: np.ndarray               # (n_base,) distinct catalog rows
    sorted_rows: np.ndarray        # rows sorted ascending
    sort_order: np.ndarray         # rows[sort_order[i]] == sorted_rows[i]
    pos_clicked: np.ndarray
    pos_unclicked: np.ndarray
    pos_labels: np.ndarray
    label_rows: np.ndarray         # distinct label rows (positives to avoid)
    user_row: int


def example_index(
    model: Model, example: TrainingExample, cache: dict | None = None
) -> ExampleIndex:
    """Resolve an example's item ids to catalog rows, with optional caching.

    The cache key is the example's identity; callers that mutate examples
    in place must not reuse a cache across the mutation.
    """
    if cache is not None:
        hit = cache.get(id(example))
        if hit is not None:
            return hit
    if not example.clicked_seq:
        raise ValueError("clicked sequence must be non-empty")
    require = model.catalog.require
    row_pos: dict[int, int] = {}
    rows: list[int] = []

    def positions(item_ids: list[str]) -> np.ndarray:
        out = np.empty(len(item_ids), dtype=np.int64)
        for i, item in enumerate(item_ids):
            row = require(item)
            pos = row_pos.get(row)
            if pos is None:
                pos = len(rows)
                row_pos[row] = pos
                rows.append(row)
            out[i] = pos
        return out

    pos_clicked = positions(example.clicked_seq)
    pos_unclicked = positions(example.unclicked_seq)
    pos_labels = positions(example.labels)
    row_arr = np.array(rows, dtype=np.int64)
    sort_order = np.argsort(row_arr)
    index = ExampleIndex(
        rows=row_arr,
        sorted_rows=row_arr[sort_order],
        sort_order=sort_order,
        pos_clicked=pos_clicked,
        pos_unclicked=pos_unclicked,
        pos_labels=pos_labels,
        label_rows=np.unique(row_arr[pos_labels])
        if len(pos_labels)
        else np.empty(0, dtype=np.int64),
        user_row=model.require_user(example.user_id),
    )
    if cache is not None:
        cache[id(example)] = index
    return index


def combine_with_extras(
    index: ExampleIndex, extra_rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Append extra catalog rows (e.g. negatives) to an example's row set.

    Returns (all_rows, pos_extra): the combined row array and the position
    of every extra occurrence. Extras already present reuse their base
    position; novel ones are appended as-is, so a negative drawn twice owns
    two q rows (the projection is pure per row, so this only costs the
    duplicate row and keeps the merge branch-free).
    """
    if not len(extra_rows):
        return index.rows, np.empty(0, dtype=np.int64)
    sorted_rows = index.sorted_rows
    idx = np.searchsorted(sorted_rows, extra_rows)
    idx_c = np.minimum(idx, len(sorted_rows) - 1)
    found = sorted_rows[idx_c] == extra_rows
    pos_extra = np.empty(len(extra_rows), dtype=np.int64)
    pos_extra[found] = index.sort_order[idx_c[found]]
    novel = extra_rows[~found]
    if len(novel):
        pos_extra[~found] = len(index.rows) + np.arange(len(novel), dtype=np.int64)
        all_rows = np.concatenate([index.rows, novel])
    else:
        all_rows = index.rows
    return all_rows, pos_extra


@dataclass
class ForwardState:
    """Everything one example's forward pass produced, plus backward caches."""

    rows: np.ndarray               # (n,) catalog rows in q order (extras may repeat)
    feat_rows: np.ndarray | None   # (n, 5) feature-table rows (None when shared)
    x_concat: np.ndarray | None    # (n, concat_width)  (None when shared)
    q: np.ndarray                  # (n, L)
    pos_clicked: np.ndarray        # occurrence positions into q
    pos_unclicked: np.ndarray
    pos_labels: np.ndarray
    pos_extra: np.ndarray          # positions of the extra (negative) items
    user_row: int
    h: np.ndarray
    n: np.ndarray
    c: np.ndarray | None
    clicked_in: np.ndarray         # [pooled-or-final ; e_user], length 2L
    mean_unclicked: np.ndarray
    mean_labels: np.ndarray | None
    gru_h: np.ndarray | None = None   # (T+1, L), row 0 is the zero state
    gru_z: np.ndarray | None = None   # (T, L)
    gru_r: np.ndarray | None = None
    gru_g: np.ndarray | None = None


def _clicked_forward(model: Model, q_clicked: np.ndarray, user_row: int):
    """Shared clicked-encoder body; returns (h, clicked_in, gru caches)."""
    p = model.params
    L = model.embed_dim
    caches = (None, None, None, None)
    if model.clicked_variant == "meanpool":
        top = q_clicked.mean(axis=0)
    else:
        T = q_clicked.shape[0]
        hs = np.zeros((T + 1, L))
        zs = np.empty((T, L))
        rs = np.empty((T, L))
        gs = np.empty((T, L))
        w_z, u_z, b_z = p["w_update_in"], p["u_update"], p["b_update"]
        w_r, u_r, b_r = p["w_reset_in"], p["u_reset"], p["b_reset"]
        w_g, u_g, b_g = p["w_cand_in"], p["u_cand"], p["b_cand"]
        for t in range(T):
            q_t = q_clicked[t]
            h_prev = hs[t]
            z = stable_sigmoid(w_z @ q_t + u_z @ h_prev + b_z)
            r = stable_sigmoid(w_r @ q_t + u_r @ h_prev + b_r)
            g = np.tanh(w_g @ q_t + u_g @ (r * h_prev) + b_g)
            hs[t + 1] = (1.0 - z) * h_prev + z * g
            zs[t], rs[t], gs[t] = z, r, g
        top = hs[-1]
        caches = (hs, zs, rs, gs)
    clicked_in = np.concatenate([top, p["emb_user"][user_row]])
    h = np.tanh(p["w_clicked"] @ clicked_in + p["b_clicked"])
    return h, clicked_in, caches


def encode_clicked(model: Model, clicked_seq: list[str], user_id: str) -> np.ndarray:
    """Clicked-history encoding h for one sequence."""
    if not clicked_seq:
        raise ValueError("clicked sequence must be non-empty")
    q = embed_items(model, clicked_seq)
    h, _, _ = _clicked_forward(model, q, model.require_user(user_id))
    return h


def encode_unclicked(model: Model, unclicked_seq: list[str]) -> np.ndarray:
    """Skipped-history encoding n; defined (from the zero mean) when empty."""
    p = model.params
    if unclicked_seq:
        mean = embed_items(model, unclicked_seq).mean(axis=0)
    else:
        mean = np.zeros(model.embed_dim)
    return np.tanh(p["w_unclicked"] @ mean + p["b_unclicked"])


def encode_labels(model: Model, labels: list[str]) -> np.ndarray:
    """Label encoding c over the next-click items."""
    if not labels:
        raise ValueError("label list must be non-empty")
    w_name, b_name = model.label_weight_names()
    p = model.params
    mean = embed_items(model, labels).mean(axis=0)
    return np.tanh(p[w_name] @ mean + p[b_name])


def _encode_from_q(
    model: Model, q: np.ndarray, index: ExampleIndex
) -> tuple:
    """Run the three sequence encoders over an already-projected q matrix."""
    p = model.params
    h, clicked_in, gru = _clicked_forward(model, q[index.pos_clicked], index.user_row)

    if len(index.pos_unclicked):
        mean_unclicked = q[index.pos_unclicked].mean(axis=0)
    else:
        mean_unclicked = np.zeros(model.embed_dim)
    n = np.tanh(p["w_unclicked"] @ mean_unclicked + p["b_unclicked"])

    if len(index.pos_labels):
        mean_labels = q[index.pos_labels].mean(axis=0)
        w_name, b_name = model.label_weight_names()
        c = np.tanh(p[w_name] @ mean_labels + p[b_name])
    else:
        mean_labels = None
        c = None
    return h, n, c, clicked_in, mean_unclicked, mean_labels, gru


def state_from_q(
    model: Model,
    index: ExampleIndex,
    rows: np.ndarray,
    q: np.ndarray,
    pos_extra: np.ndarray,
) -> ForwardState:
    """Assemble a ForwardState around an externally computed q block.

    Used by the batched trainer, which projects all items of a mini-batch in
    one shot; such states carry no x_concat/feat_rows, so only the encoder
    part of the backward pass may run on them.
    """
    h, n, c, clicked_in, mean_unclicked, mean_labels, gru = _encode_from_q(
        model, q, index
    )
    return ForwardState(
        rows=rows,
        feat_rows=None,
        x_concat=None,
        q=q,
        pos_clicked=index.pos_clicked,
        pos_unclicked=index.pos_unclicked,
        pos_labels=index.pos_labels,
        pos_extra=pos_extra,
        user_row=index.user_row,
        h=h,
        n=n,
        c=c,
        clicked_in=clicked_in,
        mean_unclicked=mean_unclicked,
        mean_labels=mean_labels,
        gru_h=gru[0],
        gru_z=gru[1],
        gru_r=gru[2],
        gru_g=gru[3],
    )


def forward_example(
    model: Model,
    example: TrainingExample,
    extra_items: tuple[str, ...] = (),
    extra_rows: np.ndarray | None = None,
    cache: dict | None = None,
) -> ForwardState:
    """Run the full per-example forward pass.

    Extra items (e.g. sampled negatives) are embedded alongside so their q
    rows share the state; their positions land in state.pos_extra, with
    extras that already appear in the example reusing that q row. Pass them
    either as ids (extra_items) or as catalog rows (extra_rows), not both.
    c is None when the example carries no labels (pure inference).
    """
    index = example_index(model, example, cache)
    if extra_rows is None:
        extra_rows = np.array(
            [model.catalog.require(i) for i in extra_items], dtype=np.int64
        )
    elif extra_items:
        raise ValueError("pass extra_items or extra_rows, not both")
    rows, pos_extra = combine_with_extras(index, extra_rows)
    feat, x, q = project_rows(model, rows)
    state = state_from_q(model, index, rows, q, pos_extra)
    state.feat_rows = feat
    state.x_concat = x
    return state


def project_rows(model: Model, rows: np.ndarray):
    """Feature gather and item projection q = tanh(W_p x + b_p) for rows.

    Returns (feat_rows, x_concat, q); duplicates in rows are simply
    projected twice, callers keep whatever row multiset they pass.
    """
    feat = model.catalog.feature_rows[rows]
    x = _gather_concat(model, feat)
    q = np.tanh(x @ model.params["w_item_proj"].T + model.params["b_item_proj"])
    return feat, x, q


def encoder_backward(
    model: Model,
    state: ForwardState,
    dh: np.ndarray,
    dn: np.ndarray,
    dc: np.ndarray | None,
    dq: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate encoder-parameter gradients and the per-item dq rows.

    dh, dn, dc are the upstream gradients on the three encodings; dq is the
    (n, L) upstream gradient on the per-item q rows (score terms write there
    first) and is extended in place with the encoder contributions. The
    projection and embedding tables are handled by table_backward.
    """
    p = model.params
    L = model.embed_dim

    if dc is not None and state.c is not None:
        w_name, b_name = model.label_weight_names()
        dpre = dc * (1.0 - state.c * state.c)
        grads[w_name] += np.outer(dpre, state.mean_labels)
        grads[b_name] += dpre
        dmean = (p[w_name].T @ dpre) / len(state.pos_labels)
        np.add.at(dq, state.pos_labels, dmean)

    dpre_n = dn * (1.0 - state.n * state.n)
    grads["w_unclicked"] += np.outer(dpre_n, state.mean_unclicked)
    grads["b_unclicked"] += dpre_n
    if len(state.pos_unclicked):
        dmean = (p["w_unclicked"].T @ dpre_n) / len(state.pos_unclicked)
        np.add.at(dq, state.pos_unclicked, dmean)

    dpre_h = dh * (1.0 - state.h * state.h)
    grads["w_clicked"] += np.outer(dpre_h, state.clicked_in)
    grads["b_clicked"] += dpre_h
    din = p["w_clicked"].T @ dpre_h
    grads["emb_user"][state.user_row] += din[L:]
    dtop = din[:L]

    if model.clicked_variant == "meanpool":
        np.add.at(dq, state.pos_clicked, dtop / len(state.pos_clicked))
    else:
        _gru_backward(model, state, dtop, dq, grads)


def table_backward(
    model: Model, state: ForwardState, dq: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    """Push dq through q = tanh(W_p x + b_p) into the embedding tables."""
    dpre_q = dq * (1.0 - state.q * state.q)
    grads["w_item_proj"] += dpre_q.T @ state.x_concat
    grads["b_item_proj"] += dpre_q.sum(axis=0)
    dx = dpre_q @ model.params["w_item_proj"]
    scatter_tables(model, state.feat_rows, dx, grads)


def scatter_tables(
    model: Model, feat_rows: np.ndarray, dx: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    """Scatter concat-space gradients dx into the five embedding tables."""
    tables = ("emb_item", "emb_leaf", "emb_cat", "emb_brand", "emb_shop")
    for f, (start, stop) in enumerate(_split_columns(model.dims)):
        np.add.at(grads[tables[f]], feat_rows[:, f], dx[:, start:stop])


def backward_example(
    model: Model,
    state: ForwardState,
    dh: np.ndarray,
    dn: np.ndarray,
    dc: np.ndarray | None,
    dq: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one example (encoders + tables)."""
    encoder_backward(model, state, dh, dn, dc, dq, grads)
    table_backward(model, state, dq, grads)


def _gru_backward(
    model: Model,
    state: ForwardState,
    dlast: np.ndarray,
    dq: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    p = model.params
    hs, zs, rs, gs = state.gru_h, state.gru_z, state.gru_r, state.gru_g
    q = state.q
    pos = state.pos_clicked
    dh_t = dlast.copy()
    for t in range(len(pos) - 1, -1, -1):
        q_t = q[pos[t]]
        h_prev = hs[t]
        z, r, g = zs[t], rs[t], gs[t]
        dg = dh_t * z
        dz = dh_t * (g - h_prev)
        dprev = dh_t * (1.0 - z)

        da_g = dg * (1.0 - g * g)
        grads["w_cand_in"] += np.outer(da_g, q_t)
        grads["u_cand"] += np.outer(da_g, r * h_prev)
        grads["b_cand"] += da_g
        dq_t = p["w_cand_in"].T @ da_g
        drh = p["u_cand"].T @ da_g
        dprev += drh * r
        dr = drh * h_prev

        da_z = dz * z * (1.0 - z)
        grads["w_update_in"] += np.outer(da_z, q_t)
        grads["u_update"] += np.outer(da_z, h_prev)
        grads["b_update"] += da_z
        dq_t += p["w_update_in"].T @ da_z
        dprev += p["u_update"].T @ da_z

        da_r = dr * r * (1.0 - r)
        grads["w_reset_in"] += np.outer(da_r, q_t)
        grads["u_reset"] += np.outer(da_r, h_prev)
        grads["b_reset"] += da_r
        dq_t += p["w_reset_in"].T @ da_r
        dprev += p["u_reset"].T @ da_r

        dq[pos[t]] += dq_t
        dh_t = dprev
