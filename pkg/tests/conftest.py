"""Shared builders for the test suite: tiny catalogs, models, examples."""

import numpy as np

from skiprec.data import CatalogIndex, ItemMeta, TrainingExample
from skiprec.encoders import build_model, zero_grads
from skiprec.losses import example_loss, example_loss_and_grads
from skiprec.numeric import finite_diff_tensor_grads, relative_gap


def make_catalog(n_items=12, n_leaf=3, n_cat=2, n_brand=4, n_shop=3):
    """Small deterministic catalog; every leaf maps to exactly one category."""
    items = []
    for i in range(n_items):
        leaf = i % n_leaf
        items.append(
            ItemMeta(
                item_id=f"i{i:03d}",
                leaf_category=f"leaf{leaf}",
                first_level_category=f"cat{leaf % n_cat}",
                brand=f"b{i % n_brand}",
                shop=f"s{i % n_shop}",
            )
        )
    return CatalogIndex(items)


def make_example(catalog, clicked, unclicked, labels, user="u0", t=1000):
    """Build a TrainingExample from catalog row indices."""
    ids = catalog.ids
    return TrainingExample(
        user_id=user,
        anchor_time=t,
        clicked_seq=[ids[i] for i in clicked],
        unclicked_seq=[ids[i] for i in unclicked],
        labels=[ids[i] for i in labels],
    )


def tiny_model(catalog=None, embed_dim=6, clicked_variant="meanpool",
               share_label_ffn=False, seed=0, n_users=3):
    if catalog is None:
        catalog = make_catalog()
    users = [f"u{i}" for i in range(n_users)]
    return build_model(
        catalog,
        users,
        embed_dim=embed_dim,
        clicked_variant=clicked_variant,
        share_label_ffn=share_label_ffn,
        seed=seed,
    )


def fd_gap_for_example(model, example, negatives, probs, cfg, coords=None, seed=0):
    """Worst relative gap between analytic and finite-difference gradients."""
    grads = zero_grads(model)
    example_loss_and_grads(model, example, list(negatives), probs, cfg, grads)

    def loss_fn():
        return example_loss(model, example, list(negatives), probs, cfg)

    rng = np.random.default_rng(seed) if coords is not None else None
    numeric = finite_diff_tensor_grads(loss_fn, model.params, coords=coords, rng=rng)
    return max(relative_gap(grads[name], numeric[name]) for name in model.params)
