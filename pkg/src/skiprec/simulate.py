"""Synthetic browse-log generator with a known ground-truth taste model.

Every user and item gets a latent vector; affinity is their dot product. A
session's impression slate is the top items by affinity plus Gaussian policy
noise, and each impressed item is clicked with probability
sigmoid(affinity + click_bias + click noise). Item latents are built
hierarchically (first-level category centroid, then leaf offset, then item
offset) so that items sharing a category genuinely look alike, which is what
makes the categorical side features informative.

All randomness is keyed by (seed, stream, ...) tuples through numpy's
SeedSequence, so a config reproduces its corpus event for event, and
regenerating with the same seed after partial consumption of another stream
cannot shift anything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import EVENT_CLICK, EVENT_IMPRESSION, Event, ItemMeta
from .numeric import stable_sigmoid

# Latent construction scales. Most of the item-latent variance sits on the
# first-level centroid, so taste is expressed mainly at the category level and
# a skipped item says something about its whole category, not just itself.
# The per-dimension item scale is the root of the summed squares (about 0.11),
# which with unit-normal users and latent_dim 8 puts the affinity standard
# deviation near 0.31 and the click rate around 35 percent under the default
# bias, while leaving enough signal for impression selection to be
# taste-driven.
FIRST_LEVEL_SD = 0.10
LEAF_SD = 0.04
ITEM_SD = 0.03

BASE_TIME = 1_600_000_000   # corpus epoch, seconds
SESSION_GAP = 10_800        # three hours between a user's sessions

_STREAM_CATALOG = 1
_STREAM_USERS = 2
_STREAM_SESSION = 3


LEAVES_PER_FIRST_LEVEL = 5


@dataclass
class GenConfig:
    """Corpus dimensions and behavior-model knobs.

    Leaf categories nest in blocks of LEAVES_PER_FIRST_LEVEL under
    ceil(n_leaf_categories / 5) first-level categories.
    """

    n_users: int = 500
    n_items: int = 2000
    n_leaf_categories: int = 40
    n_brands: int = 60
    n_shops: int = 50
    latent_dim: int = 8
    sessions_per_user: int = 12
    impressions_per_session: int = 20
    policy_noise: float = 0.5
    click_bias: float = -1.0
    click_noise: float = 0.5
    seed: int = 0

    @property
    def n_first_level(self) -> int:
        return -(-self.n_leaf_categories // LEAVES_PER_FIRST_LEVEL)

    def validate(self) -> None:
        for name in (
            "n_users",
            "n_items",
            "n_leaf_categories",
            "n_brands",
            "n_shops",
            "latent_dim",
            "sessions_per_user",
            "impressions_per_session",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.impressions_per_session < 2:
            raise ValueError(
                f"impressions_per_session must be >= 2, got {self.impressions_per_session}"
            )
        if self.impressions_per_session > self.n_items:
            raise ValueError(
                "impressions_per_session cannot exceed n_items "
                f"({self.impressions_per_session} > {self.n_items})"
            )
        for name in ("policy_noise", "click_noise"):
            value = getattr(self, name)
            if not value >= 0.0:
                raise ValueError(f"{name} must be >= 0, got {value!r}")
        if not np.isfinite(self.click_bias):
            raise ValueError(f"click_bias must be finite, got {self.click_bias!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")


def _pad(prefix: str, idx: int, total: int) -> str:
    width = len(str(total - 1))
    return f"{prefix}{idx:0{width}d}"


def user_ids(cfg: GenConfig) -> list[str]:
    return [_pad("u", i, cfg.n_users) for i in range(cfg.n_users)]


def generate_catalog(cfg: GenConfig) -> tuple[list[ItemMeta], dict[str, np.ndarray]]:
    """Draw the item catalog and its latents.

    Returns (items, latents) where latents has keys "item" with shape
    (n_items, latent_dim) and "user" with shape (n_users, latent_dim).
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, _STREAM_CATALOG])
    d = cfg.latent_dim
    first_centroids = rng.normal(0.0, FIRST_LEVEL_SD, size=(cfg.n_first_level, d))
    # Leaves are grouped into contiguous first-level blocks of five.
    leaf_first = np.array(
        [leaf // LEAVES_PER_FIRST_LEVEL for leaf in range(cfg.n_leaf_categories)]
    )
    leaf_centroids = first_centroids[leaf_first] + rng.normal(
        0.0, LEAF_SD, size=(cfg.n_leaf_categories, d)
    )
    item_leaf = rng.integers(0, cfg.n_leaf_categories, size=cfg.n_items)
    item_brand = rng.integers(0, cfg.n_brands, size=cfg.n_items)
    item_shop = rng.integers(0, cfg.n_shops, size=cfg.n_items)
    item_latents = leaf_centroids[item_leaf] + rng.normal(
        0.0, ITEM_SD, size=(cfg.n_items, d)
    )

    items = [
        ItemMeta(
            item_id=_pad("i", i, cfg.n_items),
            leaf_category=_pad("leaf", int(item_leaf[i]), cfg.n_leaf_categories),
            first_level_category=_pad(
                "cat", int(leaf_first[item_leaf[i]]), cfg.n_first_level
            ),
            brand=_pad("b", int(item_brand[i]), cfg.n_brands),
            shop=_pad("s", int(item_shop[i]), cfg.n_shops),
        )
        for i in range(cfg.n_items)
    ]

    user_rng = np.random.default_rng([cfg.seed, _STREAM_USERS])
    user_latents = user_rng.normal(0.0, 1.0, size=(cfg.n_users, d))
    return items, {"item": item_latents, "user": user_latents}


def generate_events(cfg: GenConfig, latents: dict[str, np.ndarray]) -> list[Event]:
    """Roll out every user session and return the event log.

    Events come out sorted by (user, timestamp): users in id order, sessions
    in time order, impressions within a session in slate order. A click
    shares its impression's timestamp.
    """
    cfg.validate()
    item_lat = latents["item"]
    user_lat = latents["user"]
    if item_lat.shape != (cfg.n_items, cfg.latent_dim):
        raise ValueError(
            f"item latents have shape {item_lat.shape}, expected "
            f"{(cfg.n_items, cfg.latent_dim)}"
        )
    if user_lat.shape != (cfg.n_users, cfg.latent_dim):
        raise ValueError(
            f"user latents have shape {user_lat.shape}, expected "
            f"{(cfg.n_users, cfg.latent_dim)}"
        )
    uids = user_ids(cfg)
    iids = [_pad("i", i, cfg.n_items) for i in range(cfg.n_items)]
    k = cfg.impressions_per_session
    events: list[Event] = []
    for u in range(cfg.n_users):
        affinity = item_lat @ user_lat[u]
        for s in range(cfg.sessions_per_user):
            rng = np.random.default_rng([cfg.seed, _STREAM_SESSION, u, s])
            scores = affinity + rng.normal(0.0, cfg.policy_noise, size=cfg.n_items)
            slate = np.argsort(-scores, kind="stable")[:k]
            click_eps = rng.normal(0.0, cfg.click_noise, size=k)
            click_u = rng.random(size=k)
            p_click = stable_sigmoid(affinity[slate] + cfg.click_bias + click_eps)
            base_t = BASE_TIME + s * SESSION_GAP
            for rank, item_idx in enumerate(slate):
                t = base_t + rank
                item_id = iids[int(item_idx)]
                events.append(Event(uids[u], item_id, t, EVENT_IMPRESSION))
                if click_u[rank] < p_click[rank]:
                    events.append(Event(uids[u], item_id, t, EVENT_CLICK))
    return events


def generate_corpus(cfg: GenConfig) -> tuple[list[ItemMeta], dict[str, np.ndarray], list[Event]]:
    items, latents = generate_catalog(cfg)
    events = generate_events(cfg, latents)
    return items, latents, events


def write_latents(cfg: GenConfig, latents: dict[str, np.ndarray], path) -> None:
    """Dump ground-truth latents as JSONL for offline inspection."""
    uids = user_ids(cfg)
    iids = [_pad("i", i, cfg.n_items) for i in range(cfg.n_items)]
    with open(path, "w", encoding="utf-8") as fh:
        for idx, uid in enumerate(uids):
            rec = {"kind": "user", "id": uid, "v": [round(x, 9) for x in latents["user"][idx]]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        for idx, iid in enumerate(iids):
            rec = {"kind": "item", "id": iid, "v": [round(x, 9) for x in latents["item"][idx]]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def affinity_summary(
    cfg: GenConfig, latents: dict[str, np.ndarray], events: list[Event]
) -> dict[str, float]:
    """Ground-truth affinity means for clicked, impressed-never-clicked, and
    all (user, item) pairs, plus the overall click-through rate."""
    item_lat = latents["item"]
    user_lat = latents["user"]
    u_row = {uid: i for i, uid in enumerate(user_ids(cfg))}
    i_row = {_pad("i", i, cfg.n_items): i for i in range(cfg.n_items)}

    clicked_pairs: set[tuple[int, int]] = set()
    impressed_pairs: set[tuple[int, int]] = set()
    n_imp = 0
    n_clk = 0
    for ev in events:
        pair = (u_row[ev.user_id], i_row[ev.item_id])
        if ev.event_type == EVENT_CLICK:
            clicked_pairs.add(pair)
            n_clk += 1
        else:
            impressed_pairs.add(pair)
            n_imp += 1
    skipped_pairs = impressed_pairs - clicked_pairs

    def mean_affinity(pairs) -> float:
        if not pairs:
            return float("nan")
        idx = np.array(sorted(pairs))
        return float(np.mean(np.sum(user_lat[idx[:, 0]] * item_lat[idx[:, 1]], axis=1)))

    population = float(np.mean(user_lat @ item_lat.T))
    return {
        "clicked_mean": mean_affinity(clicked_pairs),
        "skipped_mean": mean_affinity(skipped_pairs),
        "population_mean": population,
        "ctr": n_clk / n_imp if n_imp else float("nan"),
        "n_impressions": float(n_imp),
        "n_clicks": float(n_clk),
    }
