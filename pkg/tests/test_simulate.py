"""Tests for the synthetic corpus generator."""

import json

import numpy as np
import pytest

import skiprec.simulate as sim
from skiprec.data import EVENT_CLICK, EVENT_IMPRESSION, build_examples, SequenceConfig
from skiprec.simulate import (
    GenConfig,
    affinity_summary,
    generate_catalog,
    generate_corpus,
    generate_events,
    user_ids,
    write_latents,
)

SMALL = dict(
    n_users=8, n_items=50, n_leaf_categories=6, n_brands=7, n_shops=5,
    sessions_per_user=5, impressions_per_session=10,
)


def small_cfg(**overrides):
    kw = {**SMALL, **overrides}
    return GenConfig(**kw)


def test_config_validation():
    GenConfig().validate()
    with pytest.raises(ValueError, match="n_users"):
        GenConfig(n_users=0).validate()
    with pytest.raises(ValueError, match="impressions_per_session"):
        GenConfig(impressions_per_session=1).validate()
    with pytest.raises(ValueError, match="cannot exceed n_items"):
        GenConfig(n_items=5, impressions_per_session=10).validate()
    with pytest.raises(ValueError, match="policy_noise"):
        GenConfig(policy_noise=-0.1).validate()
    with pytest.raises(ValueError, match="click_bias"):
        GenConfig(click_bias=float("nan")).validate()
    with pytest.raises(ValueError, match="seed"):
        GenConfig(seed=-1).validate()
    with pytest.raises(ValueError, match="n_items"):
        GenConfig(n_items=True).validate()


def test_first_level_count_rounds_up():
    assert GenConfig(n_leaf_categories=40).n_first_level == 8
    assert GenConfig(n_leaf_categories=41).n_first_level == 9
    assert GenConfig(n_leaf_categories=3).n_first_level == 1


def test_ids_are_zero_padded_to_fixed_width():
    cfg = small_cfg(n_users=100)
    uids = user_ids(cfg)
    assert uids[0] == "u00"
    assert uids[99] == "u99"
    assert len(set(uids)) == 100
    items, _ = generate_catalog(small_cfg())
    assert items[0].item_id == "i00"
    assert all(len(it.item_id) == 3 for it in items)


def test_leaf_to_first_level_mapping_is_blocked():
    items, _ = generate_catalog(small_cfg(n_leaf_categories=12))
    for it in items:
        leaf = int(it.leaf_category.removeprefix("leaf"))
        cat = int(it.first_level_category.removeprefix("cat"))
        assert cat == leaf // sim.LEAVES_PER_FIRST_LEVEL


def test_catalog_latent_shapes():
    cfg = small_cfg()
    items, latents = generate_catalog(cfg)
    assert len(items) == cfg.n_items
    assert latents["item"].shape == (cfg.n_items, cfg.latent_dim)
    assert latents["user"].shape == (cfg.n_users, cfg.latent_dim)


def test_corpus_is_deterministic_per_seed():
    a = generate_corpus(small_cfg(seed=11))
    b = generate_corpus(small_cfg(seed=11))
    c = generate_corpus(small_cfg(seed=12))
    assert a[0] == b[0]
    assert a[2] == b[2]
    np.testing.assert_array_equal(a[1]["item"], b[1]["item"])
    assert a[2] != c[2]


def test_event_accounting_identity():
    cfg = small_cfg()
    _, _, events = generate_corpus(cfg)
    n_imp = sum(1 for e in events if e.event_type == EVENT_IMPRESSION)
    n_clk = sum(1 for e in events if e.event_type == EVENT_CLICK)
    assert n_imp == cfg.n_users * cfg.sessions_per_user * cfg.impressions_per_session
    assert n_imp + n_clk == len(events)
    imp_keys = {(e.user_id, e.item_id, e.timestamp) for e in events
                if e.event_type == EVENT_IMPRESSION}
    for e in events:
        if e.event_type == EVENT_CLICK:
            assert (e.user_id, e.item_id, e.timestamp) in imp_keys


def test_session_timestamps_are_structured():
    cfg = small_cfg()
    _, _, events = generate_corpus(cfg)
    uid = user_ids(cfg)[0]
    times = sorted({e.timestamp for e in events
                    if e.user_id == uid and e.event_type == EVENT_IMPRESSION})
    assert len(times) == cfg.sessions_per_user * cfg.impressions_per_session
    assert times[0] == sim.BASE_TIME
    # ranks within a session are consecutive seconds
    session0 = times[: cfg.impressions_per_session]
    assert session0 == list(range(sim.BASE_TIME, sim.BASE_TIME + cfg.impressions_per_session))
    assert times[cfg.impressions_per_session] == sim.BASE_TIME + sim.SESSION_GAP


def test_click_bias_extremes_control_click_rate():
    _, _, everything = generate_corpus(small_cfg(click_bias=1e6))
    assert sum(1 for e in everything if e.event_type == EVENT_CLICK) == \
        sum(1 for e in everything if e.event_type == EVENT_IMPRESSION)
    _, _, nothing = generate_corpus(small_cfg(click_bias=-1e6))
    assert all(e.event_type == EVENT_IMPRESSION for e in nothing)


def test_zero_policy_noise_exposes_top_affinity_items():
    cfg = small_cfg(policy_noise=0.0, sessions_per_user=2)
    items, latents, events = generate_corpus(cfg)
    uid = user_ids(cfg)[2]
    affinity = latents["item"] @ latents["user"][2]
    expected = set(np.argsort(-affinity, kind="stable")[: cfg.impressions_per_session])
    for s in range(cfg.sessions_per_user):
        t0 = sim.BASE_TIME + s * sim.SESSION_GAP
        slate = {
            int(e.item_id.removeprefix("i"))
            for e in events
            if e.user_id == uid and e.event_type == EVENT_IMPRESSION
            and t0 <= e.timestamp < t0 + cfg.impressions_per_session
        }
        assert slate == expected


def test_same_leaf_items_look_more_alike():
    cfg = small_cfg(n_items=120, n_leaf_categories=10)
    items, latents = generate_catalog(cfg)
    leaf_of = np.array([int(it.leaf_category.removeprefix("leaf")) for it in items])
    cat_of = np.array([int(it.first_level_category.removeprefix("cat")) for it in items])
    vecs = latents["item"]
    rng = np.random.default_rng(5)
    same, cross = [], []
    while len(same) < 200 or len(cross) < 200:
        i, j = rng.integers(0, cfg.n_items, size=2)
        if i == j:
            continue
        d = float(np.sum((vecs[i] - vecs[j]) ** 2))
        if leaf_of[i] == leaf_of[j] and len(same) < 200:
            same.append(d)
        elif cat_of[i] != cat_of[j] and len(cross) < 200:
            cross.append(d)
    assert np.mean(same) < np.mean(cross)


def test_generate_events_checks_latent_shapes():
    cfg = small_cfg()
    _, latents = generate_catalog(cfg)
    bad = {"item": latents["item"][:, :-1], "user": latents["user"]}
    with pytest.raises(ValueError, match="item latents"):
        generate_events(cfg, bad)
    bad = {"item": latents["item"], "user": latents["user"][:-1]}
    with pytest.raises(ValueError, match="user latents"):
        generate_events(cfg, bad)


def test_write_latents_round_trips_as_jsonl(tmp_path):
    cfg = small_cfg(n_users=3, n_items=4, impressions_per_session=2)
    _, latents = generate_catalog(cfg)
    path = tmp_path / "latents.jsonl"
    write_latents(cfg, latents, path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == cfg.n_users + cfg.n_items
    assert recs[0]["kind"] == "user"
    assert recs[0]["id"] == "u0"
    assert recs[-1]["kind"] == "item"
    got = np.array(recs[3]["v"])
    np.testing.assert_allclose(got, latents["item"][0], atol=5e-10)


def test_affinity_summary_separates_clicked_from_population():
    cfg = small_cfg(n_users=20, sessions_per_user=8)
    items, latents, events = generate_corpus(cfg)
    summ = affinity_summary(cfg, latents, events)
    assert 0.0 < summ["ctr"] < 1.0
    assert summ["clicked_mean"] > summ["skipped_mean"]
    assert summ["clicked_mean"] > summ["population_mean"]
    assert summ["n_impressions"] == cfg.n_users * cfg.sessions_per_user * cfg.impressions_per_session


def test_generated_corpus_yields_buildable_examples():
    cfg = small_cfg(n_users=10, sessions_per_user=8)
    _, _, events = generate_corpus(cfg)
    examples = build_examples(events, SequenceConfig(label_k=2))
    assert examples
    assert any(ex.unclicked_seq for ex in examples)
