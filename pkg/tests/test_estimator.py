"""The sklearn-facing facade."""

import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import make_catalog, make_example
from skiprec.estimator import SkipAwareRecommender


def fitted_recommender(**overrides):
    catalog = make_catalog(n_items=14)
    X = [
        make_example(
            catalog,
            clicked=[i % 14, (i + 2) % 14],
            unclicked=[(i + 6) % 14],
            labels=[(i + 1) % 14, (i + 8) % 14],
            user=f"u{i % 3}",
            t=10 + i,
        )
        for i in range(6)
    ]
    kw = dict(
        embedding_dim=6,
        num_negatives=4,
        epochs=1,
        batch_size=3,
        cutoffs=(5, 10),
        margin=1.0,
        margin_star=1.0,
    )
    kw.update(overrides)
    est = SkipAwareRecommender(**kw)
    return est, X, catalog


def test_params_round_trip_through_clone():
    est = SkipAwareRecommender(embedding_dim=8, metric_mode="asym", trade_off=2.5)
    params = est.get_params()
    assert params["embedding_dim"] == 8
    assert params["metric_mode"] == "asym"
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(epochs=3)
    assert twin.epochs == 3
    assert est.epochs == 10  # the original is untouched


def test_fit_returns_self_and_exposes_state():
    est, X, catalog = fitted_recommender()
    out = est.fit(X, catalog=catalog)
    assert out is est
    assert est.n_examples_ == 6
    assert len(est.loss_trace_) == 1
    assert est.model_.user_ids == ["u0", "u1", "u2"]
    assert est.model_.embed_dim == 6
    assert est.sampler_.n_items == 14
    assert set(est.optimizer_.accumulators) == set(est.model_.params)


def test_unfitted_predict_raises():
    est = SkipAwareRecommender()
    with pytest.raises(NotFittedError):
        est.predict([])
    with pytest.raises(NotFittedError):
        est.evaluate([])


def test_predict_widths_and_contents():
    est, X, catalog = fitted_recommender()
    est.fit(X, catalog=catalog)
    ranked = est.predict(X[:2])
    assert len(ranked) == 2
    for row in ranked:
        assert len(row) == 5  # first cutoff
        assert len(set(row)) == 5
        for item in row:
            assert item in set(catalog.ids)
    narrow = est.predict(X[:1], k=3)
    assert len(narrow[0]) == 3
    assert narrow[0] == ranked[0][:3]
    wide = est.predict(X[:1], k=99)
    assert len(wide[0]) == 14  # clamped to the catalog
    with pytest.raises(ValueError):
        est.predict(X[:1], k=0)


def test_score_is_hit_rate_at_first_cutoff():
    est, X, catalog = fitted_recommender()
    est.fit(X, catalog=catalog)
    report = est.evaluate(X, cutoffs=(5,))
    assert est.score(X) == report.hr[5]
    full = est.evaluate(X)
    assert full.cutoffs == [5, 10]


def test_catalog_argument_forms():
    est, X, catalog = fitted_recommender()
    est.fit(X, catalog=catalog.items)  # raw ItemMeta list also accepted
    assert est.model_.catalog.ids == catalog.ids
    with pytest.raises(TypeError, match="catalog must be"):
        SkipAwareRecommender().fit(X, catalog="catalog.jsonl")


def test_fit_validates_examples():
    est, X, catalog = fitted_recommender()
    with pytest.raises(ValueError, match="non-empty list"):
        est.fit([], catalog=catalog)
    with pytest.raises(TypeError, match="TrainingExample"):
        est.fit(["nope"], catalog=catalog)
    X[0].labels = []
    with pytest.raises(ValueError, match="need labels"):
        est.fit(X, catalog=catalog)


def test_fit_rejects_unknown_items_and_bad_hyperparameters():
    est, X, catalog = fitted_recommender()
    X[1].clicked_seq = ["mystery-item"]
    with pytest.raises(ValueError, match="unknown item id"):
        est.fit(X, catalog=catalog)

    est2, X2, catalog2 = fitted_recommender(clicked_encoder="transformer")
    with pytest.raises(ValueError, match="clicked_encoder"):
        est2.fit(X2, catalog=catalog2)
    est3, X3, catalog3 = fitted_recommender(embedding_dim=0)
    with pytest.raises(ValueError, match="embedding_dim"):
        est3.fit(X3, catalog=catalog3)
    est4, X4, catalog4 = fitted_recommender(metric_mode="quad")
    with pytest.raises(ValueError, match="metric_mode"):
        est4.fit(X4, catalog=catalog4)
