import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgmrec.datagen import (
    DataError, InteractionDataset, ModalityTable, apply_missing_plan, build_bundle,
    co_interaction_counts, generate_corpus, holdout_new_items, impute_baseline, make_missing_plan_levels,
    make_missing_plan_ratio, no_missing_plan,
)

from conftest import small_spec


def test_corpus_is_deterministic():
    a = generate_corpus(small_spec(seed=3))
    b = generate_corpus(small_spec(seed=3))
    for split in ("train", "valid", "test"):
        assert np.array_equal(a[0].split(split), b[0].split(split))
    for ta, tb in zip(a[1], b[1]):
        assert np.array_equal(ta.features, tb.features)
    c = generate_corpus(small_spec(seed=4))
    assert not np.array_equal(a[0].train, c[0].train)


def test_split_is_per_user_8_1_1():
    ds, tables, latents = generate_corpus(small_spec(interactions_per_user=10))
    for split, expected in (("train", 8), ("valid", 1), ("test", 1)):
        assert (ds.user_degree(split) == expected).all()
    every = np.concatenate([ds.train, ds.valid, ds.test])
    assert len(np.unique(every, axis=0)) == len(every)
    assert tables[0].features.shape == (40, 12) and tables[1].features.dtype == np.float32
    assert latents.shared.shape == (40, 4) and len(latents.specific) == 2


def test_tiny_users_keep_one_train_pair():
    ds, _, _ = generate_corpus(small_spec(interactions_per_user=3))
    assert (ds.user_degree("train") == 3).all()
    assert len(ds.valid) == 0 and len(ds.test) == 0


def test_features_carry_the_shared_latent():
    spec = small_spec(num_items=300, noise=0.0)
    _, tables, lat = generate_corpus(spec)
    X = np.hstack([tables[0].features, np.ones((300, 1))])
    coef, *_ = np.linalg.lstsq(X, lat.shared, rcond=None)
    resid = lat.shared - X @ coef
    assert (resid ** 2).sum() / (lat.shared ** 2).sum() < 1e-6


@pytest.mark.parametrize("bad", [dict(num_users=0), dict(modality_dims=(3,)), dict(noise=-1.0),
                                 dict(interactions_per_user=1000), dict(missing_mode="weird"),
                                 dict(new_item_fraction=1.0)])
def test_spec_validation(bad):
    with pytest.raises(DataError):
        small_spec(**bad)


@given(st.integers(3, 400), st.sampled_from([2, 3]), st.integers(0, 1000))
def test_level_plan_groups_balanced(n, M, seed):
    plan = make_missing_plan_levels(n, M, seed)
    counts = np.bincount(plan.missing_count(), minlength=M + 1)
    assert counts.sum() == n
    assert np.abs(counts - n / (M + 1)).max() <= 1


def test_level_plan_rejects_other_arity():
    with pytest.raises(DataError):
        make_missing_plan_levels(10, 4, 0)


@given(st.integers(1, 200), st.integers(2, 3), st.integers(0, 1000),
       st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_ratio_plans_nested(n, M, seed, ratios):
    ratios = sorted(ratios)
    plans = make_missing_plan_ratio(n, M, ratios, seed)
    for r, plan in zip(ratios, plans):
        assert plan.missing.sum() == int(round(r * n * M))
    for a, b in zip(plans, plans[1:]):
        assert not (a.missing & ~b.missing).any()


def test_ratio_plan_input_checks():
    with pytest.raises(DataError):
        make_missing_plan_ratio(10, 2, [0.5, 0.2], 0)
    with pytest.raises(DataError):
        make_missing_plan_ratio(10, 2, [1.5], 0)


def test_apply_plan_hides_rows_with_available_mean():
    bundle = build_bundle(small_spec())
    for m, (obs, truth) in enumerate(zip(bundle.tables, bundle.truth)):
        miss = bundle.plan.missing[:, m]
        assert np.array_equal(obs.available, ~miss)
        assert np.array_equal(obs.features[~miss], truth.features[~miss])
        mean = np.broadcast_to(truth.features[~miss].mean(axis=0), obs.features[miss].shape)
        np.testing.assert_allclose(obs.features[miss], mean, rtol=1e-5, atol=1e-6)


def test_no_missing_plan_keeps_everything():
    bundle = build_bundle(small_spec(missing_mode="none"))
    assert not bundle.plan.missing.any()
    assert all(t.available.all() for t in bundle.tables)


@given(st.floats(0.05, 0.5), st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_new_items_never_in_train_or_valid(frac, seed):
    ds, _, _ = generate_corpus(small_spec(seed=seed))
    held = holdout_new_items(ds, frac, seed)
    flags = held.new_item_flags
    assert flags.sum() == max(1, int(round(frac * ds.num_items)))
    assert not flags[held.train[:, 1]].any()
    assert not flags[held.valid[:, 1]].any()
    # every held-out pair of a surviving user lands in test
    keep = held.user_degree("train") > 0
    moved = np.concatenate([ds.train, ds.valid])
    moved = moved[flags[moved[:, 1]] & keep[moved[:, 0]]]
    test_set = {tuple(p) for p in held.test.tolist()}
    assert all(tuple(p) in test_set for p in moved.tolist())


def _toy_dataset():
    # users 0,1 share items 0 and 1; user 2 shares item 1 with item 2
    train = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [2, 1], [2, 2], [3, 3]])
    return InteractionDataset(4, 5, train, np.empty((0, 2)), np.empty((0, 2)))


def test_co_interaction_counts_by_hand():
    co = co_interaction_counts(_toy_dataset())
    assert co[0, 1] == 2 and co[1, 2] == 1 and co[0, 2] == 0
    assert np.all(np.diag(co) == 0) and np.array_equal(co, co.T)


def test_nn_mean_imputation_by_hand():
    ds = _toy_dataset()
    feats = np.arange(10, dtype=np.float32).reshape(5, 2)
    table = ModalityTable(0, feats, np.array([True, False, True, True, True]))
    out = impute_baseline(table, ds, "nn_mean")
    # item 1 co-occurs with item 0 (2 users) and item 2 (1 user), both available
    np.testing.assert_allclose(out.features[1], feats[[0, 2]].mean(axis=0))
    assert np.array_equal(out.features[table.available], feats[table.available])


def test_nn_mean_falls_back_to_global_mean():
    ds = _toy_dataset()
    feats = np.arange(10, dtype=np.float32).reshape(5, 2)
    table = ModalityTable(0, feats, np.array([True, True, True, True, False]))  # item 4 has no users
    out = impute_baseline(table, ds, "nn_mean")
    np.testing.assert_allclose(out.features[4], feats[:4].mean(axis=0))


@pytest.mark.parametrize("method", ["global_mean", "nn_mean"])
def test_imputation_is_idempotent(method, small_bundle):
    for t in small_bundle.tables:
        once = impute_baseline(t, small_bundle.dataset, method)
        twice = impute_baseline(once, small_bundle.dataset, method)
        assert np.array_equal(once.features, twice.features)
        assert np.array_equal(once.available, t.available)


def test_unknown_imputation():
    with pytest.raises(DataError):
        impute_baseline(ModalityTable(0, np.zeros((2, 2)), np.ones(2, bool)), _toy_dataset(), "magic")


def test_no_missing_helper():
    plan = no_missing_plan(5, 3)
    assert plan.missing.shape == (5, 3) and not plan.missing.any()
    tables = apply_missing_plan([ModalityTable(m, np.ones((5, 2)), np.ones(5, bool)) for m in range(3)], plan)
    assert all(t.available.all() for t in tables)
