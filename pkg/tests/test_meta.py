import numpy as np
import pytest

from poolad.data import gen_ar1, gen_mixed, gen_sine, normalize
from poolad.errors import DataError
from poolad.features import FEATURE_DIM, extract_features
from poolad.meta import (ExpansionPolicy, MetaModel, MetaRow, MetaStore,
                         append_dataset_rows, expand_pool, expansion_decision,
                         match_models, observed_error, train_meta)
from poolad.model import TrainConfig
from poolad.pool import construct_pool
from tests.test_model import identity_model, zero_model


def small_cfg(**kw):
    base = dict(epochs=3, learning_rate=1e-2, batch_size=32, mu=0.5,
                beta=0.3, seed=0, stride=8)
    base.update(kw)
    return TrainConfig(**base)


def make_store(n_rows, target_fn, seed=0):
    rng = np.random.default_rng(seed)
    store = MetaStore()
    for i in range(n_rows):
        feats = rng.standard_normal(FEATURE_DIM)
        fp = rng.standard_normal(FEATURE_DIM)
        store.append(MetaRow(f"ds{i}", feats, f"m{i % 3}", fp,
                             float(target_fn(feats, fp)), "initial"))
    return store


class StubMeta:
    """Canned standardized-error predictions keyed by fingerprint hash."""

    def __init__(self, errors_by_id, pool):
        self._table = {}
        for m in pool.models:
            key = pool.fingerprints[m.model_id].tobytes()
            self._table[key] = errors_by_id[m.model_id]

    def predict_standardized(self, x):
        return self._table[np.asarray(x)[FEATURE_DIM:].tobytes()]


class TestObservedError:
    def test_identity_near_zero(self):
        ts, _ = normalize(gen_sine(128, 2, seed=0))
        assert observed_error(identity_model(8), ts) == pytest.approx(0.0, abs=1e-10)

    def test_zero_network_near_unit_variance(self):
        ts, _ = normalize(gen_ar1(2000, 2, seed=1))
        assert observed_error(zero_model(8), ts) == pytest.approx(1.0, abs=0.2)

    def test_nonnegative(self):
        ts, _ = normalize(gen_mixed(128, 2, seed=2))
        from poolad.model import new_model
        assert observed_error(new_model(8, [4], seed=0), ts) >= 0.0


class TestTrainMeta:
    def test_constant_target(self):
        store = make_store(40, lambda f, p: 2.5)
        meta = train_meta(store, seed=0)
        rows = store.trainable()
        for r in rows[:10]:
            x = np.concatenate([r.features, r.fingerprint])
            assert meta.predict(x) == pytest.approx(2.5, abs=0.05)

    def test_deterministic(self):
        store = make_store(40, lambda f, p: abs(f[0]) + 1.0)
        a = train_meta(store, seed=3)
        b = train_meta(store, seed=3)
        assert np.array_equal(a.theta, b.theta)

    def test_learns_linear_target(self):
        store = make_store(120, lambda f, p: 5.0 + 2.0 * f[0], seed=1)
        meta = train_meta(store, seed=0)
        rows = store.trainable()
        x = np.stack([np.concatenate([r.features, r.fingerprint]) for r in rows])
        y = np.array([r.target for r in rows])
        pred = np.array([meta.predict(xi) for xi in x])
        assert ((pred - y) ** 2).mean() < 0.1 * y.var()

    def test_too_few_rows(self):
        store = make_store(5, lambda f, p: 1.0)
        with pytest.raises(DataError):
            train_meta(store, k_folds=5)


class TestExpansionDecision:
    @pytest.mark.parametrize("pool_size", [3, 10, 15])
    def test_threshold_arithmetic(self, pool_size):
        policy = ExpansionPolicy(0.8, 0.34)
        for matched in range(pool_size + 1):
            expected = "reuse" if matched > 0.34 * pool_size else "create_new"
            assert expansion_decision(matched, pool_size, policy) == expected

    def test_empty_subset_creates(self):
        assert expansion_decision(0, 10, ExpansionPolicy()) == "create_new"


@pytest.fixture(scope="module")
def pool3():
    datasets = [
        normalize(gen_sine(192, 2, seed=0))[0],
        normalize(gen_ar1(192, 2, seed=1))[0],
        normalize(gen_mixed(192, 2, seed=2))[0],
    ]
    return construct_pool(datasets, small_cfg(), hidden=[8], segment_length=16)


class TestMatchModels:
    def test_saturation_reuse(self, pool3):
        ts, _ = normalize(gen_sine(128, 2, seed=5))
        meta = StubMeta({mid: -5.0 for mid in pool3.model_ids()}, pool3)
        subset, decision = match_models(meta, pool3, ts, ExpansionPolicy())
        assert len(subset) == 3 and decision == "reuse"

    def test_no_match_creates(self, pool3):
        ts, _ = normalize(gen_sine(128, 2, seed=5))
        meta = StubMeta({mid: 5.0 for mid in pool3.model_ids()}, pool3)
        subset, decision = match_models(meta, pool3, ts, ExpansionPolicy())
        assert subset == [] and decision == "create_new"

    def test_anti_monotone_match_score(self, pool3):
        ts, _ = normalize(gen_sine(128, 2, seed=5))
        errs = {"m0": -2.0, "m1": 0.0, "m2": 2.0}
        meta = StubMeta(errs, pool3)
        from poolad.meta import match_scores
        feats = extract_features(ts)
        ms = match_scores(meta, pool3, feats)
        assert ms["m0"] > ms["m1"] > ms["m2"]


class TestExpandPool:
    def test_expansion_contracts(self, pool3):
        import copy
        pool = copy.deepcopy(pool3)
        ts, _ = normalize(gen_mixed(192, 2, seed=9))
        store = MetaStore()
        datasets = [
            normalize(gen_sine(192, 2, seed=0))[0],
            normalize(gen_ar1(192, 2, seed=1))[0],
            normalize(gen_mixed(192, 2, seed=2))[0],
        ]
        for i, d in enumerate(datasets):
            append_dataset_rows(store, pool, d, f"ds{i}", "initial")
        pre_thetas = [m.theta.copy() for m in pool.models]
        rows_before = len(store)
        pool_out, meta_out, store_out = expand_pool(
            pool, ts, small_cfg(), None, store, dataset_ref="new")
        assert len(pool_out) == 4
        for pre, m in zip(pre_thetas, pool_out.models[:3]):
            assert np.array_equal(pre.view(np.uint32),
                                  m.theta.view(np.uint32))
        assert len(store_out) == rows_before + len(pool_out)
        assert meta_out.version == 1
        assert pool_out.fingerprints.keys() == set(pool_out.model_ids())


class TestStorePersistence:
    def test_round_trip(self, tmp_path):
        store = make_store(12, lambda f, p: f[0] ** 2)
        path = tmp_path / "store.csv"
        store.save(path)
        back = MetaStore.load(path)
        assert len(back) == len(store)
        for a, b in zip(store.rows, back.rows):
            assert a.dataset_ref == b.dataset_ref
            assert a.model_id == b.model_id and a.tag == b.tag
            assert a.target == b.target
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.fingerprint, b.fingerprint)


class TestMetaModelPersistence:
    def test_round_trip(self, tmp_path):
        store = make_store(40, lambda f, p: abs(f[1]))
        meta = train_meta(store, seed=0)
        meta.save(tmp_path)
        back = MetaModel.load(tmp_path)
        assert np.array_equal(back.theta, meta.theta)
        assert back.version == meta.version
        x = np.concatenate([store.rows[0].features, store.rows[0].fingerprint])
        assert back.predict(x) == pytest.approx(meta.predict(x))
