import numpy as np
import pytest

import oracles
from painnet.config import Config
from painnet.episodic import (VideoBank, by_class, draw_sample_set, predict_labels,
                              sample_episode, sample_eval_sets, selection_key, train,
                              train_episodes)
from painnet.features import make_folds
from painnet.model import PainNet

FAST = {"train.episodes": 40, "train.eval_every": 20, "gru.hidden": 4,
        "folds.val_count": 5, "segment.length": 8}


def test_full_pool_episode(fake_pool, rng):
    pool = fake_pool([3] * 11)
    for _ in range(200):
        e = sample_episode(pool, rng)
        assert [s.vas for s in e.samples] == list(range(11))
        assert e.query.video_id not in {s.video_id for s in e.samples}
        assert e.y.sum() == 1 and e.y[e.label] == 1 and not e.used_fallback


def test_empty_class_borrows_lower_neighbour(fake_pool, rng):
    pool = fake_pool([2] * 9 + [0, 2])
    samples, flags = draw_sample_set(by_class(pool), rng)
    assert samples[9].vas == 8 and flags[9] and sum(flags) == 1


def test_singleton_class_with_query_excluded(fake_pool):
    pool = fake_pool([1] + [2] * 10)
    rng = np.random.default_rng(0)
    for _ in range(50):
        e = sample_episode(pool, rng)
        if e.label == 0:
            assert e.fallback[0] and e.samples[0].vas == 1


def test_query_distribution_uniform(fake_pool):
    pool = fake_pool([4] * 11)
    rng = np.random.default_rng(5)
    counts = np.zeros(len(pool))
    idx = {r.video_id: i for i, r in enumerate(pool)}
    n = 10_000
    for _ in range(n):
        counts[idx[sample_episode(pool, rng).query.video_id]] += 1
    p = 1 / len(pool)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_eval_sets(fake_pool):
    pool = fake_pool([1] + [3] * 10)
    sets = sample_eval_sets(pool, 5, np.random.default_rng(2))
    assert len(sets) == 5 and all(len(s) == 11 for s in sets)
    assert len({s[0].video_id for s in sets}) == 1
    again = sample_eval_sets(pool, 5, np.random.default_rng(2))
    assert [[r.video_id for r in s] for s in sets] == [[r.video_id for r in s] for s in again]


def test_empty_pool():
    with pytest.raises(ValueError):
        sample_episode([], np.random.default_rng(0))


def test_selection_key_order():
    nan = float("nan")
    a = selection_key({"mae": 1.0, "icc": 0.5}, 100)
    b = selection_key({"mae": 1.0, "icc": 0.7}, 200)
    c = selection_key({"mae": 1.0, "icc": nan}, 50)
    d = selection_key({"mae": 0.9, "icc": nan}, 300)
    assert sorted([a, b, c, d]) == [d, b, a, c]
    assert selection_key({"mae": 1, "icc": 0.5}, 10) < selection_key({"mae": 1, "icc": 0.5}, 20)


def _setup(small_data, **over):
    ds, _ = small_data
    cfg = Config({**FAST, **over})
    split = make_folds(ds, 5, cfg["folds.val_count"], np.random.default_rng(0))
    return cfg, ds, split.trials[0]


def test_default_schedule_counts(small_data, monkeypatch):
    monkeypatch.setattr(PainNet, "train_step", lambda self, *a, **k: 1.0)
    ds, _ = small_data
    cfg = Config({"gru.hidden": 4, "folds.val_count": 5, "segment.length": 8})
    split = make_folds(ds, 5, 5, np.random.default_rng(0))
    res = train_episodes(cfg, ds, split.trials[0])
    assert res.updates == 300 and res.evaluations == 30
    assert len(res.log) == 300 and sum("val_mae" in r for r in res.log) == 30


def test_batch_mode_step_per_batch(small_data, monkeypatch):
    monkeypatch.setattr(PainNet, "train_step", lambda self, *a, **k: 1.0)
    cfg, ds, trial = _setup(small_data, **{"train.mode": "batch", "train.batch_size": 5,
                                           "train.episodes": 50, "train.eval_every": 25})
    res = train(cfg, ds, trial)
    assert res.updates == 10 and res.evaluations == 2 and res.batch_size == 5


def test_batch_candidates(small_data, monkeypatch):
    monkeypatch.setattr(PainNet, "train_step", lambda self, *a, **k: 1.0)
    cfg, ds, trial = _setup(small_data, **{"train.mode": "batch",
                                           "train.batch_size_candidates": "4,8"})
    assert train(cfg, ds, trial).batch_size in (4, 8)


@pytest.mark.parametrize("mode", ["episode", "batch"])
def test_training_replay_bitwise(small_data, mode):
    cfg, ds, trial = _setup(small_data, **{"train.mode": mode})
    a = train(cfg, ds, trial, 1)
    b = train(cfg, ds, trial, 1)
    assert a.log_lines() == b.log_lines()
    for name in a.best:
        assert a.best[name].tobytes() == b.best[name].tobytes()


def test_best_restored(small_data):
    cfg, ds, trial = _setup(small_data)
    res = train(cfg, ds, trial)
    assert res.best_episode in (20, 40)
    for p in res.model.params:
        assert p.values.tobytes() == res.best[p.name].tobytes()


def test_accumulation_equals_mean_gradient(small_data):
    ds, _ = small_data
    cfg = Config(FAST)
    model = PainNet(cfg, 20, np.random.default_rng(0))
    bank = VideoBank(ds, 8)
    pool = list(ds.records)
    rng = np.random.default_rng(1)
    episodes = [sample_episode(pool, rng) for _ in range(5)]

    def run(ep, seed):
        vids = [bank.segments(ep.query.video_id)] + [bank.segments(s.video_id)
                                                     for s in ep.samples]
        model.train_step(vids, [(0, np.arange(1, 12), ep.label)], np.random.default_rng(seed))

    separate = []
    for i, ep in enumerate(episodes):
        model.params.zero_grad()
        run(ep, i)
        separate.append({p.name: p.grad.copy() for p in model.params.trainable()})
    model.params.zero_grad()
    for i, ep in enumerate(episodes):
        run(ep, i)
    for p in model.params.trainable():
        mean = sum(g[p.name] for g in separate) / 5
        np.testing.assert_allclose(p.grad / 5, mean, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("variant,summ", [("euccos", "stats"), ("submultnn", "stacked_gru")])
def test_model_gradient_end_to_end(variant, summ):
    cfg = Config({"gru.hidden": 3, "gru2.hidden": 3, "relation.comparison": variant,
                  "embedding.summarizer": summ})
    model = PainNet(cfg, 4, np.random.default_rng(1))
    noise = np.random.default_rng(9)
    for p in model.params.trainable():
        p.values += noise.normal(0, 0.1, p.shape)
    rng = np.random.default_rng(0)
    videos = [rng.normal(size=(int(rng.integers(2, 5)), 5, 4)) for _ in range(12)]
    q = [(0, np.arange(1, 12), 4)]

    def loss():
        return model.train_step(videos, q, np.random.default_rng(5))

    model.params.zero_grad()
    loss()
    grads = {p.name: p.grad.copy() for p in model.params.trainable()}
    for p in model.params.trainable():
        flat = p.values.reshape(-1)
        for i in range(0, flat.size, 3):
            o = flat[i]
            flat[i] = o + 1e-5
            fp = loss()
            flat[i] = o - 1e-5
            fm = loss()
            flat[i] = o
            assert oracles.grad_close(grads[p.name].reshape(-1)[i], (fp - fm) / 2e-5), p.name
    model.params.zero_grad()


def test_predict_labels_protocol(small_data):
    ds, _ = small_data
    model = PainNet(Config(FAST), 20, np.random.default_rng(0))
    pool = list(ds.records)
    sets = sample_eval_sets(pool, 3, np.random.default_rng(0))
    ids = [r.video_id for r in pool[:6]]
    final, per_set, probs = predict_labels(model, VideoBank(ds, 8), ids, sets)
    assert probs.shape == (6, 3, 11)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0)
    assert np.all(per_set.min(axis=1) <= final) and np.all(final <= per_set.max(axis=1))
    np.testing.assert_array_equal(per_set, probs.argmax(axis=2))
