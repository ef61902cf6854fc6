"""Episode sampling and the training loops (episode-based and conventional batches)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import NonFiniteError, OptimizerState, adam_step, clip_global_norm
from .features import N_CLASSES, Dataset, Trial, VideoRecord, add_noise, center, segment
from .loss import class_weights, wbce_loss  # noqa: F401  (re-exported)
from .metrics import icc, mae, rmse
from .model import PainNet

log = logging.getLogger(__name__)


@dataclass
class Episode:
    query: VideoRecord
    samples: list[VideoRecord]
    label: int
    y: np.ndarray
    fallback: list[bool]

    @property
    def used_fallback(self) -> bool:
        return any(self.fallback)


def by_class(pool) -> list[list[VideoRecord]]:
    groups = [[] for _ in range(N_CLASSES)]
    for r in pool:
        groups[r.vas].append(r)
    return groups


def draw_sample_set(groups, rng: np.random.Generator, exclude=frozenset()):
    """One video per class, uniformly within the class, skipping ``exclude``.

    An empty class borrows from the nearest populated class by label
    distance (ties to the lower label); those slots are flagged.
    """
    eligible = [[r for r in g if r.video_id not in exclude] for g in groups]
    populated = [c for c in range(N_CLASSES) if eligible[c]]
    if not populated:
        raise ValueError("no eligible videos to build a sample set")
    samples, flags = [], []
    for c in range(N_CLASSES):
        src = c
        if not eligible[c]:
            src = min(populated, key=lambda d: (abs(d - c), d))
            log.debug("class %d empty, borrowing from class %d", c, src)
        g = eligible[src]
        samples.append(g[int(rng.integers(len(g)))])
        flags.append(src != c)
    return samples, flags


def sample_episode(pool, rng: np.random.Generator, groups=None) -> Episode:
    if not pool:
        raise ValueError("training pool is empty")
    groups = groups if groups is not None else by_class(pool)
    query = pool[int(rng.integers(len(pool)))]
    samples, flags = draw_sample_set(groups, rng, exclude={query.video_id})
    y = np.zeros(N_CLASSES)
    y[query.vas] = 1.0
    return Episode(query, samples, query.vas, y, flags)


def sample_eval_sets(pool, n_sets: int, rng: np.random.Generator) -> list[list[VideoRecord]]:
    if not pool:
        raise ValueError("training pool is empty")
    groups = by_class(pool)
    return [draw_sample_set(groups, rng)[0] for _ in range(n_sets)]


class VideoBank:
    """Centered frame matrices per video, segmented on demand (optionally noised)."""

    def __init__(self, dataset: Dataset, seg_len: int):
        self.dataset = dataset
        self.seg_len = seg_len
        self._centered = {}

    def centered(self, video_id: str):
        fm = self._centered.get(video_id)
        if fm is None:
            fm = center(self.dataset.frames(video_id))
            self._centered[video_id] = fm
        return fm

    def segments(self, video_id: str, sigma: float = 0.0, rng=None) -> np.ndarray:
        fm = self.centered(video_id)
        if sigma > 0:
            fm = add_noise(fm, sigma, rng)
        return segment(fm, self.seg_len)


# ---------------------------------------------------------------------------
# evaluation used for model selection


def predict_labels(model: PainNet, bank: VideoBank, query_ids, sample_sets):
    """Per-set argmax labels and the median over sets, for each query id.

    Returns ``(final_labels, per_set_labels, probs)`` where ``probs`` has
    shape (n_queries, n_sets, 11).
    """
    set_ids = [[r.video_id for r in s] for s in sample_sets]
    ids = list(dict.fromkeys(list(query_ids) + [v for s in set_ids for v in s]))
    vecs = model.embed([bank.segments(v) for v in ids])
    row = {v: i for i, v in enumerate(ids)}
    probs = np.empty((len(query_ids), len(set_ids), N_CLASSES))
    for qi, q in enumerate(query_ids):
        qv = vecs[row[q]]
        for si, s in enumerate(set_ids):
            probs[qi, si] = model.probs(qv, vecs[[row[v] for v in s]])
    per_set = np.argmax(probs, axis=2)            # first maximum = lowest label
    final = np.median(per_set, axis=1).astype(int)
    return final, per_set, probs


def score(preds, truths) -> dict:
    val_icc = icc(preds, truths)
    return {"icc": val_icc, "mae": mae(preds, truths), "rmse": rmse(preds, truths)}


def selection_key(metrics: dict, episode: int):
    """Lower is better: MAE, then higher ICC, then the earlier episode."""
    c = metrics["icc"]
    return (metrics["mae"], -(c if not math.isnan(c) else -math.inf), episode)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PainNet
    best: dict
    state: OptimizerState
    best_episode: int
    best_metrics: dict
    log: list[dict] = field(default_factory=list)
    updates: int = 0
    evaluations: int = 0
    batch_size: int | None = None

    def log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def _json_float(x):
    return None if (x is None or math.isnan(x)) else float(x)


def trial_streams(seed: int, trial_index: int):
    """Independent generators for init, training draws, validation sets and test sets."""
    ss = np.random.SeedSequence([seed, trial_index])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


class _Trainer:
    def __init__(self, config, dataset: Dataset, trial: Trial, trial_index: int):
        self.config = config
        self.dataset = dataset
        self.trial = trial
        init_rng, self.rng, val_rng, _ = trial_streams(config["seed"], trial_index)
        self.model = PainNet(config, len(dataset.au_names), init_rng)
        self.state = OptimizerState.fresh(self.model.params)
        self.bank = VideoBank(dataset, config["segment.length"])
        self.pool = [dataset[v] for v in trial.train]
        self.groups = by_class(self.pool)
        self.val_ids = list(trial.validation)
        self.val_truth = [dataset[v].vas for v in self.val_ids]
        self.val_sets = sample_eval_sets(self.pool, config["eval.sample_sets"], val_rng)
        self.weighted = config["train.loss"] == "wbce"
        self.log: list[dict] = []
        self.updates = 0
        self.evaluations = 0
        self.best = None

    def noisy(self, video_id):
        return self.bank.segments(video_id, self.config["train.noise_sigma"], self.rng)

    def step(self, scale: float = 1.0):
        params = self.model.params
        if scale != 1.0:
            for p in params.trainable():
                p.grad *= scale
        clip_global_norm(params.trainable(), self.config["train.clip"])
        adam_step(params, self.state, self.config["train.lr"], self.config["adam.beta1"],
                  self.config["adam.beta2"], self.config["adam.eps"])
        params.zero_grad()
        self.updates += 1

    def validate(self, episode: int) -> dict:
        preds, _, _ = predict_labels(self.model, self.bank, self.val_ids, self.val_sets)
        m = score(preds, self.val_truth)
        self.evaluations += 1
        key = selection_key(m, episode)
        if self.best is None or key < self.best[0]:
            self.best = (key, episode, dict(m), self.model.params.snapshot(),
                         OptimizerState({k: v.copy() for k, v in self.state.m.items()},
                                        {k: v.copy() for k, v in self.state.v.items()},
                                        self.state.t))
        return m

    def record(self, episode: int, loss: float, metrics: dict | None):
        rec = {"episode": episode, "loss": float(loss)}
        if metrics is not None:
            rec.update(val_icc=_json_float(metrics["icc"]), val_mae=metrics["mae"],
                       val_rmse=metrics["rmse"])
        self.log.append(rec)

    def result(self, batch_size=None) -> TrainResult:
        if self.best is None:
            self.validate(0)
        _, ep, metrics, snap, state = self.best
        self.model.params.restore(snap)
        return TrainResult(self.model, snap, state, ep, metrics, self.log,
                           self.updates, self.evaluations, batch_size)


def train_episodes(config, dataset: Dataset, trial: Trial, trial_index: int = 0) -> TrainResult:
    """Episode-based training; returns the model restored to its best validation state."""
    tr = _Trainer(config, dataset, trial, trial_index)
    acc = config["train.accumulate_every"]
    pending = []
    for ep in range(1, config["train.episodes"] + 1):
        e = sample_episode(tr.pool, tr.rng, tr.groups)
        videos = [tr.noisy(e.query.video_id)] + [tr.noisy(s.video_id) for s in e.samples]
        loss = tr.model.train_step(videos, [(0, np.arange(1, 12), e.label)], tr.rng,
                                   tr.weighted)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at episode {ep}")
        pending.append(loss)
        metrics = None
        if ep % acc == 0:
            tr.step(1.0 / acc)
        if ep % config["train.eval_every"] == 0:
            metrics = tr.validate(ep)
        if ep % acc == 0:
            tr.record(ep, float(np.mean(pending)), metrics)
            pending = []
        elif metrics is not None:
            tr.record(ep, float(np.mean(pending)), metrics)
    return tr.result()


def _train_batch_once(config, dataset, trial, trial_index, batch_size) -> TrainResult:
    tr = _Trainer(config, dataset, trial, trial_index)
    total = config["train.episodes"]
    every = config["train.eval_every"]
    seen = 0
    order = []
    while seen < total:
        if len(order) < batch_size:
            order += [tr.pool[i] for i in tr.rng.permutation(len(tr.pool))]
        bs = min(batch_size, total - seen)
        batch, order = order[:bs], order[bs:]
        samples, _ = draw_sample_set(tr.groups, tr.rng, exclude={r.video_id for r in batch})
        videos = [tr.noisy(r.video_id) for r in batch] + [tr.noisy(s.video_id) for s in samples]
        sidx = np.arange(bs, bs + N_CLASSES)
        loss = tr.model.train_step(videos, [(i, sidx, r.vas) for i, r in enumerate(batch)],
                                   tr.rng, tr.weighted)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss after {seen} queries")
        tr.step()
        before, seen = seen, seen + bs
        metrics = tr.validate(seen) if seen // every > before // every else None
        tr.record(seen, loss, metrics)
    return tr.result(batch_size)


def train_batch_mode(config, dataset: Dataset, trial: Trial, trial_index: int = 0) -> TrainResult:
    """Conventional batch training over the same query budget as the episode run.

    Each batch draws ``batch_size`` queries without replacement (epoch-wise)
    and compares them with one fresh sample set; one update per batch. With
    ``train.batch_size_candidates`` set, each size is trained and the one with
    the best validation result is kept.
    """
    candidates = config["train.batch_size_candidates"] or (config["train.batch_size"],)
    best = None
    for bs in candidates:
        res = _train_batch_once(config, dataset, trial, trial_index, bs)
        key = selection_key(res.best_metrics, res.best_episode)
        if best is None or key < best[0]:
            best = (key, res)
    return best[1]


def train(config, dataset: Dataset, trial: Trial, trial_index: int = 0) -> TrainResult:
    if config["train.mode"] == "batch":
        return train_batch_mode(config, dataset, trial, trial_index)
    return train_episodes(config, dataset, trial, trial_index)
