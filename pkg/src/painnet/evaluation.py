"""Inference protocol, cross-validation and report emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import save_checkpoint
from .episodic import (TrainResult, VideoBank, predict_labels, sample_eval_sets, train,
                       trial_streams)
from .features import Dataset, FoldSplit, make_folds
from .metrics import icc, mae, mae_per_intensity, majority_label, rmse

ICC_VARIANT = "icc_3_1"


@dataclass
class Prediction:
    video_id: str
    set_labels: list[int]
    label: int
    probs: np.ndarray


def predict(query_vec: np.ndarray, sample_sets_vecs, model) -> tuple[int, list[int], np.ndarray]:
    """Median over sample sets of the per-set argmax label (ties -> lower label)."""
    probs = np.stack([model.probs(query_vec, s) for s in sample_sets_vecs])
    labels = np.argmax(probs, axis=1)
    return int(np.median(labels)), [int(x) for x in labels], probs


def predict_videos(model, bank: VideoBank, query_ids, sample_sets) -> list[Prediction]:
    final, per_set, probs = predict_labels(model, bank, list(query_ids), sample_sets)
    return [Prediction(v, [int(x) for x in per_set[i]], int(final[i]), probs[i])
            for i, v in enumerate(query_ids)]


def _nan_to_none(x):
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_nan_to_none(v) for v in x]
    x = float(x)
    return None if math.isnan(x) else x


@dataclass
class FoldMetrics:
    fold: int
    n_test: int
    icc: float
    mae: float
    rmse: float
    mae_per_intensity: list
    mae_per_intensity_macro: float
    baseline_label: int
    baseline_mae: float
    best_episode: int
    val_icc: float
    val_mae: float


@dataclass
class MetricReport:
    folds: list[FoldMetrics]
    predictions: list[tuple[int, str, int, int, list[int]]] = field(default_factory=list)
    icc_variant: str = ICC_VARIANT
    train_logs: list[dict] = field(default_factory=list, repr=False)

    def _mean(self, name):
        vals = [getattr(f, name) for f in self.folds]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean(self) -> dict:
        return {k: self._mean(k) for k in ("icc", "mae", "rmse", "mae_per_intensity_macro",
                                           "baseline_mae")}

    @property
    def pooled(self) -> dict:
        truth = [p[2] for p in self.predictions]
        pred = [p[3] for p in self.predictions]
        per, macro = mae_per_intensity(pred, truth)
        return {"icc": icc(pred, truth), "mae": mae(pred, truth), "rmse": rmse(pred, truth),
                "mae_per_intensity": per, "mae_per_intensity_macro": macro}

    def records(self) -> list[dict]:
        out = [{"record": "header", "icc_variant": self.icc_variant, "folds": len(self.folds)}]
        for f in self.folds:
            rec = {"record": "fold"}
            rec.update({k: _nan_to_none(v) if isinstance(v, (float, list)) else v
                        for k, v in asdict(f).items()})
            out.append(rec)
        summary = {"record": "summary"}
        summary.update({f"mean_{k}": _nan_to_none(v) for k, v in self.mean.items()})
        summary.update({f"pooled_{k}": _nan_to_none(v) for k, v in self.pooled.items()})
        out.append(summary)
        return out


def evaluate_trial(res: TrainResult, dataset: Dataset, trial, trial_index: int,
                   n_sets: int, seed: int):
    """Test-fold predictions for a trained trial: sample sets come from its training pool."""
    pool = [dataset[v] for v in trial.train]
    test_rng = trial_streams(seed, trial_index)[3]
    sets = sample_eval_sets(pool, n_sets, test_rng)
    bank = VideoBank(dataset, res.model.config["segment.length"])
    preds = predict_videos(res.model, bank, trial.test, sets)
    truth = [dataset[v].vas for v in trial.test]
    labels = [p.label for p in preds]
    per, macro = mae_per_intensity(labels, truth)
    base = majority_label([r.vas for r in pool])
    fm = FoldMetrics(
        fold=trial_index, n_test=len(truth),
        icc=icc(labels, truth) if len(truth) > 1 else math.nan,
        mae=mae(labels, truth), rmse=rmse(labels, truth),
        mae_per_intensity=[float(x) for x in per], mae_per_intensity_macro=macro,
        baseline_label=base, baseline_mae=mae([base] * len(truth), truth),
        best_episode=res.best_episode,
        val_icc=res.best_metrics["icc"], val_mae=res.best_metrics["mae"],
    )
    rows = [(trial_index, p.video_id, t, p.label, p.set_labels) for p, t in zip(preds, truth)]
    return fm, rows


def checkpoint_meta(config, trial, trial_index: int, res: TrainResult) -> dict[str, str]:
    meta = {f"config.{k}": v for k, v in config.as_meta().items()}
    meta["run.trial"] = str(trial_index)
    meta["run.best_episode"] = str(res.best_episode)
    meta["run.train_ids"] = ",".join(trial.train)
    if res.batch_size is not None:
        meta["run.batch_size"] = str(res.batch_size)
    return meta


def cross_validate(config, dataset: Dataset, out_dir=None, split: FoldSplit | None = None,
                   trials=None) -> MetricReport:
    """Train and test every trial of a subject-wise k-fold split.

    With ``out_dir`` the training log, best checkpoints and report files are
    written there. ``trials`` restricts the run to a subset of trial indices.
    """
    if split is None:
        split = make_folds(dataset, config["folds.k"], config["folds.val_count"],
                           np.random.default_rng(config["seed"]))
    indices = range(len(split.trials)) if trials is None else trials
    folds, rows, logs = [], [], []
    for ti in indices:
        trial = split.trials[ti]
        res = train(config, dataset, trial, ti)
        fm, r = evaluate_trial(res, dataset, trial, ti, config["eval.sample_sets"],
                               config["seed"])
        folds.append(fm)
        rows += r
        logs += [dict(rec, fold=ti) for rec in res.log]
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "ckpt" / f"fold{ti}.ckpt", res.model.params,
                            res.state, checkpoint_meta(config, trial, ti, res))
    report = MetricReport(folds, rows, train_logs=logs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.log").write_text(
            "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in logs), encoding="utf-8")
        write_report(report, out / "report")
    return report


def write_report(report: MetricReport, report_dir) -> Path:
    from .plots import plot_mae_per_intensity

    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    per = report.pooled["mae_per_intensity"]
    with (d / "mae_per_intensity.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["intensity", "mae"])
        for level, v in enumerate(per):
            w.writerow([level, "" if math.isnan(v) else repr(float(v))])
    with (d / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "video_id", "vas", "predicted", "set_labels"])
        for fold, vid, truth, pred, sets in report.predictions:
            w.writerow([fold, vid, truth, pred, " ".join(str(s) for s in sets)])
    plot_mae_per_intensity(per, d / "mae_per_intensity.png",
                           macro=report.pooled["mae_per_intensity_macro"])
    return d
