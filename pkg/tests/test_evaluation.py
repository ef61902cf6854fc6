import json

import numpy as np
import pytest

from painnet.config import Config
from painnet.evaluation import ICC_VARIANT, cross_validate, predict

FAST = {"train.episodes": 40, "train.eval_every": 20, "gru.hidden": 4,
        "folds.val_count": 5, "segment.length": 8}


class StubModel:
    """Each "sample set" vector is just the label it should produce."""

    def probs(self, query_vec, label):
        p = np.full(11, 0.05)
        if label is not None:
            p[label] = 0.5
        return p / p.sum()


def test_median_of_set_labels():
    label, per_set, probs = predict(None, [3, 3, 4, 5, 3], StubModel())
    assert label == 3 and per_set == [3, 3, 4, 5, 3] and probs.shape == (5, 11)


def test_single_set():
    assert predict(None, [7], StubModel())[0] == 7


def test_all_equal_scores_predict_zero():
    assert predict(None, [None], StubModel())[0] == 0


@pytest.fixture(scope="module")
def cv_run(small_data, tmp_path_factory):
    ds, _ = small_data
    out = tmp_path_factory.mktemp("cv")
    return cross_validate(Config(FAST), ds, out), out


def test_report_structure(cv_run):
    report, out = cv_run
    assert len(report.folds) == 5
    lines = [json.loads(x) for x in (out / "report" / "metrics.jsonl").read_text().splitlines()]
    assert lines[0] == {"record": "header", "icc_variant": ICC_VARIANT, "folds": 5}
    assert [r["record"] for r in lines[1:]] == ["fold"] * 5 + ["summary"]
    assert {"mean_icc", "mean_mae", "pooled_icc", "pooled_mae_per_intensity"} <= set(lines[-1])
    csv_lines = (out / "report" / "mae_per_intensity.csv").read_text().splitlines()
    assert csv_lines[0] == "intensity,mae" and len(csv_lines) == 12
    png = (out / "report" / "mae_per_intensity.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert sorted(p.name for p in (out / "ckpt").iterdir()) == [f"fold{i}.ckpt" for i in range(5)]
    log = [json.loads(x) for x in (out / "train.log").read_text().splitlines()]
    assert {r["fold"] for r in log} == set(range(5))


def test_every_video_tested_once(cv_run, small_data):
    report, _ = cv_run
    ds, _ = small_data
    ids = [row[1] for row in report.predictions]
    assert sorted(ids) == sorted(r.video_id for r in ds.records)
    assert all(0 <= row[3] <= 10 for row in report.predictions)


def test_mean_is_fold_average(cv_run):
    report, _ = cv_run
    assert report.mean["mae"] == pytest.approx(np.mean([f.mae for f in report.folds]))


def test_trial_subset(small_data):
    ds, _ = small_data
    rep = cross_validate(Config(FAST), ds, trials=[2])
    assert [f.fold for f in rep.folds] == [2]
