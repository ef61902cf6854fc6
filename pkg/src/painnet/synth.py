"""Synthetic AU datasets with a plantable, label-dependent pain signal."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import AU_NAMES, N_CLASSES, Dataset, VideoRecord, write_manifest

PAIN_AUS = ("AU4", "AU6", "AU7", "AU9", "AU10", "AU43")
DISTRACTOR_AUS = ("AU1", "AU2", "AU12", "AU25", "AU26")


@dataclass
class SynthSpec:
    subjects: int = 25
    videos_per_class: int = 12
    min_frames: int = 64
    max_frames: int = 192
    signal_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.subjects < 1 or self.videos_per_class < 1:
            raise ValueError("subjects and videos_per_class must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")


def _bump(T: int, centre: float, width: float) -> np.ndarray:
    t = np.arange(T)
    return np.exp(-0.5 * ((t - centre) / (width / 2.5)) ** 2)


def _video(T: int, vas: int, baseline: np.ndarray, gain: float, spec: SynthSpec,
           rng: np.random.Generator) -> np.ndarray:
    A = len(AU_NAMES)
    x = np.empty((T, A))
    # AR(1) background around the subject's resting levels
    noise = rng.normal(0.0, 0.03, (T, A))
    x[0] = noise[0] / np.sqrt(1 - 0.8 ** 2)
    for t in range(1, T):
        x[t] = 0.8 * x[t - 1] + noise[t]
    x += baseline

    col = {name: i for i, name in enumerate(AU_NAMES)}
    for name in DISTRACTOR_AUS:
        for _ in range(rng.poisson(T / 64)):
            x[:, col[name]] += rng.uniform(0.1, 0.5) * _bump(T, rng.uniform(0, T),
                                                            rng.uniform(6, 20))

    s = spec.signal_strength
    n_bursts = int(round(s * (vas / 10.0) * T / 32.0))
    amplitude = s * (0.15 + 0.05 * vas) * gain
    pain_cols = [col[name] for name in PAIN_AUS]
    for _ in range(n_bursts):
        shape = _bump(T, rng.uniform(0, T), rng.uniform(6, 16))
        gains = rng.uniform(0.6, 1.0, len(pain_cols))
        x[:, pain_cols] += amplitude * shape[:, None] * gains
    return np.clip(x, 0.0, 1.0)


def _deal(n_videos: int, n_subjects: int, rng: np.random.Generator) -> np.ndarray:
    """Owner of each label-sorted video: serpentine passes over shuffled subjects.

    Alternating the pass direction keeps every subject's label mix close to
    the overall mix, so subject traits are not confounded with pain level.
    """
    subjects = rng.permutation(n_subjects)
    owner = np.empty(n_videos, dtype=int)
    for k in range(n_videos):
        pass_no, pos = divmod(k, n_subjects)
        owner[k] = subjects[pos if pass_no % 2 == 0 else n_subjects - 1 - pos]
    return owner


def synth_generate(spec: SynthSpec, out_dir, rng: np.random.Generator | None = None) -> Dataset:
    """Write ``manifest.csv`` and ``features/*.csv`` under ``out_dir``.

    Every VAS level 0..10 gets ``spec.videos_per_class`` videos, dealt to
    subjects so each subject sees a balanced spread of levels. Pain AUs receive bursts whose
    count and amplitude grow with the label; with ``signal_strength`` 0 the
    features carry no label information.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    out = Path(out_dir)
    try:
        (out / "features").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out}: {exc}") from exc

    A = len(AU_NAMES)
    baselines = rng.uniform(0.05, 0.35, (spec.subjects, A))
    gains = rng.uniform(0.7, 1.3, spec.subjects)
    n_videos = N_CLASSES * spec.videos_per_class
    owner = _deal(n_videos, spec.subjects, rng)
    width = len(str(spec.subjects))

    records = []
    for i in range(n_videos):
        vas = i // spec.videos_per_class
        subj = int(owner[i])
        T = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        x = _video(T, vas, baselines[subj], gains[subj], spec, rng)
        vid = f"v{i:04d}"
        fpath = out / "features" / f"{vid}.csv"
        with fpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AU_NAMES)
            w.writerows([[f"{v:.6f}" for v in row] for row in x])
        records.append(VideoRecord(vid, f"s{subj:0{width}d}", vas, fpath))

    write_manifest(out / "manifest.csv", records)
    return Dataset(records, AU_NAMES)
