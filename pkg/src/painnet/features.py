"""AU feature ingestion and preprocessing: manifests, centering, segments, folds."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AU_NAMES = ("AU1", "AU2", "AU4", "AU5", "AU6", "AU7", "AU9", "AU10", "AU12", "AU14",
            "AU15", "AU17", "AU18", "AU20", "AU24", "AU25", "AU26", "AU28", "AU43", "Smirk")
MANIFEST_HEADER = ("video_id", "subject_id", "vas", "feature_path")
N_CLASSES = 11


class ManifestError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


class VideoTooShortError(ValueError):
    pass


@dataclass
class FrameMatrix:
    values: np.ndarray
    au_names: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.au_names = tuple(self.au_names)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"frame matrix must be T x A with T, A >= 1, got {self.values.shape}")
        if self.values.shape[1] != len(self.au_names):
            raise ValueError("column count does not match au_names")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    subject_id: str
    vas: int
    feature_path: Path


@dataclass
class Dataset:
    """Manifest-level collection; feature files load lazily and are cached."""

    records: list[VideoRecord]
    au_names: tuple[str, ...] = AU_NAMES
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.au_names = tuple(self.au_names)
        self._by_id = {r.video_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._by_id

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def with_columns(self, au_names) -> "Dataset":
        return Dataset(list(self.records), tuple(au_names))

    def frames(self, video_id: str) -> FrameMatrix:
        fm = self._cache.get(video_id)
        if fm is None:
            with self._lock:
                fm = self._cache.get(video_id)
                if fm is None:
                    fm = load_video_features(self._by_id[video_id].feature_path, self.au_names)
                    self._cache[video_id] = fm
        return fm


def load_manifest(path, au_names=AU_NAMES) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records, seen = [], set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"row {lineno}: expected 4 fields, got {len(row)}")
            vid, subj, vas, fpath = (c.strip() for c in row)
            try:
                vas_i = int(vas)
            except ValueError:
                raise ManifestError(f"row {lineno}: vas {vas!r} is not an integer") from None
            if not 0 <= vas_i <= 10:
                raise ManifestError(f"row {lineno}: vas {vas_i} outside [0, 10]")
            if vid in seen:
                raise ManifestError(f"row {lineno}: duplicate video_id {vid!r}")
            seen.add(vid)
            fp = Path(fpath)
            if not fp.is_absolute():
                fp = path.parent / fp
            records.append(VideoRecord(vid, subj, vas_i, fp))
    if not records:
        raise ManifestError("empty dataset")
    return Dataset(records, tuple(au_names))


def write_manifest(path, records) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            fp = r.feature_path
            try:
                fp = Path(fp).relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([r.video_id, r.subject_id, r.vas, fp.as_posix()])


def load_video_features(path, au_columns=AU_NAMES) -> FrameMatrix:
    """Read a per-frame AU csv, keeping ``au_columns`` in the requested order."""
    path = Path(path)
    if not path.is_file():
        raise FeatureFileError(f"feature file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        index = {name: i for i, name in enumerate(header)}
        missing = [c for c in au_columns if c not in index]
        if missing:
            raise FeatureFileError(f"unknown column {missing[0]!r} in {path.name}")
        cols = [index[c] for c in au_columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in cols])
            except (ValueError, IndexError):
                raise FeatureFileError(f"{path.name} line {lineno}: non-numeric cell") from None
    if not rows:
        raise FeatureFileError(f"{path.name}: no frames")
    values = np.array(rows)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise FeatureFileError(f"{path.name}: value outside [0, 1]")
    return FrameMatrix(values, tuple(au_columns))


def center(fm: FrameMatrix) -> FrameMatrix:
    """Subtract each AU's per-video mean."""
    return FrameMatrix(fm.values - fm.values.mean(axis=0), fm.au_names)


def segment(fm: FrameMatrix, seg_len: int = 16) -> np.ndarray:
    """Non-overlapping segments from frame 0; the trailing partial segment is dropped.

    Returns an (M, seg_len, A) array.
    """
    if seg_len < 1:
        raise ValueError("seg_len must be positive")
    M = fm.n_frames // seg_len
    if M == 0:
        raise VideoTooShortError(
            f"video too short: {fm.n_frames} frames < segment length {seg_len}")
    return fm.values[:M * seg_len].reshape(M, seg_len, -1).copy()


def add_noise(fm: FrameMatrix, sigma: float, rng: np.random.Generator) -> FrameMatrix:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return FrameMatrix(fm.values.copy(), fm.au_names)
    return FrameMatrix(fm.values + rng.normal(0.0, sigma, fm.values.shape), fm.au_names)


@dataclass
class Trial:
    train: list[str]
    validation: list[str]
    test: list[str]


@dataclass
class FoldSplit:
    folds: list[list[str]]
    trials: list[Trial]


def make_folds(ds: Dataset, k: int = 5, val_count: int = 10,
               rng: np.random.Generator | None = None) -> FoldSplit:
    """Subject-wise k-fold split with a video-wise validation draw per trial."""
    rng = rng if rng is not None else np.random.default_rng(0)
    subjects = ds.subjects()
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    folds = [sorted(shuffled[i::k]) for i in range(k)]
    trials = []
    for fold in folds:
        members = set(fold)
        test = [r.video_id for r in ds.records if r.subject_id in members]
        pool = [r.video_id for r in ds.records if r.subject_id not in members]
        if val_count >= len(pool):
            raise ValueError(f"val_count {val_count} leaves no training videos "
                             f"(pool has {len(pool)})")
        picked = set(rng.choice(len(pool), size=val_count, replace=False).tolist())
        validation = [v for i, v in enumerate(pool) if i in picked]
        train = [v for i, v in enumerate(pool) if i not in picked]
        trials.append(Trial(train, validation, test))
    return FoldSplit(folds, trials)
