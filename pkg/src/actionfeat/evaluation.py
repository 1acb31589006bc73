"""Video-consistent splits, confusion matrices and per-video voting."""

from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .dataio import DatasetManifest
from .errors import ConfigError, ShapeError


@dataclass
class SplitResult:
    train: DatasetManifest
    test: DatasetManifest
    seed: int


def n_test_videos(n_videos, test_fraction):
    """``round(fraction * n)`` with halves rounded up, at least one."""
    return max(1, int(np.floor(test_fraction * n_videos + 0.5)))


def split_by_video(manifest, test_fraction, seed):
    """Per-class split that keeps every video's frames on one side.

    Within each class the distinct video ids (sorted, then shuffled by a
    generator seeded from ``seed``) are cut so ``n_test_videos`` of them
    go to the test set.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    videos = defaultdict(set)
    for s in manifest.samples:
        if not s.video_id:
            raise ConfigError(f"sample {s.image_path!r} has no video id")
        videos[s.label].add(s.video_id)
    owners = defaultdict(set)
    for label, vids in videos.items():
        for v in vids:
            owners[v].add(label)
    shared = [v for v, labels in owners.items() if len(labels) > 1]
    if shared:
        raise ConfigError(f"video ids span several classes: {sorted(shared)[:5]}")

    rng = np.random.default_rng(seed)
    test_videos = set()
    for label in manifest.classes:
        vids = sorted(videos.get(label, ()))
        if len(vids) < 2:
            raise ConfigError(f"class {label!r} has {len(vids)} video(s); need at least 2")
        order = rng.permutation(len(vids))
        k = n_test_videos(len(vids), test_fraction)
        test_videos.update(vids[i] for i in order[:k])

    train = [s for s in manifest.samples if s.video_id not in test_videos]
    test = [s for s in manifest.samples if s.video_id in test_videos]
    return SplitResult(DatasetManifest(train, list(manifest.classes), manifest.root),
                       DatasetManifest(test, list(manifest.classes), manifest.root),
                       seed)


def video_counts(manifest):
    """``{class: number of distinct videos}``."""
    vids = defaultdict(set)
    for s in manifest.samples:
        vids[s.label].add(s.video_id)
    return {c: len(vids[c]) for c in manifest.classes}


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns are predictions."""

    classes: list
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.classes)
        if self.counts.shape != (n, n):
            raise ShapeError(f"confusion counts must be {n}x{n}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def trace(self):
        return int(np.trace(self.counts))

    def to_tsv(self):
        lines = ["\t" + "\t".join(self.classes)]
        for name, row in zip(self.classes, self.counts):
            lines.append(name + "\t" + "\t".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        rows = [line.split("\t") for line in text.splitlines() if line.strip()]
        classes = rows[0][1:]
        counts = [[int(v) for v in r[1:]] for r in rows[1:]]
        if [r[0] for r in rows[1:]] != classes:
            raise ValueError("row labels must match the column header")
        return cls(classes, np.array(counts))


def confusion(preds, truth, classes):
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ShapeError(f"{len(preds)} predictions for {len(truth)} labels")
    n = len(classes)
    for arr in (preds, truth):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ConfigError(f"label index out of range for {n} classes")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(list(classes), counts)


def accuracy(m):
    if m.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return m.trace / m.total


def majority_vote(frame_preds):
    """``{video_id: modal frame label}``; ties go to the lower label index."""
    frame_preds = list(frame_preds)
    if not frame_preds:
        raise ValueError("no frame predictions")
    per_video = defaultdict(Counter)
    for vid, label in frame_preds:
        per_video[vid][int(label)] += 1
    return {vid: min(c, key=lambda l: (-c[l], l)) for vid, c in per_video.items()}


def video_accuracy(votes, truth):
    if set(votes) != set(truth):
        raise ConfigError("voted videos and truth videos differ")
    if not votes:
        raise ValueError("no videos")
    return sum(votes[v] == truth[v] for v in votes) / len(votes)
