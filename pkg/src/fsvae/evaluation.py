"""Disentanglement scoring and transfer probes over frozen encodings.

The disentanglement score splits the feature columns into a candidate
static set and a candidate temporal set, trains a linear probe per
(set, task) pair, and combines the four held-out accuracies into

    score = sqrt( (acc_s->ys / acc_s->yt) * (acc_t->yt / acc_t->ys) )

For the factored model the split is its architectural factor boundary;
benchmarks get the maximum over every two-set assignment of the columns.
All probes are L2-regularized linear SVMs trained by minibatch subgradient
descent with identical hyper-parameters, so every model is measured with
the same probe capacity. Splits are always at video granularity to keep
frames of one video from leaking across train/test.

This module is numpy-only; encodings arrive as arrays from whatever
produced them (a trained encoder, or the label-based oracle encoders used
to sanity-check the metric itself).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from fsvae.datasets import BounceConfig, VideoBatch, centroid_bounds

TERCILE_EDGES = (21, 43)  # [0,21), [21,43), [43,64)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Linear SVM probe


@dataclass
class LinearClassifier:
    """One-vs-rest linear SVM with input standardization folded in."""

    weights: np.ndarray  # [d, C]
    bias: np.ndarray  # [C]
    classes: np.ndarray  # [C]
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def scores(self, X: np.ndarray) -> np.ndarray:
        Xs = (X - self.feat_mean) / self.feat_std
        return Xs @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(X), axis=1)]


def train_linear_svm(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 1e-3,
    seed: int = 0,
    epochs: int = 200,
    lr0: float = 0.1,
    batch_size: int = 32,
) -> LinearClassifier:
    """Hinge-loss subgradient descent, one binary problem per class.

    Deterministic: shuffling comes from a counter-based generator keyed by
    the seed, and the step size follows lr0 / sqrt(epoch).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    n, d = X.shape
    mean = X.mean(axis=0)
    std = X.std(axis=0) + 1e-8
    Xs = (X - mean) / std
    Y = np.where(y[:, None] == classes[None, :], 1.0, -1.0)  # [n, C]

    W = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    rng = _rng(seed, 30)
    for epoch in range(1, epochs + 1):
        lr = lr0 / math.sqrt(epoch)
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            scores = Xs[idx] @ W + b
            viol = (Y[idx] * scores) < 1.0
            coef = np.where(viol, Y[idx], 0.0) / len(idx)
            W -= lr * (l2 * W - Xs[idx].T @ coef)
            b -= lr * (-coef.sum(axis=0))
    return LinearClassifier(weights=W, bias=b, classes=classes, feat_mean=mean, feat_std=std)


def accuracy(clf: LinearClassifier, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(clf.predict(X) == np.asarray(y)))


# ---------------------------------------------------------------------------
# Task labels


def location_bucket(row: float, col: float) -> int:
    """3x3 grid cell of a canvas position, row-major; terciles of [0, 64)."""
    if not (0 <= row < 64 and 0 <= col < 64):
        raise ValueError(f"position ({row}, {col}) outside the 64x64 canvas")
    return 3 * int(np.digitize(row, TERCILE_EDGES)) + int(np.digitize(col, TERCILE_EDGES))


def location_buckets(positions: np.ndarray) -> np.ndarray:
    """Vectorized location_bucket over [..., 2] (row, col) arrays."""
    positions = np.asarray(positions)
    if (positions < 0).any() or (positions >= 64).any():
        raise ValueError("positions outside the 64x64 canvas")
    r = np.digitize(positions[..., 0], TERCILE_EDGES)
    c = np.digitize(positions[..., 1], TERCILE_EDGES)
    return (3 * r + c).astype(np.int64)


def stretch_positions(positions: np.ndarray, lo: float, hi: float, canvas: int = 64) -> np.ndarray:
    """Map the reachable centroid range [lo, hi] onto the full canvas.

    A 28px sprite in a 64px canvas confines centroids to the inner
    [13.5, 49.5] band, which would starve the corner grid cells; stretching
    before bucketing keeps all nine location classes populated.
    """
    scaled = (np.asarray(positions, dtype=np.float64) - lo) / (hi - lo) * canvas
    return np.clip(scaled, 0.0, np.nextafter(canvas, 0.0))


def bucket_labels(batch: VideoBatch, bounce_cfg: BounceConfig) -> np.ndarray:
    lo, hi = centroid_bounds(bounce_cfg)
    return location_buckets(stretch_positions(batch.positions, lo, hi))


def temporal_order_label(indices) -> bool:
    """True iff a presented triple of frame indices is monotone (either way)."""
    i, j, k = indices
    if len({i, j, k}) != 3:
        raise ValueError(f"frame indices must be distinct, got {indices}")
    return bool((i < j < k) or (i > j > k))


def sample_order_triplets(n_frames: int, n_videos: int, per_video: int, seed: int) -> np.ndarray:
    """Balanced presented-order triples: half monotone, half scrambled.

    Returns [n_videos * per_video, 4]: (video, i, j, k) as presented.
    """
    if n_frames < 3:
        raise ValueError("order triplets need at least three frames")
    rng = _rng(seed, 31)
    rows = []
    for v in range(n_videos):
        for t in range(per_video):
            picks = np.sort(rng.choice(n_frames, size=3, replace=False))
            if rng.random() < 0.5:
                order = picks if rng.random() < 0.5 else picks[::-1]
            else:
                scrambles = [p for p in itertools.permutations(picks) if not temporal_order_label(p)]
                order = scrambles[rng.integers(0, len(scrambles))]
            rows.append((v, *order))
    return np.asarray(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# Feature tables


@dataclass
class FeatureTable:
    """Per-frame encodings plus the two task label sets.

    The temporal task is either per-frame ("location": y_temporal holds a
    grid cell per row) or triple-based ("order": triplets index rows of
    features, presented order; y_order holds the monotone flag).
    """

    features: np.ndarray  # [M, d]
    y_static: np.ndarray  # [M]
    video_ids: np.ndarray  # [M]
    y_temporal: np.ndarray | None = None
    triplets: np.ndarray | None = None  # [T, 3] row indices
    y_order: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.features).all():
            raise ValueError("feature table contains non-finite entries")
        if (self.y_temporal is None) == (self.triplets is None):
            raise ValueError("exactly one temporal task (location or order) must be present")

    @property
    def width(self) -> int:
        return self.features.shape[1]


def frame_table(batch: VideoBatch, feats: np.ndarray, bounce_cfg: BounceConfig) -> FeatureTable:
    """Location-task table: one row per frame, digit and grid-cell labels."""
    b, n, d = feats.shape
    return FeatureTable(
        features=feats.reshape(b * n, d).astype(np.float64),
        y_static=np.repeat(batch.labels, n),
        video_ids=np.repeat(np.arange(b), n),
        y_temporal=bucket_labels(batch, bounce_cfg).reshape(b * n),
    )


def order_table(batch: VideoBatch, feats: np.ndarray, per_video: int = 4, seed: int = 0) -> FeatureTable:
    """Order-task table: per-frame rows plus presented-order triples."""
    b, n, d = feats.shape
    raw = sample_order_triplets(n, b, per_video, seed)
    triplet_rows = raw[:, 0:1] * n + raw[:, 1:4]
    y_order = np.asarray([temporal_order_label(r[1:]) for r in raw], dtype=np.int64)
    return FeatureTable(
        features=feats.reshape(b * n, d).astype(np.float64),
        y_static=np.repeat(batch.labels, n),
        video_ids=np.repeat(np.arange(b), n),
        triplets=triplet_rows,
        y_order=y_order,
    )


# ---------------------------------------------------------------------------
# Held-out accuracy with video-granularity splits


def video_split_mask(video_ids: np.ndarray, seed: int, test_frac: float = 0.2) -> np.ndarray:
    """Boolean per-row test mask; whole videos land on one side."""
    uniq = np.unique(video_ids)
    rng = _rng(seed, 32)
    perm = rng.permutation(len(uniq))
    n_test = max(1, int(round(test_frac * len(uniq))))
    test_videos = set(uniq[perm[:n_test]].tolist())
    return np.asarray([v in test_videos for v in video_ids])


def held_out_accuracy(
    X: np.ndarray, y: np.ndarray, video_ids: np.ndarray, l2: float = 1e-3, seed: int = 0
) -> float:
    test = video_split_mask(video_ids, seed)
    clf = train_linear_svm(X[~test], y[~test], l2=l2, seed=seed)
    return accuracy(clf, X[test], y[test])


# ---------------------------------------------------------------------------
# Disentanglement score


@dataclass
class DScoreResult:
    score: float
    split: tuple[tuple[int, ...], tuple[int, ...]]  # (static cols, temporal cols)
    accuracies: tuple[float, float, float, float]  # acc_ss, acc_st, acc_tt, acc_ts
    skipped: list = field(default_factory=list)


def score_from_accuracies(acc_ss: float, acc_st: float, acc_tt: float, acc_ts: float) -> float:
    """Geometric mean of the two cross-task accuracy ratios."""
    if acc_st == 0.0 or acc_ts == 0.0:
        raise ZeroDivisionError("denominator accuracy is zero; split must be skipped")
    return math.sqrt((acc_ss / acc_st) * (acc_tt / acc_ts))


class _AccuracyCache:
    """Held-out accuracies per (column subset, task), shared across splits."""

    def __init__(self, table: FeatureTable, l2: float, seed: int):
        self.table = table
        self.l2 = l2
        self.seed = seed
        self.cache: dict[tuple[tuple[int, ...], str], float] = {}

    def __call__(self, cols: tuple[int, ...], task: str) -> float:
        key = (cols, task)
        if key not in self.cache:
            t = self.table
            sub_seed = self.seed + 997 * sum((c + 1) * 31**i for i, c in enumerate(cols)) % 100003
            if task == "static":
                acc = held_out_accuracy(t.features[:, cols], t.y_static, t.video_ids, self.l2, sub_seed)
            elif t.y_temporal is not None:
                acc = held_out_accuracy(t.features[:, cols], t.y_temporal, t.video_ids, self.l2, sub_seed)
            else:
                X = t.features[t.triplets][:, :, cols].reshape(len(t.triplets), -1)
                vids = t.video_ids[t.triplets[:, 0]]
                acc = held_out_accuracy(X, t.y_order, vids, self.l2, sub_seed)
            self.cache[key] = acc
        return self.cache[key]


def disentanglement_score(
    table: FeatureTable,
    f_s: int | None = None,
    mode: str = "natural",
    l2: float = 1e-3,
    seed: int = 0,
) -> DScoreResult:
    """Geometric-mean accuracy-ratio score over a static/temporal column split.

    mode="natural" uses columns [0, f_s) vs [f_s, d); mode="max" returns
    the best score over all 2^d - 2 assignments. Splits whose denominator
    accuracy is exactly zero are skipped and recorded.
    """
    d = table.width
    if d < 2:
        raise ValueError("need at least two feature columns to split")
    acc_of = _AccuracyCache(table, l2, seed)

    if mode == "natural":
        if f_s is None or not (0 < f_s < d):
            raise ValueError(f"natural mode needs 0 < f_s < d, got f_s={f_s}, d={d}")
        assignments = [(tuple(range(f_s)), tuple(range(f_s, d)))]
    elif mode == "max":
        cols = tuple(range(d))
        assignments = []
        for r in range(1, d):
            for s_cols in itertools.combinations(cols, r):
                assignments.append((s_cols, tuple(c for c in cols if c not in s_cols)))
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    best: DScoreResult | None = None
    skipped = []
    for s_cols, t_cols in assignments:
        acc_ss = acc_of(s_cols, "static")
        acc_st = acc_of(s_cols, "temporal")
        acc_tt = acc_of(t_cols, "temporal")
        acc_ts = acc_of(t_cols, "static")
        if acc_st == 0.0 or acc_ts == 0.0:
            skipped.append((s_cols, t_cols))
            continue
        score = score_from_accuracies(acc_ss, acc_st, acc_tt, acc_ts)
        if best is None or score > best.score:
            best = DScoreResult(score, (s_cols, t_cols), (acc_ss, acc_st, acc_tt, acc_ts))
    if best is None:
        return DScoreResult(float("nan"), ((), ()), (0.0, 0.0, 0.0, 0.0), skipped)
    best.skipped = skipped
    return best


# ---------------------------------------------------------------------------
# Transfer probe


def transfer_accuracy(
    table: FeatureTable, cols: tuple[int, ...] | None = None, l2: float = 1e-3, seed: int = 0
) -> float:
    """Held-out static-label accuracy from the given feature columns.

    The factored model is probed on its static factor only; benchmarks on
    all columns (cols=None).
    """
    cols = tuple(range(table.width)) if cols is None else tuple(cols)
    return held_out_accuracy(table.features[:, cols], table.y_static, table.video_ids, l2, seed)


# ---------------------------------------------------------------------------
# Oracle encoders (metric sanity checks)


def oracle_features(batch: VideoBatch, bounce_cfg: BounceConfig, noise: float = 0.25, seed: int = 0):
    """Ground-truth-factor encoder: noise-corrupted digit one-hot + position.

    Returns (feats [B, N, K+2], f_s=K). A metric that cannot award this
    encoder a high score is broken.
    """
    rng = _rng(seed, 33)
    classes = np.unique(batch.labels)
    onehot = (batch.labels[:, None] == classes[None, :]).astype(np.float64)  # [B, K]
    b, n = batch.frames.shape[:2]
    stat = np.repeat(onehot[:, None, :], n, axis=1)
    stat = stat + noise * rng.standard_normal(stat.shape)
    lo, hi = centroid_bounds(bounce_cfg)
    temp = (batch.positions.astype(np.float64) - lo) / (hi - lo)
    return np.concatenate([stat, temp], axis=2), len(classes)


def noise_features(batch: VideoBatch, width: int = 4, seed: int = 0) -> np.ndarray:
    """Pure-noise encoder; the metric should score it near 1."""
    rng = _rng(seed, 34)
    b, n = batch.frames.shape[:2]
    return rng.standard_normal((b, n, width))
