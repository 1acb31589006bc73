"""Classifiers over extracted feature vectors.

* one-vs-one polynomial-kernel SVM trained by SMO,
* k-nearest neighbours,
* a binary decision tree split on gain ratio (no pruning).

Also holds :class:`FeatureSet` and its binary ``FEAT`` file format.
"""

import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, MagicError, ShapeError, TruncatedError, VersionError
from .tensor import DTYPE


@dataclass
class FeatureSet:
    """``features`` is ``(n, dim)`` float32; ``labels`` index into ``classes``."""

    features: np.ndarray
    labels: np.ndarray
    video_ids: list
    classes: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be a matrix, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.video_ids = list(self.video_ids)
        self.classes = list(self.classes)
        n = self.features.shape[0]
        if len(self.labels) != n or len(self.video_ids) != n:
            raise ShapeError("features, labels and video ids must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ConfigError("label index out of range of the class table")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_features(fs, path):
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IIII", FEAT_VERSION, len(fs), fs.dim, len(fs.classes)))
        for name in fs.classes:
            fh.write(_pack_str(name))
        for row, label, vid in zip(fs.features, fs.labels, fs.video_ids):
            fh.write(struct.pack("<I", int(label)))
            fh.write(_pack_str(vid))
            fh.write(row.astype("<f4").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"{path}: feature file truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("utf-8")

    if take(4) != FEAT_MAGIC:
        raise MagicError(f"{path}: not a feature file (bad magic)")
    version, count, dim, n_classes = struct.unpack("<IIII", take(16))
    if version != FEAT_VERSION:
        raise VersionError(f"{path}: unsupported feature file version {version}")
    classes = [take_str() for _ in range(n_classes)]
    features = np.empty((count, dim), dtype=DTYPE)
    labels, vids = np.empty(count, dtype=np.int64), []
    for r in range(count):
        (labels[r],) = struct.unpack("<I", take(4))
        vids.append(take_str())
        features[r] = np.frombuffer(take(4 * dim), dtype="<f4")
    return FeatureSet(features, labels, vids, classes)


# --- SVM ---------------------------------------------------------------------


def poly_kernel(a, b, exponent):
    """``(a . b) ** exponent`` for row-matrices ``a`` and ``b``."""
    return (np.asarray(a, np.float64) @ np.asarray(b, np.float64).T) ** exponent


def smo(K, y, C, tol=1e-3, eps=1e-12, max_iter=1_000_000):
    """Solve the SVM dual for a precomputed Gram matrix.

    Minimises ``0.5 a'Qa - sum(a)`` with ``Q = yy' * K`` subject to
    ``0 <= a <= C`` and ``y'a = 0``. Each step updates the maximal
    violating pair; stops once the KKT gap drops below ``tol``.
    Returns ``(alpha, bias)``.
    """
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    diag = np.diag(K)
    pos, neg = y > 0, y < 0
    for _ in range(max_iter):
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        v = -y * grad
        i = int(np.argmax(np.where(up, v, -np.inf)))
        j = int(np.argmin(np.where(low, v, np.inf)))
        if v[i] - v[j] < tol:
            break
        curv = max(diag[i] + diag[j] - 2.0 * K[i, j], eps)
        step = (v[i] - v[j]) / curv
        bound_i = C - alpha[i] if y[i] > 0 else alpha[i]
        bound_j = alpha[j] if y[j] > 0 else C - alpha[j]
        step = min(step, bound_i, bound_j)
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        # snap onto the box so the active sets stay exact
        for t in (i, j):
            if alpha[t] < eps:
                alpha[t] = 0.0
            elif alpha[t] > C - eps:
                alpha[t] = C
        grad += y * (K[:, i] - K[:, j]) * step
    return alpha, _bias(alpha, y, grad, C)


def _bias(alpha, y, grad, C):
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return -float(yg[free].mean())
    at_c, at_0 = alpha >= C, alpha <= 0
    ub_mask = (at_c & (y < 0)) | (at_0 & (y > 0))
    lb_mask = (at_c & (y > 0)) | (at_0 & (y < 0))
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    if np.isinf(ub) or np.isinf(lb):
        return -float(ub if np.isfinite(ub) else lb)
    return -float((ub + lb) / 2.0)


@dataclass
class BinaryMachine:
    """Machine for the class pair ``(pos, neg)``; positive decision votes ``pos``."""

    pos: int
    neg: int
    support: np.ndarray   # standardized support vectors
    alpha: np.ndarray
    y: np.ndarray         # +1 / -1 per support vector
    bias: float

    def decision(self, xs, exponent):
        return poly_kernel(xs, self.support, exponent) @ (self.alpha * self.y) + self.bias


@dataclass
class SvmModel:
    classes: list
    exponent: int
    C: float
    mean: np.ndarray
    scale: np.ndarray
    machines: list = field(default_factory=list)
    standardize: bool = True

    @property
    def dim(self):
        return len(self.mean)

    def transform(self, xs):
        xs = np.asarray(xs, dtype=np.float64)
        if not self.standardize:
            return xs
        return (xs - self.mean) / self.scale


def svm_train(train, C=1.0, exponent=2, tol=1e-3, standardize=True):
    """One-vs-one SMO training with kernel ``(x . y) ** exponent``."""
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    if exponent < 1:
        raise ConfigError(f"kernel exponent must be a positive integer, got {exponent}")
    present = sorted(set(train.labels.tolist()))
    if len(present) < 2:
        raise ConfigError("SVM training needs at least two classes")
    x = train.features.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    model = SvmModel(list(train.classes), int(exponent), float(C), mean, scale,
                     standardize=standardize)
    xt = model.transform(x)
    for a, b in combinations(present, 2):
        rows = np.flatnonzero((train.labels == a) | (train.labels == b))
        xs = xt[rows]
        ys = np.where(train.labels[rows] == a, 1.0, -1.0)
        K = poly_kernel(xs, xs, exponent)
        alpha, bias = smo(K, ys, C, tol=tol)
        sv = alpha > 0
        model.machines.append(BinaryMachine(a, b, xs[sv], alpha[sv], ys[sv], bias))
    return model


def svm_decisions(model, xs):
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != model.dim:
        raise ShapeError(f"SVM expects dimension {model.dim}, got {xs.shape[1]}")
    xt = model.transform(xs)
    return np.stack([m.decision(xt, model.exponent) for m in model.machines], axis=1)


def svm_predict_many(model, xs):
    dec = svm_decisions(model, xs)
    votes = np.zeros((dec.shape[0], len(model.classes)), dtype=np.int64)
    for col, m in enumerate(model.machines):
        winner = np.where(dec[:, col] > 0, m.pos, m.neg)
        np.add.at(votes, (np.arange(len(winner)), winner), 1)
    return votes.argmax(axis=1)  # first maximum = lowest class index


def svm_predict(model, x):
    return int(svm_predict_many(model, np.asarray(x)[None, :])[0])


# --- k-NN --------------------------------------------------------------------


def knn_predict_many(train, k, xs):
    """Majority label of the ``k`` nearest training rows (Euclidean).

    Distance ties go to the lower record index; vote ties go to the tied
    label whose nearest member is closest.
    """
    if len(train) == 0:
        raise ConfigError("k-NN needs a non-empty training set")
    if not 1 <= k <= len(train):
        raise ConfigError(f"k must be in 1..{len(train)}, got {k}")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != train.dim:
        raise ShapeError(f"k-NN expects dimension {train.dim}, got {xs.shape[1]}")
    ref = train.features.astype(np.float64)
    ref_sq = (ref * ref).sum(axis=1)
    out = np.empty(len(xs), dtype=np.int64)
    for r, x in enumerate(xs):
        d2 = ((ref - x) ** 2).sum(axis=1) if len(ref) < 64 else ref_sq - 2 * ref @ x + x @ x
        order = np.argsort(d2, kind="stable")[:k]
        labels = train.labels[order]
        counts = np.bincount(labels, minlength=len(train.classes))
        tied = set(np.flatnonzero(counts == counts.max()).tolist())
        out[r] = next(int(l) for l in labels if l in tied)
    return out


def knn_predict(train, k, x):
    return int(knn_predict_many(train, k, np.asarray(x)[None, :])[0])


# --- decision tree -------------------------------------------------------------


@dataclass
class TreeNode:
    """Leaf when ``feature`` is None; otherwise go left iff ``x[feature] <= threshold``."""

    label: int
    feature: int = None
    threshold: float = None
    left: "TreeNode" = None
    right: "TreeNode" = None

    @property
    def is_leaf(self):
        return self.feature is None

    def depth(self):
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


def _entropy(counts):
    """Entropy (bits) of each row of a count matrix."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=-1)


def _best_split(x, y, n_classes, chunk=256):
    """Return ``(feature, threshold, gain_ratio)`` or None if nothing has positive gain."""
    n, d = x.shape
    parent = _entropy(np.bincount(y, minlength=n_classes))
    onehot = np.eye(n_classes)[y]
    best = None
    for start in range(0, d, chunk):
        xc = x[:, start:start + chunk]
        order = np.argsort(xc, axis=0, kind="stable")
        xs = np.take_along_axis(xc, order, axis=0)
        left = np.cumsum(onehot[order], axis=0)[:-1]   # (n-1, f, K)
        right = onehot.sum(axis=0) - left
        nl = np.arange(1, n)[:, None].astype(np.float64)
        gain = parent - (nl / n) * _entropy(left) - ((n - nl) / n) * _entropy(right)
        frac = nl / n
        split_info = -(frac * np.log2(frac) + (1 - frac) * np.log2(1 - frac))
        valid = (xs[1:] != xs[:-1]) & (gain > 1e-12)
        ratio = np.where(valid, gain / split_info, -np.inf)
        # flat argmax scans positions first; transpose so lower feature wins ties
        flat = int(np.argmax(ratio.T))
        f, pos = divmod(flat, n - 1)
        if np.isfinite(ratio[pos, f]) and (best is None or ratio[pos, f] > best[2]):
            thr = (xs[pos, f] + xs[pos + 1, f]) / 2.0
            best = (start + f, float(thr), float(ratio[pos, f]))
    return best


def tree_train(train, max_depth=20, min_leaf=2):
    """Grow a binary gain-ratio tree on ``train``."""
    if len(train) == 0:
        raise ConfigError("cannot grow a tree on an empty training set")
    x = train.features.astype(np.float64)
    n_classes = len(train.classes)

    def grow(rows, depth):
        y = train.labels[rows]
        label = int(np.bincount(y, minlength=n_classes).argmax())
        if depth >= max_depth or len(rows) < min_leaf or len(set(y.tolist())) == 1:
            return TreeNode(label)
        split = _best_split(x[rows], y, n_classes)
        if split is None:
            return TreeNode(label)
        f, thr, _ = split
        go_left = x[rows, f] <= thr
        return TreeNode(label, f, thr,
                        grow(rows[go_left], depth + 1), grow(rows[~go_left], depth + 1))

    return grow(np.arange(len(train)), 0)


def tree_predict(root, x):
    x = np.asarray(x)
    node = root
    while not node.is_leaf:
        if node.feature >= x.shape[-1]:
            raise ShapeError(f"split feature {node.feature} out of range for length {x.shape[-1]}")
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.label


def tree_predict_many(root, xs):
    return np.array([tree_predict(root, x) for x in np.atleast_2d(xs)], dtype=np.int64)
