"""Array-backed binary trees shared by the CART, forest and boosting models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int) -> int:
    """Derive an independent 64-bit seed for sub-unit ``index``."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class Tree:
    """Flat tree; leaves have ``feature == -1``.

    A sample goes left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.node_count, dtype=int)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        return StackedForest([self]).apply(np.asarray(X, dtype=float))[:, 0]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        value = np.asarray(d["value"], dtype=float)
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64),
                   np.asarray(d["right"], dtype=np.int64),
                   value.reshape(len(d["feature"]), -1))


class _Builder:
    def __init__(self, n_out):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self.n_out = n_out

    def add(self, value) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def split(self, node, feature, threshold, left, right):
        self.feature[node] = feature
        self.threshold[node] = threshold
        self.left[node] = left
        self.right[node] = right

    def build(self) -> Tree:
        n = len(self.feature)
        left = np.asarray(self.left, dtype=np.int64)
        right = np.asarray(self.right, dtype=np.int64)
        leaves = left < 0
        left[leaves] = right[leaves] = np.flatnonzero(leaves)
        return Tree(np.asarray(self.feature, dtype=np.int64),
                    np.asarray(self.threshold, dtype=float), left, right,
                    np.asarray(self.value, dtype=float).reshape(n, self.n_out))


class StackedForest:
    """Precomputed concatenation of trees for repeated batch prediction."""

    def __init__(self, trees: list[Tree]):
        self.trees = trees
        self.offsets = np.cumsum([0] + [t.node_count for t in trees[:-1]]).astype(np.int64)
        self.feature = np.maximum(np.concatenate([t.feature for t in trees]), 0)
        self.threshold = np.concatenate([t.threshold for t in trees])
        self.left = np.concatenate([t.left + o for t, o in zip(trees, self.offsets)])
        self.right = np.concatenate([t.right + o for t, o in zip(trees, self.offsets)])
        self.value = np.concatenate([t.value for t in trees])
        self.max_depth = max(t.depth for t in trees)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Global node ids of the reached leaves, ``(n_samples, n_trees)``."""
        node = np.broadcast_to(self.offsets, (len(X), len(self.trees))).copy()
        rows = np.arange(len(X))[:, None]
        for _ in range(self.max_depth):
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            node = np.where(go_left, self.left[node], self.right[node])
        return node


# -- exact CART growth for classification -----------------------------------

def _best_split(X, Yw, idx, features, min_leaf):
    """Best Gini split of the rows ``idx`` over ``features``.

    ``Yw`` holds per-row weighted one-hot class counts.  Returns
    ``(score, feature, threshold)`` maximising sum over children of
    ``sum_c count_c^2 / weight``, which minimises weighted Gini impurity.
    Ties go to the lowest feature index, then the lowest threshold.
    """
    best = (-np.inf, -1, 0.0)
    Ysub = Yw[idx]
    total = Ysub.sum(axis=0)
    w_total = total.sum()
    for f in sorted(features):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        cum = np.cumsum(Ysub[order], axis=0)[:-1]
        w_left = cum.sum(axis=1)
        w_right = w_total - w_left
        valid &= (w_left >= min_leaf) & (w_right >= min_leaf)
        if not valid.any():
            continue
        right = total - cum
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (cum ** 2).sum(axis=1) / w_left + (right ** 2).sum(axis=1) / w_right
        score = np.where(valid, score, -np.inf)
        pos = int(np.argmax(score))
        if score[pos] > best[0] * (1 + 1e-12) + 1e-12:
            thr = 0.5 * (xs[pos] + xs[pos + 1])
            if not xs[pos] <= thr < xs[pos + 1]:
                thr = xs[pos]
            best = (float(score[pos]), f, float(thr))
    return best


def grow_classification_tree(X, y, weight, n_classes, *, max_depth=20, min_samples_leaf=1,
                             max_features=None, rng=None) -> Tree:
    """Grow a CART tree with weighted Gini impurity.

    Leaf values are weighted class frequencies.  When ``max_features`` is
    set, each node evaluates features in a random order, ``max_features``
    at a time, until one admits a split.
    """
    n_features = X.shape[1]
    Yw = np.zeros((len(y), n_classes))
    Yw[np.arange(len(y)), y] = weight
    b = _Builder(n_classes)
    root_idx = np.arange(len(y))
    stack = [(b.add(None), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = Yw[idx].sum(axis=0)
        w = counts.sum()
        b.value[node] = counts / w
        if depth >= max_depth or np.count_nonzero(counts) <= 1 or w < 2 * min_samples_leaf:
            continue
        if max_features is None or max_features >= n_features:
            chunks = [range(n_features)]
        else:
            perm = rng.permutation(n_features)
            chunks = [perm[i:i + max_features] for i in range(0, n_features, max_features)]
        score, feat = -np.inf, -1
        for chunk in chunks:
            score, feat, thr = _best_split(X, Yw, idx, chunk, min_samples_leaf)
            if feat >= 0:
                break
        if feat < 0:
            continue
        go_left = X[idx, feat] <= thr
        left, right = b.add(None), b.add(None)
        b.split(node, feat, thr, left, right)
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return b.build()


# -- histogram growth for gradient boosting ---------------------------------

class Binner:
    """Maps each feature to at most ``max_bins`` ordinal bins.

    Cut points are midpoints between distinct values.  When a feature has
    more distinct values than bins, the cuts kept are those closest to the
    data quantiles, so dense regions get finer bins.
    """

    def __init__(self, max_bins: int = 256):
        self.max_bins = max_bins

    def fit(self, X):
        self.cuts_ = []
        for f in range(X.shape[1]):
            uniq, counts = np.unique(X[:, f], return_counts=True)
            mids = 0.5 * (uniq[:-1] + uniq[1:])
            if len(mids) > self.max_bins - 1:
                below = np.cumsum(counts)[:-1]
                q = np.linspace(0, len(X), self.max_bins + 1)[1:-1]
                keep = np.unique(np.minimum(np.searchsorted(below, q), len(mids) - 1))
                mids = mids[keep]
            self.cuts_.append(mids)
        return self

    def transform(self, X):
        out = np.empty(X.shape, dtype=np.int64)
        for f, cuts in enumerate(self.cuts_):
            out[:, f] = np.searchsorted(cuts, X[:, f], side="left")
        return out


def grow_gradient_tree(B, cuts, grad, hess, *, max_depth=4, reg_lambda=1.0,
                       min_child_weight=1.0, gamma=0.0) -> Tree:
    """Second-order regression tree on binned features.

    Leaf values are the Newton steps ``-G / (H + lambda)``; splits maximise
    the usual structure-score gain.
    """
    n, n_features = B.shape
    n_bins = max(len(c) for c in cuts) + 1
    offsets = np.arange(n_features) * n_bins
    flat_all = B + offsets
    b = _Builder(1)
    stack = [(b.add([0.0]), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        g, h = grad[idx], hess[idx]
        G, H = g.sum(), h.sum()
        b.value[node] = [-G / (H + reg_lambda)]
        if depth >= max_depth or len(idx) < 2:
            continue
        flat = flat_all[idx].ravel()
        hg = np.bincount(flat, np.repeat(g, n_features), minlength=n_features * n_bins)
        hh = np.bincount(flat, np.repeat(h, n_features), minlength=n_features * n_bins)
        GL = np.cumsum(hg.reshape(n_features, n_bins), axis=1)[:, :-1]
        HL = np.cumsum(hh.reshape(n_features, n_bins), axis=1)[:, :-1]
        GR, HR = G - GL, H - HL
        gain = GL ** 2 / (HL + reg_lambda) + GR ** 2 / (HR + reg_lambda) - G ** 2 / (H + reg_lambda)
        ok = (HL >= min_child_weight) & (HR >= min_child_weight)
        for f, c in enumerate(cuts):
            ok[f, len(c):] = False
        gain = np.where(ok, gain, -np.inf)
        f, bin_ = np.unravel_index(int(np.argmax(gain)), gain.shape)
        if not gain[f, bin_] > gamma + 1e-12:
            continue
        go_left = B[idx, f] <= bin_
        if go_left.all() or not go_left.any():
            continue
        left, right = b.add([0.0]), b.add([0.0])
        b.split(node, int(f), float(cuts[f][bin_]), left, right)
        stack.append((right, idx[~go_left], depth + 1))
        stack.append((left, idx[go_left], depth + 1))
    return b.build()
