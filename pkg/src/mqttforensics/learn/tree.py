"""CART decision tree and random forest classifiers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._tree import StackedForest, Tree, grow_classification_tree, splitmix64


def _encode_labels(y):
    classes, y_idx = np.unique(y, return_inverse=True)
    return classes, y_idx


def _dedupe(X, y_idx, weight):
    """Collapse identical (row, label) pairs into one weighted row."""
    keyed = np.column_stack([X, y_idx.astype(float)])
    uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    w = np.bincount(inverse, weights=weight, minlength=len(uniq))
    keep = w > 0
    return uniq[keep, :-1], uniq[keep, -1].astype(np.int64), w[keep]


class DecisionTreeClassifier(ClassifierMixin, BaseEstimator):
    """CART with Gini impurity and no pruning.

    Identical training rows are merged into weighted rows before growth,
    which gives the same tree as growing on the duplicated data.
    """

    def __init__(self, max_depth=20, min_samples_leaf=1, random_state=0):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = _encode_labels(y)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        Xu, yu, wu = _dedupe(X, y_idx, w)
        self.tree_ = grow_classification_tree(
            Xu, yu, wu, len(self.classes_), max_depth=self.max_depth,
            min_samples_leaf=self.min_samples_leaf)
        self.n_features_in_ = X.shape[1]
        return self

    def apply(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.apply(check_array(X, dtype=float))

    def predict_proba(self, X):
        return self.tree_.value[self.apply(X)]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "tree": self.tree_.to_dict(),
                "n_features_in": self.n_features_in_}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.tree_ = Tree.from_dict(state["tree"])
        self.n_features_in_ = state["n_features_in"]
        return self


class RandomForestClassifier(ClassifierMixin, BaseEstimator):
    """Bagged CART trees with per-split feature subsampling and majority vote.

    ``predict_proba`` returns vote shares.  Tree ``i`` draws its bootstrap and
    feature subsets from ``splitmix64(random_state, i)`` so results do not
    depend on the order trees are grown in.
    """

    def __init__(self, n_estimators=100, max_depth=20, min_samples_leaf=1,
                 max_features="sqrt", bootstrap=True, random_state=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _n_split_features(self, n_features):
        if self.max_features is None:
            return None
        if self.max_features == "sqrt":
            return max(1, int(round(np.sqrt(n_features))))
        return int(self.max_features)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = _encode_labels(y)
        n = len(y)
        keyed = np.column_stack([X, y_idx.astype(float)])
        uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        Xu, yu = uniq[:, :-1], uniq[:, -1].astype(np.int64)
        k = self._n_split_features(X.shape[1])
        trees = []
        for i in range(self.n_estimators):
            rng = np.random.default_rng(splitmix64(self.random_state, i))
            if self.bootstrap:
                draws = rng.integers(0, n, size=n)
                w = np.bincount(inverse[draws], minlength=len(uniq)).astype(float)
            else:
                w = np.bincount(inverse, minlength=len(uniq)).astype(float)
            keep = w > 0
            trees.append(grow_classification_tree(
                Xu[keep], yu[keep], w[keep], len(self.classes_), max_depth=self.max_depth,
                min_samples_leaf=self.min_samples_leaf, max_features=k, rng=rng))
        self.estimators_ = trees
        self.n_features_in_ = X.shape[1]
        self._stack = StackedForest(trees)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        votes = np.argmax(self._stack.value[self._stack.apply(X)], axis=2)
        share = np.zeros((len(X), len(self.classes_)))
        for c in range(len(self.classes_)):
            share[:, c] = (votes == c).sum(axis=1)
        return share / len(self.estimators_)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "n_features_in": self.n_features_in_,
                "trees": [t.to_dict() for t in self.estimators_]}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.n_features_in_ = state["n_features_in"]
        self.estimators_ = [Tree.from_dict(t) for t in state["trees"]]
        self._stack = StackedForest(self.estimators_)
        return self
