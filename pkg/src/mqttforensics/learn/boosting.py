"""Gradient-boosted trees with logistic / softmax loss (XGBoost-style)."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._tree import Binner, StackedForest, Tree, grow_gradient_tree


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class GradientBoostingClassifier(ClassifierMixin, BaseEstimator):
    """Newton-boosted regression trees on histogram-binned features.

    Two classes use one logistic output; more use one softmax output per
    class and grow one tree per class each round.  ``loss_curve_`` records
    the mean training log-loss after every round.
    """

    def __init__(self, n_estimators=100, learning_rate=0.1, max_depth=4, reg_lambda=1.0,
                 min_child_weight=1.0, max_bins=256, random_state=0):
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.reg_lambda = reg_lambda
        self.min_child_weight = min_child_weight
        self.max_bins = max_bins
        self.random_state = random_state

    def _loss(self, raw, Y):
        if raw.shape[1] == 1:
            z = raw[:, 0]
            y = Y[:, 1]
            return float(np.mean(np.logaddexp(0.0, z) - y * z))
        zmax = raw.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(raw - zmax).sum(axis=1))
        return float(np.mean(lse - (raw * Y).sum(axis=1)))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        K = len(self.classes_)
        Y = np.eye(K)[y_idx]
        n_out = 1 if K == 2 else K
        binner = Binner(self.max_bins).fit(X)
        B = binner.transform(X)
        prior = np.clip(Y.mean(axis=0), 1e-12, 1.0)
        if n_out == 1:
            self.base_score_ = np.array([np.log(prior[1] / prior[0])])
        else:
            self.base_score_ = np.log(prior)
        raw = np.tile(self.base_score_, (len(X), 1))
        self.trees_: list[list[Tree]] = []
        self.loss_curve_ = [self._loss(raw, Y)]
        for _ in range(self.n_estimators):
            if n_out == 1:
                p = _sigmoid(raw[:, 0])
                grads = [(p - Y[:, 1], np.maximum(p * (1 - p), 1e-16))]
            else:
                P = _softmax(raw)
                grads = [(P[:, k] - Y[:, k], np.maximum(P[:, k] * (1 - P[:, k]), 1e-16))
                         for k in range(K)]
            round_trees = []
            for k, (g, h) in enumerate(grads):
                tree = grow_gradient_tree(B, binner.cuts_, g, h, max_depth=self.max_depth,
                                          reg_lambda=self.reg_lambda,
                                          min_child_weight=self.min_child_weight)
                tree.value *= self.learning_rate
                raw[:, k] += tree.value[tree.apply(X), 0]
                round_trees.append(tree)
            self.trees_.append(round_trees)
            self.loss_curve_.append(self._loss(raw, Y))
        self.n_features_in_ = X.shape[1]
        self._build_stack()
        return self

    def _build_stack(self):
        n_out = len(self.base_score_)
        self._stacks = [StackedForest([r[k] for r in self.trees_]) if self.trees_ else None
                        for k in range(n_out)]

    def decision_function(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=float)
        raw = np.tile(self.base_score_, (len(X), 1))
        for k, stack in enumerate(self._stacks):
            if stack is not None:
                raw[:, k] += stack.value[stack.apply(X), 0].sum(axis=1)
        return raw

    def predict_proba(self, X):
        raw = self.decision_function(X)
        if raw.shape[1] == 1:
            p = _sigmoid(raw[:, 0])
            return np.column_stack([1 - p, p])
        return _softmax(raw)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    @property
    def final_loss_(self):
        return self.loss_curve_[-1]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "n_features_in": self.n_features_in_,
                "base_score": self.base_score_.tolist(), "loss_curve": self.loss_curve_,
                "trees": [[t.to_dict() for t in r] for r in self.trees_]}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.n_features_in_ = state["n_features_in"]
        self.base_score_ = np.asarray(state["base_score"], dtype=float)
        self.loss_curve_ = list(state["loss_curve"])
        self.trees_ = [[Tree.from_dict(t) for t in r] for r in state["trees"]]
        self._build_stack()
        return self
