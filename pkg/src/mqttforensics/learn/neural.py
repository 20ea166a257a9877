"""Single-hidden-layer perceptron with softmax output."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..errors import ForensicsError


class DivergenceError(ForensicsError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became NaN in epoch {epoch}")
        self.epoch = epoch


def forward(params, X):
    W1, b1, W2, b2 = params
    pre = X @ W1 + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ W2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return pre, hidden, e / e.sum(axis=1, keepdims=True)


def loss_and_grads(params, X, Y):
    """Mean cross-entropy and its gradient for each of ``W1, b1, W2, b2``."""
    W1, b1, W2, b2 = params
    pre, hidden, P = forward(params, X)
    n = len(X)
    loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / n
    d_logits = (P - Y) / n
    gW2 = hidden.T @ d_logits
    gb2 = d_logits.sum(axis=0)
    d_hidden = (d_logits @ W2.T) * (pre > 0)
    gW1 = X.T @ d_hidden
    gb1 = d_hidden.sum(axis=0)
    return float(loss), [gW1, gb1, gW2, gb2]


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU hidden layer, softmax output, cross-entropy, plain mini-batch SGD.

    ``loss_curve_`` holds the full-training-set loss before training and
    after each epoch.
    """

    def __init__(self, hidden_units=64, learning_rate=0.01, batch_size=32, n_epochs=50,
                 random_state=0):
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        n, d = X.shape
        K = len(self.classes_)
        Y = np.eye(K)[y_idx]
        rng = np.random.default_rng(self.random_state)
        h = self.hidden_units
        params = [rng.normal(0.0, np.sqrt(2.0 / d), (d, h)), np.zeros(h),
                  rng.normal(0.0, np.sqrt(2.0 / h), (h, K)), np.zeros(K)]
        # divergence is reported via DivergenceError, not float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            self.loss_curve_ = [loss_and_grads(params, X, Y)[0]]
            for epoch in range(1, self.n_epochs + 1):
                order = rng.permutation(n)
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    loss, grads = loss_and_grads(params, X[idx], Y[idx])
                    if not np.isfinite(loss):
                        raise DivergenceError(epoch)
                    for p, g in zip(params, grads):
                        p -= self.learning_rate * g
                epoch_loss = loss_and_grads(params, X, Y)[0]
                if not np.isfinite(epoch_loss):
                    raise DivergenceError(epoch)
                self.loss_curve_.append(epoch_loss)
        self.params_ = params
        self.n_features_in_ = d
        return self

    @property
    def final_loss_(self):
        return self.loss_curve_[-1]

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, check_array(X, dtype=float))[2]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "loss_curve": self.loss_curve_,
                "params": [p.tolist() for p in self.params_],
                "n_features_in": self.n_features_in_}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.loss_curve_ = list(state["loss_curve"])
        self.n_features_in_ = state["n_features_in"]
        self.params_ = [np.asarray(p, dtype=float) for p in state["params"]]
        return self
