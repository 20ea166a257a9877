"""Linear support vector machine and Gaussian naive Bayes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LinearSVC(ClassifierMixin, BaseEstimator):
    """One-vs-rest linear SVM trained by mini-batch subgradient descent.

    Minimises ``alpha/2 * ||w||^2 + mean(max(0, 1 - y * (w.x + b)))`` for
    every class at once.  ``predict_proba`` is a softmax over the decision
    values; it ranks classes but is not calibrated.
    """

    def __init__(self, alpha=1e-4, n_epochs=20, batch_size=64, learning_rate=0.1,
                 random_state=0):
        self.alpha = alpha
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _objective(self, X, S):
        margins = S * (X @ self.coef_ + self.intercept_)
        hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0)
        return float((0.5 * self.alpha * (self.coef_ ** 2).sum(axis=0) + hinge).sum())

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        n, d = X.shape
        K = len(self.classes_)
        S = -np.ones((n, K))
        S[np.arange(n), y_idx] = 1.0
        rng = np.random.default_rng(self.random_state)
        W = np.zeros((d, K))
        b = np.zeros(K)
        step = 0
        for _ in range(self.n_epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                Xb, Sb = X[idx], S[idx]
                active = (Sb * (Xb @ W + b) < 1.0) * Sb
                lr = self.learning_rate / (1.0 + self.learning_rate * self.alpha * step)
                W -= lr * (self.alpha * W - Xb.T @ active / len(idx))
                b -= lr * (-active.sum(axis=0) / len(idx))
                step += 1
        self.coef_, self.intercept_ = W, b
        self.n_features_in_ = d
        self.final_loss_ = self._objective(X, S)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=float) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "coef": self.coef_.tolist(),
                "intercept": self.intercept_.tolist(), "final_loss": self.final_loss_,
                "n_features_in": self.n_features_in_}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.coef_ = np.asarray(state["coef"], dtype=float).reshape(state["n_features_in"], -1)
        self.intercept_ = np.asarray(state["intercept"], dtype=float)
        self.final_loss_ = state["final_loss"]
        self.n_features_in_ = state["n_features_in"]
        return self


class GaussianNB(ClassifierMixin, BaseEstimator):
    """Gaussian naive Bayes with empirical class priors.

    Per-class variances are population variances plus
    ``var_smoothing * max(feature variance)`` so constant features stay finite.
    """

    def __init__(self, var_smoothing=1e-9):
        self.var_smoothing = var_smoothing

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        K = len(self.classes_)
        self.epsilon_ = self.var_smoothing * float(np.var(X, axis=0).max())
        self.theta_ = np.zeros((K, X.shape[1]))
        self.var_ = np.zeros((K, X.shape[1]))
        counts = np.bincount(y_idx, minlength=K)
        for k in range(K):
            Xk = X[y_idx == k]
            self.theta_[k] = Xk.mean(axis=0)
            self.var_[k] = Xk.var(axis=0) + self.epsilon_
        self.class_prior_ = counts / counts.sum()
        self.n_features_in_ = X.shape[1]
        return self

    def _joint_log_likelihood(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=float)
        jll = np.empty((len(X), len(self.classes_)))
        for k in range(len(self.classes_)):
            log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * self.var_[k]))
            quad = -0.5 * np.sum((X - self.theta_[k]) ** 2 / self.var_[k], axis=1)
            jll[:, k] = np.log(self.class_prior_[k]) + log_norm + quad
        return jll

    def predict_proba(self, X):
        jll = self._joint_log_likelihood(X)
        jll -= jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self._joint_log_likelihood(X), axis=1)]

    def _to_state(self):
        return {"classes": self.classes_.tolist(), "theta": self.theta_.tolist(),
                "var": self.var_.tolist(), "prior": self.class_prior_.tolist(),
                "epsilon": self.epsilon_, "n_features_in": self.n_features_in_}

    def _from_state(self, state):
        self.classes_ = np.asarray(state["classes"])
        self.theta_ = np.asarray(state["theta"], dtype=float)
        self.var_ = np.asarray(state["var"], dtype=float)
        self.class_prior_ = np.asarray(state["prior"], dtype=float)
        self.epsilon_ = state["epsilon"]
        self.n_features_in_ = state["n_features_in"]
        return self
