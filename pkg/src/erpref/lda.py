"""Linear discriminant analysis with Ledoit-Wolf covariance shrinkage."""

from __future__ import annotations

import io
import struct
from numbers import Real

import numpy as np
from scipy import linalg
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

MODEL_MAGIC = b"SLDA"
MODEL_VERSION = 1


def empirical_covariance(X, assume_centered=False):
    """Biased (1/n) sample covariance."""
    X = np.asarray(X, dtype=np.float64)
    if not assume_centered:
        X = X - X.mean(axis=0)
    return X.T @ X / X.shape[0]


def ledoit_wolf_shrinkage(X, assume_centered=False) -> float:
    """Optimal shrinkage intensity toward ``mu * I`` (Ledoit & Wolf, 2004).

    With ``S`` the 1/n covariance of the (centered) rows ``x_k``:

    * ``mu  = tr(S) / d``
    * ``d2  = ||S - mu I||^2 / d``
    * ``b2_ = sum_k ||x_k x_k^T - S||^2 / (d n^2)``
    * ``lambda = min(b2_, d2) / d2``

    The per-sample sum uses ``sum_k ||x_k x_k^T - S||^2 = sum_k ||x_k||^4 - n ||S||^2``
    so no d x d matrix per sample is formed.
    """
    X = _check_data(X)
    if not assume_centered:
        X = X - X.mean(axis=0)
    n, d = X.shape
    S = X.T @ X / n
    mu = np.trace(S) / d
    s_norm2 = np.sum(S * S)
    d2 = max((s_norm2 - d * mu * mu) / d, 0.0)
    sq_norms = np.einsum("ij,ij->i", X, X)
    b2_bar = max((np.sum(sq_norms**2) - n * s_norm2) / (d * n * n), 0.0)
    if d2 == 0.0:
        return 0.0
    return float(min(min(b2_bar, d2) / d2, 1.0))


def ledoit_wolf(X, assume_centered=False):
    """Shrunk covariance ``(1 - lambda) S + lambda mu I`` and its intensity.

    Parameters
    ----------
    X : array-like of shape (n_samples, n_features)
        Observations. Centered at the column means unless ``assume_centered``.
    assume_centered : bool, default=False
        Treat ``X`` as already centered.

    Returns
    -------
    covariance : ndarray of shape (n_features, n_features)
    shrinkage : float
        Intensity in [0, 1].
    """
    X = _check_data(X)
    if not assume_centered:
        X = X - X.mean(axis=0)
    d = X.shape[1]
    lam = ledoit_wolf_shrinkage(X, assume_centered=True)
    S = empirical_covariance(X, assume_centered=True)
    mu = np.trace(S) / d
    shrunk = (1.0 - lam) * S
    shrunk.flat[:: d + 1] += lam * mu
    return shrunk, lam


def _check_data(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D data matrix, got shape {X.shape}")
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {X.shape[0]}")
    if X.shape[1] < 1:
        raise ValueError("need at least 1 feature")
    if not np.all(np.isfinite(X)):
        raise ValueError("data contain non-finite values")
    return X


class ShrinkageLDA(ClassifierMixin, BaseEstimator):
    """Gaussian shared-covariance classifier with a shrunk covariance.

    The covariance is estimated from within-class-centered data pooled over
    classes, using the 1/n convention, and shrunk toward a scaled identity.

    Parameters
    ----------
    shrinkage : "auto" or float, default="auto"
        ``"auto"`` picks the Ledoit-Wolf intensity; a float in [0, 1] fixes it.
    priors : array-like of shape (n_classes,), optional
        Class priors. Empirical class frequencies by default.
    min_class_samples : int, default=2
        Smallest accepted class size. Leave-one-out folds lower it to 1.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    means_ : ndarray of shape (n_classes, n_features)
    covariance_ : ndarray of shape (n_features, n_features)
    shrinkage_ : float
    priors_ : ndarray of shape (n_classes,)
    coef_ : ndarray of shape (n_classes, n_features)
        ``Sigma^-1 mu_k`` per class.
    intercept_ : ndarray of shape (n_classes,)
    """

    def __init__(self, shrinkage="auto", priors=None, min_class_samples=2):
        self.shrinkage = shrinkage
        self.priors = priors
        self.min_class_samples = min_class_samples

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        counts = np.bincount(y_idx, minlength=n_classes)
        floor = max(1, int(self.min_class_samples))
        if counts.min() < floor:
            bad = self.classes_[counts < floor]
            raise ValueError(f"classes with fewer than {floor} samples: {list(bad)}")
        n, d = X.shape
        self.n_features_in_ = d
        self.means_ = np.stack([X[y_idx == k].mean(axis=0) for k in range(n_classes)])
        Z = X - self.means_[y_idx]
        if self.shrinkage == "auto":
            cov, lam = ledoit_wolf(Z, assume_centered=True)
        elif isinstance(self.shrinkage, Real) and 0.0 <= self.shrinkage <= 1.0:
            lam = float(self.shrinkage)
            cov = empirical_covariance(Z, assume_centered=True)
            mu = np.trace(cov) / d
            cov = (1.0 - lam) * cov
            cov.flat[:: d + 1] += lam * mu
        else:
            raise ValueError(f"shrinkage must be 'auto' or a float in [0, 1], got {self.shrinkage!r}")
        self.covariance_ = cov
        self.shrinkage_ = lam
        if self.priors is None:
            self.priors_ = counts / n
        else:
            priors = np.asarray(self.priors, dtype=np.float64)
            if priors.shape != (n_classes,) or np.any(priors <= 0):
                raise ValueError("priors must be positive, one per class")
            self.priors_ = priors / priors.sum()
        self._set_discriminant()
        return self

    def _set_discriminant(self):
        try:
            self.cholesky_ = linalg.cholesky(self.covariance_, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError(
                "shrunk covariance is singular; data are degenerate"
            ) from exc
        coef = linalg.cho_solve((self.cholesky_, True), self.means_.T).T
        self.coef_ = coef
        self.intercept_ = -0.5 * np.einsum("kd,kd->k", self.means_, coef) + np.log(self.priors_)

    def _check_X(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.n_features_in_}"
            )
        return X

    def decision_function(self, X):
        """Discriminant scores ``x^T S^-1 mu_k - mu_k^T S^-1 mu_k / 2 + log pi_k``.

        Always returns shape (n_samples, n_classes), also for two classes.
        """
        X = self._check_X(X)
        return X @ self.coef_.T + self.intercept_

    def predict_log_proba(self, X):
        return log_softmax(self.decision_function(X), axis=1)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        """Serialize a fitted model.

        Layout (little-endian): ``b"SLDA"``, u32 version, u32 n_features,
        u32 n_classes, f64 shrinkage, n_classes x f64 class labels,
        n_classes x n_features f64 means (row-major), n_features x n_features
        f64 lower Cholesky factor of the covariance (row-major),
        n_classes x f64 priors.
        """
        check_is_fitted(self, "coef_")
        d = self.n_features_in_
        k = len(self.classes_)
        out = io.BytesIO()
        out.write(MODEL_MAGIC)
        out.write(struct.pack("<IIId", MODEL_VERSION, d, k, self.shrinkage_))
        for arr in (np.asarray(self.classes_, dtype=np.float64), self.means_,
                    self.cholesky_, self.priors_):
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ShrinkageLDA":
        if buf[:4] != MODEL_MAGIC:
            raise ValueError("not a serialized ShrinkageLDA model")
        version, d, k, lam = struct.unpack_from("<IIId", buf, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"model version mismatch: {version} != {MODEL_VERSION}")
        pos = 4 + struct.calcsize("<IIId")
        expected = pos + 8 * (k + k * d + d * d + k)
        if len(buf) != expected:
            raise ValueError("model blob length inconsistent with its header")

        def take(count):
            nonlocal pos
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            return arr

        model = cls()
        classes = take(k)
        model.classes_ = classes.astype(np.int64) if np.all(classes == np.round(classes)) else classes
        model.means_ = take(k * d).reshape(k, d)
        model.cholesky_ = take(d * d).reshape(d, d)
        model.priors_ = take(k)
        model.covariance_ = model.cholesky_ @ model.cholesky_.T
        model.shrinkage_ = lam
        model.n_features_in_ = d
        model.coef_ = linalg.cho_solve((model.cholesky_, True), model.means_.T).T
        model.intercept_ = (
            -0.5 * np.einsum("kd,kd->k", model.means_, model.coef_) + np.log(model.priors_)
        )
        return model
