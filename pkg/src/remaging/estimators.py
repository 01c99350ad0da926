"""scikit-learn style wrappers around the Laplace-transform comparisons.

``LaplaceTransformer`` maps nonnegative samples to ``exp(-lambda v)``
features; ``StableLaplaceFit`` fits ``(alpha, K)`` of a one-sided stable
law from ``-log E exp(-lambda V) = K lambda^alpha``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = ["LaplaceTransformer", "StableLaplaceFit"]


class LaplaceTransformer(TransformerMixin, BaseEstimator):
    """Features ``exp(-lambda v)`` for every ``lambda`` in ``lambdas``.

    Parameters
    ----------
    lambdas : sequence of float
        Transform arguments, all nonnegative.
    scale : float
        Samples are divided by ``scale`` first (e.g. ``g_N``).
    """

    def __init__(self, lambdas=(0.5, 1.0, 2.0), scale=1.0):
        self.lambdas = lambdas
        self.scale = scale

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=False)
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or np.any(lam < 0):
            raise ValueError("lambdas must be a 1-d nonnegative sequence")
        self.lambdas_ = lam
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "lambdas_")
        v = check_array(X, ensure_2d=False).reshape(-1) / self.scale
        return np.exp(-np.outer(v, self.lambdas_))


class StableLaplaceFit(BaseEstimator):
    """Least-squares fit of ``log(-log L(lambda)) = log K + alpha log lambda``.

    ``L`` is the empirical Laplace transform of the samples.  Points where
    ``L`` is within ``eps`` of 0 or 1 are dropped.

    Attributes
    ----------
    alpha_, K_ : float
        Fitted index and scale.
    laplace_ : ndarray
        Empirical transform at ``lambdas``.
    """

    def __init__(self, lambdas=(0.25, 0.5, 1.0, 2.0, 4.0), eps=1e-12):
        self.lambdas = lambdas
        self.eps = eps

    def fit(self, X, y=None):
        v = check_array(X, ensure_2d=False).reshape(-1)
        lam = np.asarray(self.lambdas, dtype=float)
        L = np.exp(-np.outer(v, lam)).mean(axis=0)
        ok = (L > self.eps) & (L < 1 - self.eps)
        if ok.sum() < 2:
            raise ValueError("fewer than two informative lambdas")
        A = np.column_stack([np.ones(ok.sum()), np.log(lam[ok])])
        coef, *_ = np.linalg.lstsq(A, np.log(-np.log(L[ok])), rcond=None)
        self.K_ = float(np.exp(coef[0]))
        self.alpha_ = float(coef[1])
        self.laplace_ = L
        self.n_features_in_ = 1
        return self

    def predict(self, lambdas):
        """Fitted Laplace transform ``exp(-K lambda^alpha)``."""
        check_is_fitted(self, "alpha_")
        lam = np.asarray(lambdas, dtype=float)
        return np.exp(-self.K_ * lam**self.alpha_)

    def score(self, X, y=None):
        """Negative maximal gap between the empirical and fitted transforms."""
        check_is_fitted(self, "alpha_")
        v = check_array(X, ensure_2d=False).reshape(-1)
        lam = np.asarray(self.lambdas, dtype=float)
        L = np.exp(-np.outer(v, lam)).mean(axis=0)
        return -float(np.max(np.abs(L - self.predict(lam))))
