"""Gaussian mixture patch prior: EM fitting, log-densities and the EPLL regularizer."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import InvalidArgumentError, NumericalError
from .imagecore import PatchConfig, PatchSet, extract_patches, load_checkpoint, save_checkpoint, scatter_patch_gradients

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmModel:
    """Mixture weights ``(K,)``, means ``(K, D)`` and covariances ``(K, D, D)``.

    Lower Cholesky factors and log-determinants are computed once at
    construction; building a model with a non-SPD covariance raises
    :class:`NumericalError`.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    chols: np.ndarray = None
    logdets: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.covs, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        K, D = m.shape
        if w.shape != (K,) or c.shape != (K, D, D):
            raise InvalidArgumentError(
                f"inconsistent GMM shapes: weights {w.shape}, means {m.shape}, covs {c.shape}"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError("mixture weights must be positive and sum to 1")
        chols = np.empty_like(c)
        for k in range(K):
            try:
                chols[k] = linalg.cholesky(c[k], lower=True)
            except linalg.LinAlgError as exc:
                raise NumericalError(f"covariance of component {k} is not positive definite") from exc
        logdets = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
        for name, val in (("weights", w), ("means", m), ("covs", c), ("chols", chols), ("logdets", logdets)):
            object.__setattr__(self, name, val)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def save(self, directory, extra_meta: Optional[dict] = None) -> None:
        meta = {"K": self.K, "dim": self.dim}
        meta.update(extra_meta or {})
        save_checkpoint(directory, "gmm", meta, {"weights": self.weights, "means": self.means, "covs": self.covs})

    @classmethod
    def load(cls, directory):
        _, meta, arrays = load_checkpoint(directory, kind="gmm")
        return cls(arrays["weights"], arrays["means"], arrays["covs"]), meta


@dataclass(frozen=True)
class EmConfig:
    K: int = 50
    max_iters: int = 200
    tol: float = 1e-6
    cov_floor: Optional[float] = None  # None: 1e-6 * trace(global cov) / D
    init: str = "kmeans++"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.cov_floor is not None and self.cov_floor < 0:
            raise InvalidArgumentError("covariance floor must be nonnegative")
        if self.init not in ("kmeans++", "random"):
            raise InvalidArgumentError(f"unknown init scheme {self.init!r}")


def gaussian_logpdf(x, mean, chol) -> np.ndarray:
    """Log-density of ``N(mean, L L^T)`` at ``x`` given the lower Cholesky factor ``L``.

    ``x`` may be a single vector or an ``(n, D)`` batch.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    chol = np.asarray(chol, dtype=np.float64)
    D = mean.shape[-1]
    if x.shape[-1] != D or chol.shape != (D, D):
        raise InvalidArgumentError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, chol {chol.shape}")
    diff = np.atleast_2d(x - mean)
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (D * LOG_2PI + logdet + np.sum(z * z, axis=0))
    return out if x.ndim > 1 else out[0]


def component_logpdfs(model: GmmModel, X) -> np.ndarray:
    """``(n, K)`` matrix of ``log alpha_k + log phi(x_i | m_k, Sigma_k)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise InvalidArgumentError(f"points of dim {X.shape[1]} for a GMM of dim {model.dim}")
    out = np.empty((X.shape[0], model.K))
    for k in range(model.K):
        z = linalg.solve_triangular(model.chols[k], (X - model.means[k]).T, lower=True)
        out[:, k] = -0.5 * (model.dim * LOG_2PI + model.logdets[k] + np.sum(z * z, axis=0))
    return out + np.log(model.weights)[None, :]


def gmm_logpdf(model: GmmModel, x) -> np.ndarray:
    """``log sum_k alpha_k phi(x | m_k, Sigma_k)`` evaluated by log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    out = logsumexp(component_logpdfs(model, x), axis=1)
    return out if x.ndim > 1 else out[0]


def responsibilities(model: GmmModel, X) -> np.ndarray:
    lp = component_logpdfs(model, X)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _as_samples(patches) -> np.ndarray:
    X = patches.vectors if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def em_fit(patches, cfg: EmConfig, seed: Optional[int] = None, history: Optional[list] = None) -> GmmModel:
    """Fit a GMM by expectation-maximization.

    Initialization seeds means by k-means++, sets every covariance to the
    global sample covariance and uses uniform weights.  ``cov_floor`` is added
    to each covariance diagonal after the M-step.  If ``history`` is a list,
    the mean observed-data log-likelihood of each visited model is appended.
    """
    X = _as_samples(patches)
    n, D = X.shape
    K = cfg.K
    if K > n:
        raise InvalidArgumentError(f"K={K} exceeds the number of samples {n}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    glob_cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    floor = cfg.cov_floor
    if floor is None:
        floor = 1e-6 * np.trace(glob_cov) / D
        if floor <= 0:
            floor = 1e-12
    eye = np.eye(D)

    if cfg.init == "kmeans++":
        means = _kmeanspp(X, K, rng)
    else:
        means = X[rng.choice(n, size=K, replace=False)]
    covs = np.repeat((glob_cov + floor * eye)[None], K, axis=0)
    model = GmmModel(np.full(K, 1.0 / K), means, covs)

    prev = None
    for it in range(cfg.max_iters):
        # E-step in the log domain
        lp = component_logpdfs(model, X)
        ll_i = logsumexp(lp, axis=1)
        loglik = float(ll_i.mean())
        if history is not None:
            history.append(loglik)
        if prev is not None and abs(loglik - prev) <= cfg.tol * max(abs(prev), 1e-12):
            break
        prev = loglik
        beta = np.exp(lp - ll_i[:, None])

        # M-step
        nk = beta.sum(axis=0)
        weights = nk / n
        safe = np.maximum(nk, np.finfo(float).tiny)  # empty components are re-seeded below
        means = (beta.T @ X) / safe[:, None]
        covs = np.empty((K, D, D))
        for k in range(K):
            diff = X - means[k]
            covs[k] = (beta[:, k, None] * diff).T @ diff / safe[k] + floor * eye
            covs[k] = 0.5 * (covs[k] + covs[k].T)

        collapsed = np.flatnonzero(weights < 1e-8)
        if collapsed.size:
            warnings.warn(f"EM: re-initializing collapsed components {collapsed.tolist()}", RuntimeWarning)
            for k in collapsed:
                means[k] = X[rng.integers(n)]
                covs[k] = glob_cov + floor * eye
                weights[k] = 1.0 / n
            weights /= weights.sum()
            prev = None
        model = GmmModel(weights, means, covs)
    else:
        if history is not None:
            history.append(float(gmm_logpdf(model, X).mean()))
    log.debug("EM finished after %d iterations", it + 1)
    return model


def _patch_set(image, model: GmmModel, cfg: PatchConfig, rng=None) -> PatchSet:
    if model.dim != cfg.dim:
        raise InvalidArgumentError(f"GMM dim {model.dim} does not match patch dim {cfg.dim}")
    return extract_patches(image, cfg, rng=rng)


def epll_value(model: GmmModel, image, cfg: PatchConfig, rng=None) -> float:
    """Negative mean GMM log-density over the image patches."""
    ps = _patch_set(image, model, cfg, rng)
    return float(-gmm_logpdf(model, ps.vectors).mean())


def epll_value_and_grad(model: GmmModel, image, cfg: PatchConfig, rng=None):
    ps = _patch_set(image, model, cfg, rng)
    X = ps.vectors
    lp = component_logpdfs(model, X)
    ll = logsumexp(lp, axis=1)
    gamma = np.exp(lp - ll[:, None])
    g = np.zeros_like(X)
    for k in range(model.K):
        sol = linalg.cho_solve((model.chols[k], True), (X - model.means[k]).T).T
        g += gamma[:, k, None] * sol
    N = X.shape[0]
    grad = scatter_patch_gradients(g / N, np.shape(image), cfg, origins=ps.origins)
    return float(-ll.mean()), grad


def epll_grad(model: GmmModel, image, cfg: PatchConfig, rng=None) -> np.ndarray:
    return epll_value_and_grad(model, image, cfg, rng)[1]
