"""MAP reconstruction, projected inpainting, Langevin sampling and closed-form Bayes oracles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp

from .difftape import AdamState, adam_step
from .errors import InvalidArgumentError, NumericalError
from .forward_models import Equality, InpaintModel, LinearOperator, data_grad, data_value
from .gmm import GmmModel
from .regularizers import Regularizer, check_gradient

log = logging.getLogger(__name__)

INIT_TAGS = ("naive", "fbp", "bicubic", "zero-fill", "zeros", "given")


@dataclass
class ReconProblem:
    forward: LinearOperator
    data_term: object
    regularizer: Optional[Regularizer] = None
    weight: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise InvalidArgumentError("regularization weight must be nonnegative")
        if self.weight > 0 and self.regularizer is None:
            raise InvalidArgumentError("positive weight without a regularizer")

    def objective_and_grad(self, x, y, rng=None):
        if isinstance(self.data_term, Equality):
            val, g = 0.0, np.zeros_like(x)
        else:
            val = data_value(self.data_term, self.forward, x, y)
            g = data_grad(self.data_term, self.forward, x, y)
        if self.weight > 0:
            rv, rg = self.regularizer.value_and_grad(x, rng)
            val += self.weight * rv
            g = g + self.weight * rg
        return val, g


@dataclass(frozen=True)
class MapConfig:
    iterations: int = 500
    lr: float = 1e-2
    init: str = "naive"
    seed: int = 0
    check_gradient: bool = True
    clip: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if self.init not in INIT_TAGS:
            raise InvalidArgumentError(f"unknown init {self.init!r}; choose from {INIT_TAGS}")


def _initial(problem: ReconProblem, y, init, x0):
    if init == "given" or x0 is not None:
        if x0 is None:
            raise InvalidArgumentError("init 'given' needs x0")
        return np.array(x0, dtype=np.float64)
    if init == "zeros":
        return np.zeros(problem.forward.in_shape)
    return problem.forward.naive_inverse(y)


def _validate(problem: ReconProblem, cfg):
    if cfg.check_gradient and problem.weight > 0:
        check_gradient(problem.regularizer)


def map_reconstruct(problem: ReconProblem, y, cfg: MapConfig = MapConfig(), x0=None):
    """Adam descent on ``D(F x, y) + weight * R(x)``; returns ``(x, objective trace)``."""
    if isinstance(problem.data_term, Equality):
        raise InvalidArgumentError("use inpaint_map for equality-constrained problems")
    _validate(problem, cfg)
    rng = np.random.default_rng(cfg.seed)
    x = _initial(problem, y, cfg.init, x0)
    state = AdamState(lr=cfg.lr)
    trace = []
    for it in range(cfg.iterations):
        val, g = problem.objective_and_grad(x, y, rng)
        if not (math.isfinite(val) and np.all(np.isfinite(g))):
            raise NumericalError(f"non-finite objective at iteration {it}", checkpoint=x, step=it)
        trace.append(val)
        x = adam_step(x, g, state)
        if cfg.clip:
            x = np.clip(x, 0.0, 1.0)
    return x, trace


def inpaint_map(problem: ReconProblem, y, mask, cfg: MapConfig = MapConfig(init="zero-fill"), x0=None):
    """Projected Adam on ``R``: after every step observed pixels are reset to ``y``."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise InvalidArgumentError("mask must be binary")
    obs = mask.astype(bool)
    y = np.asarray(y, dtype=np.float64)
    if problem.weight > 0:
        _validate(problem, cfg)
    x = np.where(obs, y, 0.0) if x0 is None else np.where(obs, y, np.asarray(x0, dtype=np.float64))
    if obs.all() or problem.weight == 0:
        return x
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    for it in range(cfg.iterations):
        val, g = problem.regularizer.value_and_grad(x, rng)
        if not (math.isfinite(val) and np.all(np.isfinite(g))):
            raise NumericalError(f"non-finite regularizer at iteration {it}", checkpoint=x, step=it)
        x = adam_step(x, np.where(obs, 0.0, g), state)
        if cfg.clip:
            x = np.clip(x, 0.0, 1.0)
        x = np.where(obs, y, x)
    return x


# ---------------------------------------------------------------------------
# Langevin sampling


@dataclass(frozen=True)
class UlaConfig:
    delta: float = 1e-4
    burn_in: int = 1000
    n_samples: int = 100
    thin: int = 10
    clip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError("step size must be positive")
        if self.n_samples < 1 or self.thin < 1 or self.burn_in < 0:
            raise InvalidArgumentError("n_samples and thin must be >= 1, burn_in >= 0")


def ula_sample(problem: ReconProblem, y, cfg: UlaConfig = UlaConfig(), x0=None) -> List[np.ndarray]:
    """Euler-Maruyama chain ``x <- x - delta grad U(x) + sqrt(2 delta) z``.

    ``U = D(F x, y) + weight R(x)``.  With an equality data term the drift is
    the prior part only and observed pixels are projected back onto ``y``
    after every step.
    """
    rng = np.random.default_rng(cfg.seed)
    y = np.asarray(y, dtype=np.float64)
    projected = isinstance(problem.data_term, Equality)
    if projected:
        if not isinstance(problem.forward, InpaintModel):
            raise InvalidArgumentError("equality-constrained sampling needs an inpainting operator")
        obs = problem.forward.mask.astype(bool)
    if x0 is None:
        x = np.where(obs, y, 0.5) if projected else problem.forward.naive_inverse(y)
    else:
        x = np.array(x0, dtype=np.float64)
    scale = math.sqrt(2.0 * cfg.delta)
    samples = []
    total = cfg.burn_in + cfg.n_samples * cfg.thin
    for step in range(1, total + 1):
        _, g = problem.objective_and_grad(x, y, rng)
        x = x - cfg.delta * g + scale * rng.standard_normal(x.shape)
        if cfg.clip:
            x = np.clip(x, 0.0, 1.0)
        if projected:
            x = np.where(obs, y, x)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"ULA state became non-finite at step {step}", step=step)
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            samples.append(x.copy())
    return samples


def posterior_stats(samples):
    S = np.asarray(samples, dtype=np.float64)
    if S.ndim < 1 or S.shape[0] < 2:
        raise InvalidArgumentError("need at least two samples")
    # shifting by one sample keeps constant pixels exactly constant
    d = S - S[0]
    return S[0] + d.mean(axis=0), d.std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# closed-form oracles


def _chol(A, what):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is singular or indefinite") from exc


def gmm_posterior(prior: GmmModel, F, sigma: float, y) -> GmmModel:
    """Posterior of ``x ~ prior`` given ``y = F x + N(0, sigma^2 I)``.

    Component weights are ``alpha_k N(y | F m_k, sigma^2 I + F Sigma_k F^T)``,
    normalized in the log domain.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if F.shape[1] != prior.dim or F.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"F {F.shape} incompatible with prior dim {prior.dim} and y {y.shape}")
    if not sigma > 0:
        raise InvalidArgumentError("sigma must be positive")
    s2 = sigma * sigma
    K, D = prior.K, prior.dim
    covs = np.empty((K, D, D))
    means = np.empty((K, D))
    logw = np.empty(K)
    FtF = F.T @ F / s2
    for k in range(K):
        Pk = linalg.cho_solve((prior.chols[k], True), np.eye(D))
        cf = _chol(FtF + Pk, f"posterior precision of component {k}")
        covs[k] = linalg.cho_solve(cf, np.eye(D))
        covs[k] = 0.5 * (covs[k] + covs[k].T)
        means[k] = linalg.cho_solve(cf, F.T @ y / s2 + Pk @ prior.means[k])
        S = s2 * np.eye(F.shape[0]) + F @ prior.covs[k] @ F.T
        cs = _chol(S, "marginal covariance")
        r = y - F @ prior.means[k]
        logdet = 2.0 * np.log(np.diag(cs[0])).sum()
        logw[k] = math.log(prior.weights[k]) - 0.5 * (r @ linalg.cho_solve(cs, r) + logdet + len(y) * math.log(2 * math.pi))
    w = np.exp(logw - logsumexp(logw))
    return GmmModel(w / w.sum(), means, covs)


def mmse_gaussian(m, Sigma, F, sigma: float, y) -> np.ndarray:
    """``m + Sigma F^T (F Sigma F^T + sigma^2 I)^{-1} (y - F m)``."""
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if Sigma.shape != (m.size, m.size) or F.shape != (y.size, m.size):
        raise InvalidArgumentError("dimension mismatch in mmse_gaussian")
    S = F @ Sigma @ F.T + sigma * sigma * np.eye(y.size)
    cf = _chol(S, "F Sigma F^T + sigma^2 I")
    return m + Sigma @ F.T @ linalg.cho_solve(cf, y - F @ m)


def _logcosh(z):
    return np.logaddexp(z, -z) - math.log(2.0)


def bimodal_1d_reference(y: float, eps2: float = 0.05**2, sigma2: float = 0.1) -> dict:
    """MAP, MMSE and posterior of the symmetric two-spike mixture denoising problem.

    Prior ``0.5 N(-1, eps2) + 0.5 N(1, eps2)``, identity forward map, noise
    variance ``sigma2``.
    """
    y = float(y)

    def objective(x):
        return (y - x) ** 2 / (2 * sigma2) + (x * x + 1) / (2 * eps2) - _logcosh(x / eps2)

    grid = np.linspace(min(-2.0, y - 1.0), max(2.0, y + 1.0), 20001)
    vals = objective(grid)
    i = int(np.argmin(vals))
    h = grid[1] - grid[0]
    res = optimize.minimize_scalar(objective, bounds=(grid[i] - h, grid[i] + h), method="bounded",
                                   options={"xatol": 1e-12})
    x_map = float(res.x) if res.fun <= vals[i] else float(grid[i])

    var = sigma2 * eps2 / (sigma2 + eps2)
    means = np.array([(eps2 * y + sigma2) / (eps2 + sigma2), (eps2 * y - sigma2) / (eps2 + sigma2)])
    eps = math.sqrt(eps2)
    loga = -math.log(2 * eps) + ((eps2 * y + np.array([sigma2, -sigma2])) ** 2 / (sigma2 * (eps2 + sigma2)) - 1.0) / (2 * eps2)
    w = np.exp(loga - logsumexp(loga))
    # closed-form MMSE, evaluated with the cosh/sinh terms in the log domain
    t = y / (eps2 + sigma2)
    log_pref = -logsumexp(loga) - math.log(eps * (eps2 + sigma2)) + (eps2 * y * y - sigma2) / (2 * sigma2 * (eps2 + sigma2))
    comb = eps2 * y * math.cosh(t) + sigma2 * math.sinh(t) if abs(t) < 700 else math.copysign(math.inf, t)
    mmse = math.exp(log_pref) * comb if math.isfinite(comb) else float(w @ means)
    return {"map": x_map, "mmse": mmse, "weights": w, "means": means, "var": var}


def bimodal_posterior_density(x, y: float, eps2: float = 0.05**2, sigma2: float = 0.1) -> np.ndarray:
    ref = bimodal_1d_reference(y, eps2, sigma2)
    x = np.asarray(x, dtype=np.float64)
    dens = 0.0
    for w, m in zip(ref["weights"], ref["means"]):
        dens = dens + w * np.exp(-0.5 * (x - m) ** 2 / ref["var"]) / math.sqrt(2 * math.pi * ref["var"])
    return dens
