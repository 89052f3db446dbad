"""Discrete optimal transport between patch measures.

Exact squared Wasserstein-2 by the transportation simplex, the semi-dual
(c-transform) formulation used by the Wasserstein patch prior, entropic
Sinkhorn in the log domain, a semi-unbalanced variant with a relaxed target
marginal, and the debiased Sinkhorn divergence.

Conventions: ``a`` and ``b`` are the source and target weights, ``C`` the
squared Euclidean cost.  Entropic plans are ``a_i b_k exp((phi_i + psi_k -
C_ik) / eps)`` so with uniform weights the constants ``eps log N`` and
``eps log M`` of the textbook iteration are absorbed in the weights.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InvalidArgumentError, NumericalError
from .imagecore import DiscreteMeasure, PatchConfig, extract_patches, scatter_patch_gradients

log = logging.getLogger(__name__)


def cost_matrix(X, Y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1] != Y.shape[1]:
        raise InvalidArgumentError(f"point dims differ: {X.shape[1]} vs {Y.shape[1]}")
    C = np.sum(X * X, 1)[:, None] + np.sum(Y * Y, 1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(C, 0.0)


def _measure(m) -> DiscreteMeasure:
    return m if isinstance(m, DiscreteMeasure) else DiscreteMeasure(m)


def _check_dims(mu: DiscreteMeasure, nu: DiscreteMeasure):
    if mu.dim != nu.dim:
        raise InvalidArgumentError(f"measures live in R^{mu.dim} and R^{nu.dim}")


# ---------------------------------------------------------------------------
# exact transport


@dataclass
class TransportResult:
    value: float
    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations: int

    def certificate(self, C, tol: float = 1e-9) -> bool:
        """Dual feasibility plus complementary slackness of ``(u, v)``."""
        red = C - self.u[:, None] - self.v[None, :]
        scale = max(1.0, float(np.abs(C).max()))
        feasible = red.min() >= -tol * scale
        slack = float(np.abs(red * self.plan).sum()) <= tol * scale
        return bool(feasible and slack)


def _tree_potentials(C, basis, m, n):
    adj_r = [[] for _ in range(m)]
    adj_c = [[] for _ in range(n)]
    for i, j in basis:
        adj_r[i].append(j)
        adj_c[j].append(i)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        side, idx = queue.popleft()
        if side == "r":
            for j in adj_r[idx]:
                if np.isnan(v[j]):
                    v[j] = C[idx, j] - u[idx]
                    queue.append(("c", j))
        else:
            for i in adj_c[idx]:
                if np.isnan(u[i]):
                    u[i] = C[i, idx] - v[idx]
                    queue.append(("r", i))
    if np.isnan(u).any() or np.isnan(v).any():
        raise NumericalError("transportation basis is not a spanning tree")
    return u, v, adj_r, adj_c


def _tree_path(adj_r, adj_c, start_row, end_col):
    """Edges of the unique tree path from a row node to a column node."""
    prev = {("r", start_row): None}
    queue = deque([("r", start_row)])
    target = ("c", end_col)
    while queue:
        node = queue.popleft()
        if node == target:
            break
        side, idx = node
        nbrs = [("c", j) for j in adj_r[idx]] if side == "r" else [("r", i) for i in adj_c[idx]]
        for nb in nbrs:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    edges = []
    node = target
    while prev[node] is not None:
        p = prev[node]
        edges.append((p[1], node[1]) if p[0] == "r" else (node[1], p[1]))
        node = p
    return edges[::-1]


def transport_simplex(a, b, C, max_iter: Optional[int] = None, tol: float = 1e-12) -> TransportResult:
    """Solve ``min <C, pi>`` over couplings of ``a`` and ``b`` exactly.

    Northwest-corner start followed by MODI pivots (most negative reduced
    cost, switching to the smallest-index rule after a run of degenerate
    pivots to rule out cycling).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    m, n = C.shape
    if a.shape != (m,) or b.shape != (n,):
        raise InvalidArgumentError("weights do not match the cost matrix")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise InvalidArgumentError("unbalanced marginals")

    plan = np.zeros((m, n))
    basis = []
    s, d = a.copy(), b.copy()
    i = j = 0
    while i < m and j < n:
        q = min(s[i], d[j])
        plan[i, j] = q
        basis.append((i, j))
        s[i] -= q
        d[j] -= q
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif s[i] <= d[j]:
            i += 1
        else:
            j += 1
    in_basis = np.zeros((m, n), dtype=bool)
    for cell in basis:
        in_basis[cell] = True

    max_iter = max_iter or 50 * m * n + 100
    scale = max(1.0, float(np.abs(C).max()))
    degenerate_run = 0
    for it in range(max_iter):
        u, v, adj_r, adj_c = _tree_potentials(C, basis, m, n)
        red = C - u[:, None] - v[None, :]
        red[in_basis] = 0.0
        if red.min() >= -tol * scale:
            break
        if degenerate_run > m + n:
            flat = np.flatnonzero(red.ravel() < -tol * scale)[0]
        else:
            flat = int(np.argmin(red))
        ei, ej = divmod(flat, n)
        path = _tree_path(adj_r, adj_c, ei, ej)
        minus = path[0::2]
        plus = path[1::2]
        theta_cell = min(minus, key=lambda c: (plan[c], c))
        theta = plan[theta_cell]
        degenerate_run = degenerate_run + 1 if theta <= 0 else 0
        for c in minus:
            plan[c] -= theta
        for c in plus:
            plan[c] += theta
        plan[ei, ej] += theta
        plan[theta_cell] = 0.0
        basis.remove(theta_cell)
        in_basis[theta_cell] = False
        basis.append((ei, ej))
        in_basis[ei, ej] = True
    else:
        raise NumericalError(f"transportation simplex did not terminate in {max_iter} pivots")
    plan = np.maximum(plan, 0.0)
    return TransportResult(float(np.sum(plan * C)), plan, u, v, it)


def w2_exact_small(mu, nu):
    """Exact ``W_2^2(mu, nu)`` and an optimal plan for oracle-sized problems.

    Zero-weight atoms are pruned before solving and reinserted as empty rows
    or columns of the plan.
    """
    mu, nu = _measure(mu), _measure(nu)
    _check_dims(mu, nu)
    if mu.size * nu.size > 10_000:
        raise InvalidArgumentError("exact solver is limited to N*M <= 1e4")
    C = cost_matrix(mu.points, nu.points)
    rows = np.flatnonzero(mu.weights > 0)
    cols = np.flatnonzero(nu.weights > 0)
    res = transport_simplex(mu.weights[rows], nu.weights[cols], C[np.ix_(rows, cols)])
    if not res.certificate(C[np.ix_(rows, cols)], tol=1e-8):
        raise NumericalError("transportation simplex returned a plan without an optimality certificate")
    plan = np.zeros(C.shape)
    plan[np.ix_(rows, cols)] = res.plan
    return res.value, plan


# ---------------------------------------------------------------------------
# semi-dual formulation


def c_transform(psi, X, Y):
    """``min_k ||x_i - y_k||^2 - psi_k`` and its argmin (smallest index on ties)."""
    psi = np.asarray(psi, dtype=np.float64).ravel()
    Y = np.asarray(Y, dtype=np.float64)
    if Y.size == 0:
        raise InvalidArgumentError("target measure is empty")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1 and (Y.ndim == 2 and Y.shape[1] == X.shape[0] and Y.shape[1] > 1)
    if single:
        X = X[None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim == 1:
        X = X[:, None]
    if psi.shape[0] != Y.shape[0]:
        raise InvalidArgumentError(f"psi has {psi.shape[0]} entries for {Y.shape[0]} target points")
    D = cost_matrix(X, Y) - psi[None, :]
    idx = np.argmin(D, axis=1)
    val = D[np.arange(D.shape[0]), idx]
    if single:
        return float(val[0]), int(idx[0])
    return val, idx


def semidual_objective(psi, mu, nu) -> float:
    """``sum_i a_i psi^c(x_i) + sum_k b_k psi_k``; a lower bound on ``W_2^2``."""
    mu, nu = _measure(mu), _measure(nu)
    vals, _ = c_transform(psi, mu.points, nu.points)
    return float(mu.weights @ vals + nu.weights @ np.asarray(psi, dtype=np.float64))


@dataclass
class SemidualResult:
    psi: np.ndarray
    objective: float
    history: list = field(default_factory=list)


def w2_semidual_ascent(mu, nu, steps: int = 10_000, seed: int = 0, lr: float = 1.0,
                       batch_size: Optional[int] = None, psi0=None, monitor_every: int = 0) -> SemidualResult:
    """Supergradient ascent on the semi-dual objective.

    Each step samples ``batch_size`` source points (all of them when None),
    moves ``psi`` along ``b - histogram(argmins)`` with step ``lr / sqrt(t)``
    and keeps a running average, which is the returned estimate.  A
    full-batch iterate whose supergradient vanishes is an exact maximizer
    strictly inside the optimal set; it is returned at once instead.
    """
    mu, nu = _measure(mu), _measure(nu)
    _check_dims(mu, nu)
    rng = np.random.default_rng(seed)
    M = nu.size
    psi = np.zeros(M) if psi0 is None else np.array(psi0, dtype=np.float64)
    avg = psi.copy()
    history = []
    for t in range(1, steps + 1):
        if batch_size is None or batch_size >= mu.size:
            X, w = mu.points, mu.weights
        else:
            idx = rng.choice(mu.size, size=batch_size, p=mu.weights)
            X, w = mu.points[idx], np.full(batch_size, 1.0 / batch_size)
        _, sigma = c_transform(psi, X, nu.points)
        g = nu.weights - np.bincount(sigma, weights=w, minlength=M)
        if X is mu.points and np.max(np.abs(g)) <= 1e-12:
            avg = psi
            break
        psi = psi + (lr / math.sqrt(t)) * g
        avg += (psi - avg) / (t + 1)
        if monitor_every and t % monitor_every == 0:
            history.append(semidual_objective(avg, mu, nu))
    return SemidualResult(avg, semidual_objective(avg, mu, nu), history)


@dataclass(frozen=True)
class WppConfig:
    patch: PatchConfig = PatchConfig()
    steps: int = 200
    lr: float = 1.0
    batch_size: Optional[int] = None
    max_reference: int = 10_000
    seed: int = 0


def _wpp_setup(image, nu, cfg: WppConfig, rng=None):
    nu = _measure(nu)
    if nu.dim != cfg.patch.dim:
        raise InvalidArgumentError(f"reference points of dim {nu.dim} for patches of dim {cfg.patch.dim}")
    ps = extract_patches(image, cfg.patch, rng=rng)
    return ps, DiscreteMeasure(ps.vectors), nu


def wpp_potential(image, nu, cfg: WppConfig, psi0=None) -> np.ndarray:
    _, mu, nu = _wpp_setup(image, nu, cfg)
    return w2_semidual_ascent(mu, nu, cfg.steps, cfg.seed, cfg.lr, cfg.batch_size, psi0).psi


def wpp_value(image, nu, cfg: WppConfig, psi=None) -> float:
    """Semi-dual objective at ``psi`` (computed by ascent when not given)."""
    _, mu, nu = _wpp_setup(image, nu, cfg)
    if psi is None:
        psi = w2_semidual_ascent(mu, nu, cfg.steps, cfg.seed, cfg.lr, cfg.batch_size).psi
    return semidual_objective(psi, mu, nu)


def wpp_grad(image, nu, cfg: WppConfig, psi=None) -> np.ndarray:
    """Image gradient from per-patch terms ``2 a_i (x_i - y_sigma(i))``."""
    ps, mu, nu = _wpp_setup(image, nu, cfg)
    if psi is None:
        psi = w2_semidual_ascent(mu, nu, cfg.steps, cfg.seed, cfg.lr, cfg.batch_size).psi
    _, sigma = c_transform(psi, mu.points, nu.points)
    g = 2.0 * mu.weights[:, None] * (mu.points - nu.points[sigma])
    return scatter_patch_gradients(g, np.shape(image), cfg.patch, origins=ps.origins)


# ---------------------------------------------------------------------------
# entropic transport


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic solver settings.

    ``entropy_ref`` only matters for finite ``rho``: ``"uniform"`` takes the
    entropy relative to ``a`` times the uniform law on the target support
    (the calibrated default), ``"target"`` relative to ``a (x) b``, which
    makes the reported value the exact minimum of the relaxed problem.
    Both agree when ``b`` is uniform.
    """

    eps: float
    rho: float = math.inf
    max_iter: int = 100_000
    tol: float = 1e-9
    entropy_ref: str = "uniform"

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidArgumentError("eps must be positive")
        if not self.rho > 0:
            raise InvalidArgumentError("rho must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if self.entropy_ref not in ("uniform", "target"):
            raise InvalidArgumentError(f"unknown entropy reference {self.entropy_ref!r}")

    @property
    def balanced(self) -> bool:
        return math.isinf(self.rho)


@dataclass
class DualPotentials:
    phi: np.ndarray
    psi: np.ndarray
    eps: float
    rho: float = math.inf
    n_iter: int = 0
    converged: bool = True


def _phi_update(psi, C, logb, eps):
    return -eps * logsumexp(logb[None, :] + (psi[None, :] - C) / eps, axis=1)


def _psi_lse(phi, C, loga, eps):
    return logsumexp(loga[:, None] + (phi[:, None] - C) / eps, axis=0)


def sinkhorn(mu, nu, cfg: SinkhornConfig, C=None) -> DualPotentials:
    """Log-domain Sinkhorn alternation.

    For finite ``rho`` the ``psi`` step is damped by ``eps*rho/(eps+rho)``
    and the entropy reference follows ``cfg.entropy_ref``.  Returned potentials are always expressed against ``a (x) b`` so
    :func:`plan_from_potentials` and :func:`sinkhorn_grad` need no mode
    switch.
    """
    mu, nu = _measure(mu), _measure(nu)
    _check_dims(mu, nu)
    C = cost_matrix(mu.points, nu.points) if C is None else C
    eps = cfg.eps
    with np.errstate(divide="ignore"):
        loga = np.log(mu.weights)
        logb = np.log(nu.weights)
    M = nu.size
    if cfg.balanced or cfg.entropy_ref == "target":
        ref = logb
        shift = np.zeros(M)
        damp = 1.0 if cfg.balanced else cfg.rho / (eps + cfg.rho)
    else:
        ref = np.full(M, -math.log(M))
        shift = np.log(M * nu.weights)
        damp = cfg.rho / (eps + cfg.rho)
    psi = np.zeros(M)
    phi = np.zeros(mu.size)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        phi = _phi_update(psi, C, ref, eps)
        new = -eps * damp * (_psi_lse(phi, C, loga, eps) - shift)
        if not np.all(np.isfinite(new)):
            raise NumericalError("non-finite Sinkhorn potential", step=it)
        # the plan ignores a constant shift of psi, so measure change modulo it
        delta = float(np.ptp(new - psi)) if not cfg.balanced else float(np.max(np.abs(new - psi)))
        psi = new
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        log.info("Sinkhorn stopped after %d iterations without reaching tol %.1e", it, cfg.tol)
    # express against the target weights b
    psi_b = psi + eps * (ref - logb)
    psi_b = np.where(np.isfinite(psi_b), psi_b, 0.0)
    phi = _phi_update(psi_b, C, logb, eps)
    return DualPotentials(phi, psi_b, eps, cfg.rho, it, converged)


def plan_from_potentials(phi, psi, C, eps, a=None, b=None) -> np.ndarray:
    """Entropic plan after a final ``phi`` update, so its rows sum to ``a``."""
    C = np.asarray(C, dtype=np.float64)
    N, M = C.shape
    a = np.full(N, 1.0 / N) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(M, 1.0 / M) if b is None else np.asarray(b, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logb = np.log(b)
    logits = logb[None, :] + (psi[None, :] - C) / eps
    return a[:, None] * softmax(logits, axis=1)


def _kl(p, q) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])) - p.sum() + q.sum())


def entropic_primal(plan, C, a, b, eps, rho=math.inf) -> float:
    """``<C, pi> + eps KL(pi | a (x) b) [+ rho KL(pi 1 | b)]``."""
    val = float(np.sum(plan * C)) + eps * _kl(plan, np.outer(a, b))
    if not math.isinf(rho):
        val += rho * _kl(plan.sum(axis=0), np.asarray(b, dtype=np.float64))
    return val


def sinkhorn_value(mu, nu, pots: DualPotentials, cfg: Optional[SinkhornConfig] = None) -> float:
    """Plug-in value of the entropic problem.

    Balanced: ``sum_i a_i phi_i + sum_k b_k psi_k`` with ``phi`` the
    c-transform-like update of ``psi``.  Relaxed: the primal objective of
    the plan induced by the potentials.
    """
    mu, nu = _measure(mu), _measure(nu)
    C = cost_matrix(mu.points, nu.points)
    eps = pots.eps if cfg is None else cfg.eps
    rho = pots.rho if cfg is None else cfg.rho
    with np.errstate(divide="ignore"):
        logb = np.log(nu.weights)
    phi = _phi_update(pots.psi, C, logb, eps)
    if math.isinf(rho):
        return float(mu.weights @ phi + nu.weights @ pots.psi)
    plan = plan_from_potentials(phi, pots.psi, C, eps, mu.weights, nu.weights)
    return entropic_primal(plan, C, mu.weights, nu.weights, eps, rho)


def sinkhorn_grad(mu_x, nu, pots: DualPotentials, cfg: Optional[SinkhornConfig] = None) -> np.ndarray:
    """Per-point gradient ``2 a_i sum_k P(k | i) (x_i - y_k)``.

    ``P(k | i)`` is the softmin over targets of ``C_ik - psi_k`` at
    temperature ``eps`` (weighted by ``b``).
    """
    mu, nu = _measure(mu_x), _measure(nu)
    C = cost_matrix(mu.points, nu.points)
    eps = pots.eps if cfg is None else cfg.eps
    with np.errstate(divide="ignore"):
        logb = np.log(nu.weights)
    P = softmax(logb[None, :] + (pots.psi[None, :] - C) / eps, axis=1)
    return 2.0 * mu.weights[:, None] * (mu.points - P @ nu.points)


@dataclass
class SemiUnbalancedResult:
    potentials: DualPotentials
    value: float
    grad: np.ndarray


def semi_unbalanced_sinkhorn(mu, nu, cfg: SinkhornConfig) -> SemiUnbalancedResult:
    if cfg.balanced:
        raise InvalidArgumentError("semi-unbalanced transport needs a finite rho")
    pots = sinkhorn(mu, nu, cfg)
    return SemiUnbalancedResult(pots, sinkhorn_value(mu, nu, pots, cfg), sinkhorn_grad(mu, nu, pots, cfg))


def entropic_w2(mu, nu, cfg: SinkhornConfig):
    """Solve and return ``(value, potentials)``."""
    pots = sinkhorn(mu, nu, cfg)
    return sinkhorn_value(mu, nu, pots, cfg), pots


def sinkhorn_divergence(mu, nu, eps: float, max_iter: int = 100_000, tol: float = 1e-9) -> float:
    """``W_eps(mu, nu) - (W_eps(mu, mu) + W_eps(nu, nu)) / 2``."""
    cfg = SinkhornConfig(eps, max_iter=max_iter, tol=tol)
    mu, nu = _measure(mu), _measure(nu)
    wxy, _ = entropic_w2(mu, nu, cfg)
    wxx, _ = entropic_w2(mu, mu, cfg)
    wyy, _ = entropic_w2(nu, nu, cfg)
    return wxy - 0.5 * (wxx + wyy)


# ---------------------------------------------------------------------------
# image-level entropic regularizer


@dataclass(frozen=True)
class EntropicPatchConfig:
    patch: PatchConfig = PatchConfig()
    sinkhorn: SinkhornConfig = SinkhornConfig(eps=1e-2, max_iter=1000, tol=1e-6)
    max_reference: int = 10_000
    seed: int = 0


def _reference(nu, cfg, rng):
    nu = _measure(nu)
    if nu.dim != cfg.patch.dim:
        raise InvalidArgumentError(f"reference points of dim {nu.dim} for patches of dim {cfg.patch.dim}")
    return nu.subsample(cfg.max_reference, rng)


def entropic_patch_value_and_grad(image, nu, cfg: EntropicPatchConfig, rng=None):
    """Entropic (or semi-unbalanced) patch-prior value and image gradient."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ref = _reference(nu, cfg, rng)
    ps = extract_patches(image, cfg.patch)
    mu = DiscreteMeasure(ps.vectors)
    pots = sinkhorn(mu, ref, cfg.sinkhorn)
    value = sinkhorn_value(mu, ref, pots, cfg.sinkhorn)
    g = sinkhorn_grad(mu, ref, pots, cfg.sinkhorn)
    return value, scatter_patch_gradients(g, np.shape(image), cfg.patch, origins=ps.origins)
