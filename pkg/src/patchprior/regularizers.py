"""Uniform regularizer handles used by the solvers.

Every handle exposes ``value_and_grad(x, rng)``.  ``frozen(x)`` returns a
deterministic variant (inner potentials fixed at ``x``) for derivative checks.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

import numpy as np

from . import alr as _alr
from . import flow as _flow
from . import gmm as _gmm
from . import ot as _ot
from .errors import InvalidArgumentError
from .imagecore import DiscreteMeasure, PatchConfig


class Regularizer:
    name = "regularizer"
    patch: Optional[PatchConfig] = None
    probe_shape: Optional[tuple] = None

    def value_and_grad(self, x, rng=None):
        raise NotImplementedError

    def value(self, x, rng=None) -> float:
        return self.value_and_grad(x, rng)[0]

    def grad(self, x, rng=None) -> np.ndarray:
        return self.value_and_grad(x, rng)[1]

    def frozen(self, x) -> "Regularizer":
        return self

    @property
    def patch_dim(self) -> Optional[int]:
        return None if self.patch is None else self.patch.dim


class EpllRegularizer(Regularizer):
    name = "epll"

    def __init__(self, model: _gmm.GmmModel, patch: PatchConfig):
        if model.dim != patch.dim:
            raise InvalidArgumentError(f"GMM dim {model.dim} vs patch dim {patch.dim}")
        self.model, self.patch = model, patch

    def value_and_grad(self, x, rng=None):
        return _gmm.epll_value_and_grad(self.model, x, self.patch, rng)


class PatchNRRegularizer(Regularizer):
    name = "patchnr"

    def __init__(self, model: _flow.FlowModel, patch: PatchConfig):
        if model.dim != patch.dim:
            raise InvalidArgumentError(f"flow dim {model.dim} vs patch dim {patch.dim}")
        self.model, self.patch = model, patch

    def value_and_grad(self, x, rng=None):
        return _flow.patchnr_value_and_grad(self.model, x, self.patch, rng)


class AlrRegularizer(Regularizer):
    name = "alr"

    def __init__(self, D: _alr.Discriminator, patch: PatchConfig):
        if D.dim != patch.dim:
            raise InvalidArgumentError(f"discriminator dim {D.dim} vs patch dim {patch.dim}")
        self.D, self.patch = D, patch

    def value_and_grad(self, x, rng=None):
        return _alr.alr_value_and_grad(self.D, x, self.patch, rng)


class WppRegularizer(Regularizer):
    """Semi-dual W2 patch prior; ``psi`` is warm-started across calls."""

    name = "wpp"

    def __init__(self, reference: DiscreteMeasure, cfg: _ot.WppConfig, psi=None):
        if reference.dim != cfg.patch.dim:
            raise InvalidArgumentError(f"reference dim {reference.dim} vs patch dim {cfg.patch.dim}")
        self.reference, self.cfg, self.patch = reference, cfg, cfg.patch
        self.psi = None if psi is None else np.asarray(psi, dtype=np.float64)
        self._fixed = psi is not None

    def _ref(self, rng):
        if self.reference.size <= self.cfg.max_reference or self._fixed:
            return self.reference
        rng = np.random.default_rng(self.cfg.seed) if rng is None else rng
        return self.reference.subsample(self.cfg.max_reference, rng)

    def value_and_grad(self, x, rng=None):
        ref = self._ref(rng)
        psi = self.psi
        if not self._fixed:
            if psi is None or psi.shape[0] != ref.size:
                psi = None
            psi = _ot.wpp_potential(x, ref, self.cfg, psi0=psi)
            self.psi = psi
        return _ot.wpp_value(x, ref, self.cfg, psi), _ot.wpp_grad(x, ref, self.cfg, psi)

    def frozen(self, x):
        ref = self._ref(None)
        psi = _ot.wpp_potential(x, ref, self.cfg, psi0=None)
        return WppRegularizer(ref, self.cfg, psi)


class EntropicRegularizer(Regularizer):
    """Sinkhorn patch prior (balanced, or semi-unbalanced for finite ``rho``)."""

    name = "wpp_eps"

    def __init__(self, reference: DiscreteMeasure, cfg: _ot.EntropicPatchConfig):
        if reference.dim != cfg.patch.dim:
            raise InvalidArgumentError(f"reference dim {reference.dim} vs patch dim {cfg.patch.dim}")
        self.reference, self.cfg, self.patch = reference, cfg, cfg.patch
        if not cfg.sinkhorn.balanced:
            self.name = "wpp_eps_rho"

    def value_and_grad(self, x, rng=None):
        return _ot.entropic_patch_value_and_grad(x, self.reference, self.cfg, rng)

    def frozen(self, x):
        tight = replace(self.cfg.sinkhorn, tol=1e-12, max_iter=max(self.cfg.sinkhorn.max_iter, 100_000))
        return EntropicRegularizer(self.reference, replace(self.cfg, sinkhorn=tight))


class QuadraticRegularizer(Regularizer):
    """``0.5 (x - m)^T P (x - m)`` on row-major flattened images (scalar or matrix ``P``)."""

    name = "quadratic"

    def __init__(self, mean, precision=1.0):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.precision = np.asarray(precision, dtype=np.float64)
        self.probe_shape = self.mean.shape

    def value_and_grad(self, x, rng=None):
        r = (np.asarray(x, dtype=np.float64) - self.mean).ravel()
        Pr = self.precision * r if self.precision.ndim == 0 else self.precision @ r
        return 0.5 * float(r @ Pr), Pr.reshape(self.mean.shape)


def check_gradient(reg: Regularizer, probe=None, rel: float = 1e-3, seed: int = 0, n_dirs: int = 2, h: float = 1e-5):
    """Central-difference directional check; returns the worst relative error.

    Raises :class:`InvalidArgumentError` when it exceeds ``rel``.
    """
    rng = np.random.default_rng(seed)
    if probe is None:
        side = 10 if reg.patch is None else max(10, reg.patch.size + 2)
        probe = rng.uniform(0.2, 0.8, size=reg.probe_shape or (side, side))
    probe = np.asarray(probe, dtype=np.float64)
    fixed = reg.frozen(probe)
    _, g = fixed.value_and_grad(probe, np.random.default_rng(seed))
    worst = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(probe.shape)
        fp = fixed.value(probe + h * v, np.random.default_rng(seed))
        fm = fixed.value(probe - h * v, np.random.default_rng(seed))
        fd = (fp - fm) / (2 * h)
        an = float(np.sum(g * v))
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
        worst = max(worst, err)
    if worst > rel or not math.isfinite(worst):
        raise InvalidArgumentError(f"{reg.name} gradient fails the finite-difference check (rel. error {worst:.2e})")
    return worst
