"""Adversarial local regularizer: a patch critic trained with a gradient penalty."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .difftape import MLP, AdamState, Tape, adam_step, param_grads, second_order_input_grad_penalty, value_and_input_grad
from .errors import InvalidArgumentError, NumericalError
from .forward_models import InpaintModel, LinearOperator, RadonModel, SuperResModel
from .imagecore import PatchConfig, PatchSet, extract_patches, load_checkpoint, save_checkpoint, scatter_patch_gradients

log = logging.getLogger(__name__)


@dataclass
class Discriminator:
    """Critic ``D: R^{p^2} -> R`` (softplus MLP) and its parameters."""

    net: MLP
    params: dict
    final_gap: Optional[float] = None

    def __post_init__(self):
        if self.net.sizes[-1] != 1:
            raise InvalidArgumentError("discriminator must have a scalar output")
        if len(self.net.sizes) > 2 and self.net.activation not in ("softplus", "tanh", "sigmoid"):
            raise InvalidArgumentError("discriminator activations must be smooth")

    @property
    def dim(self) -> int:
        return self.net.sizes[0]

    def __call__(self, X) -> np.ndarray:
        return self.net(np.atleast_2d(X), self.params)[:, 0]

    def build(self, tape, x, params):
        return self.net.build(tape, x, params)

    def save(self, directory, extra_meta: Optional[dict] = None) -> None:
        meta = {"sizes": list(self.net.sizes), "activation": self.net.activation, "final_gap": self.final_gap}
        meta.update(extra_meta or {})
        save_checkpoint(directory, "alr", meta, self.params)

    @classmethod
    def load(cls, directory):
        _, meta, arrays = load_checkpoint(directory, kind="alr")
        return cls(MLP(tuple(meta["sizes"]), meta["activation"]), arrays, meta.get("final_gap")), meta


def make_discriminator(dim: int, hidden: Sequence[int] = (64, 64), seed: int = 0) -> Discriminator:
    net = MLP((dim, *hidden, 1), "softplus")
    return Discriminator(net, net.init(np.random.default_rng(seed), {}))


@dataclass(frozen=True)
class AlrTrainConfig:
    lam: float = 10.0
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidArgumentError("penalty weight must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidArgumentError("batch size must be >= 1 and steps >= 0")


def degraded_patch_source(observation, model: LinearOperator, cfg: PatchConfig) -> PatchSet:
    """Patches of the naive inversion of ``observation``."""
    if not isinstance(model, (SuperResModel, RadonModel, InpaintModel)):
        raise InvalidArgumentError(f"no naive inversion for {type(model).__name__}")
    return extract_patches(model.naive_inverse(observation), cfg)


def _vectors(p) -> np.ndarray:
    X = p.vectors if isinstance(p, PatchSet) else np.asarray(p, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def wgan_gp_objective(D: Discriminator, true, fake, lam: float = 10.0, seed=0, params=None):
    """Loss ``-(mean D(true) - mean D(fake) - lam * penalty)`` and its parameter gradients.

    The penalty is the mean of ``(||grad D(z)|| - 1)^2`` at ``z = a x + (1 - a) x~``
    with a fresh uniform ``a`` per pair.  ``seed`` may also be a Generator.
    """
    params = D.params if params is None else params
    Xt, Xf = _vectors(true), _vectors(fake)
    if Xt.shape[1] != Xf.shape[1] or Xt.shape[1] != D.dim:
        raise InvalidArgumentError(f"batch dims {Xt.shape[1]}, {Xf.shape[1]} vs discriminator dim {D.dim}")
    B = min(len(Xt), len(Xf))
    Xt, Xf = Xt[:B], Xf[:B]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    alpha = rng.uniform(size=(B, 1))
    Z = alpha * Xt + (1.0 - alpha) * Xf

    tape = Tape()
    dt = tape.sum(D.build(tape, tape.input(Xt), params))
    df = tape.sum(D.build(tape, tape.input(Xf), params))
    gap = tape.scale(tape.sub(dt, df), 1.0 / B)
    g_gap = param_grads(tape, tape.backward(gap), params)

    penalty, g_pen, _ = second_order_input_grad_penalty(D.build, params, Z)
    loss = -(float(gap.value) - lam * penalty)
    grads = {k: -g_gap[k] + lam * g_pen[k] for k in params}
    return loss, grads


def train_alr(true_patches, degraded_patches, cfg: AlrTrainConfig = AlrTrainConfig(), D: Optional[Discriminator] = None) -> Discriminator:
    """Minimize :func:`wgan_gp_objective` by Adam on fixed true/degraded pools."""
    Xt, Xf = _vectors(true_patches), _vectors(degraded_patches)
    if len(Xt) == 0 or len(Xf) == 0:
        raise InvalidArgumentError("both patch pools must be non-empty")
    if Xt.shape[1] != Xf.shape[1]:
        raise InvalidArgumentError(f"true patches have dim {Xt.shape[1]}, degraded {Xf.shape[1]}")
    D = make_discriminator(Xt.shape[1], cfg.hidden, cfg.seed) if D is None else D
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState(lr=cfg.lr, beta1=0.5, beta2=0.9)
    params = dict(D.params)
    for step in range(cfg.steps):
        it = rng.integers(len(Xt), size=cfg.batch_size)
        jf = rng.integers(len(Xf), size=cfg.batch_size)
        try:
            loss, grads = wgan_gp_objective(D, Xt[it], Xf[jf], cfg.lam, rng, params)
        except NumericalError as exc:
            raise NumericalError(f"critic training diverged at step {step}", checkpoint=params, step=step) from exc
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite critic loss at step {step}", checkpoint=params, step=step)
        params = adam_step(params, grads, state)
    out = Discriminator(D.net, params)
    out.final_gap = float(out(Xt).mean() - out(Xf).mean())
    log.debug("critic trained: gap %.4f", out.final_gap)
    return out


def _check(D: Discriminator, cfg: PatchConfig):
    if D.dim != cfg.dim:
        raise InvalidArgumentError(f"discriminator dim {D.dim} does not match patch dim {cfg.dim}")


def alr_value(D: Discriminator, image, cfg: PatchConfig, rng=None) -> float:
    _check(D, cfg)
    return float(D(extract_patches(image, cfg, rng=rng).vectors).mean())


def alr_value_and_grad(D: Discriminator, image, cfg: PatchConfig, rng=None):
    _check(D, cfg)
    ps = extract_patches(image, cfg, rng=rng)
    vals, g = value_and_input_grad(D.build, D.params, ps.vectors)
    N = len(ps)
    return float(vals.mean()), scatter_patch_gradients(g / N, np.shape(image), cfg, origins=ps.origins)


def alr_grad(D: Discriminator, image, cfg: PatchConfig, rng=None) -> np.ndarray:
    return alr_value_and_grad(D, image, cfg, rng)[1]
