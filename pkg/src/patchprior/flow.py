"""Affine-coupling normalizing flow on patch space and the patchNR regularizer.

Layer ``k`` maps ``z -> x`` by first permuting ``z``, splitting it into
``(z1, z2)`` and setting ``x = (z1, z2 * exp(s(z1)) + t(z1))`` where the
scale output is soft-clamped to ``c * tanh(s / c)``.  The latent law is the
standard normal, so ``-log p(x) = 0.5 ||T^{-1} x||^2 - log|det grad T^{-1}(x)|``
up to the constant ``D/2 log(2 pi)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .difftape import MLP, AdamState, Tape, adam_step, param_grads
from .errors import InvalidArgumentError, NumericalError
from .imagecore import PatchConfig, PatchSet, extract_patches, load_checkpoint, save_checkpoint, scatter_patch_gradients

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class CouplingLayer:
    perm: np.ndarray
    d1: int
    d2: int
    s_net: MLP
    t_net: MLP
    clamp: float = 2.0

    def __post_init__(self):
        if self.clamp <= 0:
            raise InvalidArgumentError("clamp bound must be positive")
        if self.s_net.sizes[0] != self.d1 or self.s_net.sizes[-1] != self.d2:
            raise InvalidArgumentError("scale network does not match the split")
        if self.t_net.sizes[0] != self.d1 or self.t_net.sizes[-1] != self.d2:
            raise InvalidArgumentError("translation network does not match the split")


@dataclass
class FlowModel:
    """Ordered coupling layers and their parameter dict."""

    layers: List[CouplingLayer]
    params: dict
    dim: int
    final_loss: Optional[float] = None
    meta: dict = field(default_factory=dict)

    # -- plain numpy evaluation ------------------------------------------------

    def _scale(self, layer, h):
        s = layer.s_net(h, self.params)
        return layer.clamp * np.tanh(s / layer.clamp)

    def forward(self, z) -> np.ndarray:
        x = np.atleast_2d(np.asarray(z, dtype=np.float64))
        self._check(x)
        for layer in self.layers:
            x = x[:, layer.perm]
            x1, x2 = x[:, : layer.d1], x[:, layer.d1 :]
            x2 = x2 * np.exp(self._scale(layer, x1)) + layer.t_net(x1, self.params)
            x = np.concatenate([x1, x2], axis=1)
        return x

    def inverse(self, x):
        """Latent codes ``(B, D)`` and ``log|det grad T^{-1}(x)|`` per row."""
        z = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check(z)
        logdet = np.zeros(z.shape[0])
        for layer in reversed(self.layers):
            z1, z2 = z[:, : layer.d1], z[:, layer.d1 :]
            s = self._scale(layer, z1)
            z2 = (z2 - layer.t_net(z1, self.params)) * np.exp(-s)
            logdet -= s.sum(axis=1)
            z = np.concatenate([z1, z2], axis=1)[:, np.argsort(layer.perm)]
        return z, logdet

    def layer_logdets(self, x) -> np.ndarray:
        """Per-layer contributions ``(B, n_layers)`` in inverse-pass order."""
        z = np.atleast_2d(np.asarray(x, dtype=np.float64))
        parts = []
        for layer in reversed(self.layers):
            z1, z2 = z[:, : layer.d1], z[:, layer.d1 :]
            s = self._scale(layer, z1)
            z2 = (z2 - layer.t_net(z1, self.params)) * np.exp(-s)
            parts.append(-s.sum(axis=1))
            z = np.concatenate([z1, z2], axis=1)[:, np.argsort(layer.perm)]
        return np.stack(parts, axis=1)

    def log_density(self, x) -> np.ndarray:
        z, logdet = self.inverse(x)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI + logdet

    def _check(self, x):
        if x.shape[1] != self.dim:
            raise InvalidArgumentError(f"input of dim {x.shape[1]} for a flow of dim {self.dim}")

    # -- taped inverse -----------------------------------------------------------

    def build_inverse(self, tape: Tape, x, params=None):
        """Record the inverse pass; returns ``(z node, logdet node (B, 1))``."""
        params = self.params if params is None else params
        z = x
        logdet = None
        for layer in reversed(self.layers):
            z1 = tape.take(z, np.arange(layer.d1))
            z2 = tape.take(z, np.arange(layer.d1, layer.d1 + layer.d2))
            s_raw = layer.s_net.build(tape, z1, params)
            s = tape.scale(tape.tanh(tape.scale(s_raw, 1.0 / layer.clamp)), layer.clamp)
            t = layer.t_net.build(tape, z1, params)
            z2 = tape.mul(tape.sub(z2, t), tape.exp(tape.scale(s, -1.0)))
            z = tape.take(tape.concat([z1, z2]), np.argsort(layer.perm))
            ld = tape.scale(tape.sum(s, axis=1, keepdims=True), -1.0)
            logdet = ld if logdet is None else tape.add(logdet, ld)
        return z, logdet

    # -- persistence -----------------------------------------------------------------

    def save(self, directory, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "dim": self.dim,
            "final_loss": self.final_loss,
            "layers": [
                {
                    "perm": layer.perm.tolist(),
                    "d1": layer.d1,
                    "d2": layer.d2,
                    "s_sizes": list(layer.s_net.sizes),
                    "t_sizes": list(layer.t_net.sizes),
                    "activation": layer.s_net.activation,
                    "clamp": layer.clamp,
                    "s_prefix": layer.s_net.prefix,
                    "t_prefix": layer.t_net.prefix,
                }
                for layer in self.layers
            ],
        }
        meta.update(self.meta)
        meta.update(extra_meta or {})
        save_checkpoint(directory, "flow", meta, self.params)

    @classmethod
    def load(cls, directory):
        _, meta, arrays = load_checkpoint(directory, kind="flow")
        layers = [
            CouplingLayer(
                perm=np.asarray(spec["perm"], dtype=np.intp),
                d1=spec["d1"],
                d2=spec["d2"],
                s_net=MLP(tuple(spec["s_sizes"]), spec["activation"], spec["s_prefix"]),
                t_net=MLP(tuple(spec["t_sizes"]), spec["activation"], spec["t_prefix"]),
                clamp=spec["clamp"],
            )
            for spec in meta["layers"]
        ]
        return cls(layers, arrays, meta["dim"], meta.get("final_loss")), meta


@dataclass(frozen=True)
class FlowHyper:
    n_layers: int = 5
    hidden: int = 64
    n_hidden: int = 2
    clamp: float = 2.0
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 256
    init_scale: float = 1.0


def build_flow(dim: int, hyper: FlowHyper = FlowHyper(), seed: int = 0) -> FlowModel:
    """Fresh flow with alternating identity/reversal permutations.

    Output layers of the coupling networks start at zero, so the initial
    flow is a composition of permutations.
    """
    if dim < 2:
        raise InvalidArgumentError("a coupling flow needs dimension >= 2")
    rng = np.random.default_rng(seed)
    d1 = dim // 2
    d2 = dim - d1
    params: dict = {}
    layers = []
    for k in range(hyper.n_layers):
        perm = np.arange(dim)[::-1].copy() if k % 2 else np.arange(dim)
        sizes = (d1,) + (hyper.hidden,) * hyper.n_hidden + (d2,)
        s_net = MLP(sizes, "tanh", f"L{k}s_")
        t_net = MLP(sizes, "tanh", f"L{k}t_")
        s_net.init(rng, params, zero_last=True)
        t_net.init(rng, params, zero_last=True)
        layers.append(CouplingLayer(perm, d1, d2, s_net, t_net, hyper.clamp))
    for name in params:
        params[name] = params[name] * hyper.init_scale
    return FlowModel(layers, params, dim)


def flow_forward(model: FlowModel, z) -> np.ndarray:
    return model.forward(z)


def flow_inverse(model: FlowModel, x):
    return model.inverse(x)


def _samples(patches) -> np.ndarray:
    X = patches.vectors if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
    return np.atleast_2d(X)


def nll_loss(model: FlowModel, patches) -> float:
    """Mean of ``0.5 ||T^{-1} x||^2 - log|det grad T^{-1}(x)|`` over the batch."""
    z, logdet = model.inverse(_samples(patches))
    return float(np.mean(0.5 * np.sum(z * z, axis=1) - logdet))


def nll_loss_and_grads(model: FlowModel, X, params=None):
    params = model.params if params is None else params
    tape = Tape()
    x = tape.input(X)
    z, logdet = model.build_inverse(tape, x, params)
    per = tape.sub(tape.scale(tape.sq_norm(z), 0.5), logdet)
    loss = tape.scale(tape.sum(per), 1.0 / X.shape[0])
    grads = tape.backward(loss)
    return float(loss.value), param_grads(tape, grads, params), grads.get(x.id)


def train_flow(patches, hyper: FlowHyper = FlowHyper(), seed: int = 0, model: Optional[FlowModel] = None) -> FlowModel:
    """Minimize :func:`nll_loss` with mini-batch Adam steps (deterministic in ``seed``)."""
    X = _samples(patches)
    n, dim = X.shape
    if n < 1:
        raise InvalidArgumentError("no training patches")
    batch = min(hyper.batch_size, n)
    model = build_flow(dim, hyper, seed) if model is None else model
    rng = np.random.default_rng(seed + 1)
    state = AdamState(lr=hyper.lr)
    params = model.params
    loss = np.nan
    for step in range(hyper.steps):
        idx = rng.choice(n, size=batch, replace=False) if batch < n else np.arange(n)
        try:
            loss, grads, _ = nll_loss_and_grads(model, X[idx], params)
        except NumericalError as exc:
            raise NumericalError(f"flow training diverged at step {step}", checkpoint=dict(params), step=step) from exc
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite flow loss at step {step}", checkpoint=dict(params), step=step)
        params = adam_step(params, grads, state)
        if step % 500 == 0:
            log.debug("flow step %d loss %.4f", step, loss)
    model = FlowModel(model.layers, params, dim)
    model.final_loss = nll_loss(model, X)
    return model


def _patches(model: FlowModel, image, cfg: PatchConfig, rng=None) -> PatchSet:
    if model.dim != cfg.dim:
        raise InvalidArgumentError(f"flow dim {model.dim} does not match patch dim {cfg.dim}")
    return extract_patches(image, cfg, rng=rng)


def patchnr_value(model: FlowModel, image, cfg: PatchConfig, rng=None) -> float:
    return nll_loss(model, _patches(model, image, cfg, rng).vectors)


def patchnr_value_and_grad(model: FlowModel, image, cfg: PatchConfig, rng=None):
    ps = _patches(model, image, cfg, rng)
    value, _, gx = nll_loss_and_grads(model, ps.vectors)
    grad = scatter_patch_gradients(gx, np.shape(image), cfg, origins=ps.origins)
    return value, grad


def patchnr_grad(model: FlowModel, image, cfg: PatchConfig, rng=None) -> np.ndarray:
    return patchnr_value_and_grad(model, image, cfg, rng)[1]
