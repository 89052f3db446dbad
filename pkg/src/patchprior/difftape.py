"""Minimal reverse-mode differentiation over a closed set of array operations.

The tape is define-by-run: calling an op appends a node holding its forward
value.  :meth:`Tape.backward` propagates cotangents in reverse order.
:meth:`Tape.jvp` appends the forward-mode tangent of a node as *new tape
nodes*, so a subsequent backward pass differentiates through the tangent.
That is how :func:`second_order_input_grad_penalty` obtains parameter
gradients of a penalty on input gradients.

Values are numpy arrays, usually batched as ``(batch, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError, NumericalError, StateError, UnsupportedOpError

# activations whose second derivative exists everywhere
SMOOTH_OPS = {"tanh", "sigmoid", "softplus", "exp", "log", "reciprocal"}


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _softplus(x):
    return np.logaddexp(0.0, x)


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "attrs")

    def __init__(self, tape, id_, op, inputs, value, attrs):
        self.tape = tape
        self.id = id_
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)


class Tape:
    """Recorded computation graph (nodes in topological order)."""

    def __init__(self, check_finite: bool = True):
        self.nodes = []
        self.check_finite = check_finite

    # ---- recording -------------------------------------------------------

    def _push(self, op, inputs, value, **attrs) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced by op {op!r}")
        node = Node(self, len(self.nodes), op, tuple(inputs), value, attrs)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise StateError("node belongs to a different tape")
            return x
        return self.const(x)

    def const(self, value) -> Node:
        return self._push("const", (), value)

    def input(self, value) -> Node:
        return self._push("input", (), value)

    def param(self, name: str, params: Dict[str, np.ndarray]) -> Node:
        return self._push("param", (), params[name], name=name)

    # ---- operations --------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._push("add", (a, b), a.value + b.value)

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._push("sub", (a, b), a.value - b.value)

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        return self._push("mul", (a, b), a.value * b.value)

    def scale(self, a, c: float) -> Node:
        a = self._lift(a)
        return self._push("scale", (a,), a.value * c, c=float(c))

    def matmul(self, x, W) -> Node:
        x, W = self._lift(x), self._lift(W)
        if x.value.shape[-1] != W.value.shape[0]:
            raise InvalidArgumentError(f"matmul shape mismatch {x.shape} @ {W.shape}")
        return self._push("matmul", (x, W), x.value @ W.value)

    def affine(self, x, W, b) -> Node:
        x, W, b = self._lift(x), self._lift(W), self._lift(b)
        if x.value.shape[-1] != W.value.shape[0] or b.value.shape[-1] != W.value.shape[1]:
            raise InvalidArgumentError(f"affine shape mismatch {x.shape}, {W.shape}, {b.shape}")
        return self._push("affine", (x, W, b), x.value @ W.value + b.value)

    def tanh(self, x) -> Node:
        x = self._lift(x)
        return self._push("tanh", (x,), np.tanh(x.value))

    def sigmoid(self, x) -> Node:
        x = self._lift(x)
        return self._push("sigmoid", (x,), expit(x.value))

    def softplus(self, x) -> Node:
        x = self._lift(x)
        return self._push("softplus", (x,), _softplus(x.value))

    def relu(self, x) -> Node:
        x = self._lift(x)
        return self._push("relu", (x,), np.maximum(x.value, 0.0))

    def exp(self, x) -> Node:
        x = self._lift(x)
        with np.errstate(over="ignore"):
            return self._push("exp", (x,), np.exp(x.value))

    def log(self, x) -> Node:
        x = self._lift(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._push("log", (x,), np.log(x.value))

    def reciprocal(self, x) -> Node:
        x = self._lift(x)
        with np.errstate(divide="ignore"):
            return self._push("reciprocal", (x,), 1.0 / x.value)

    def sum(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self._lift(x)
        return self._push("sum", (x,), np.sum(x.value, axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)

    def sq_norm(self, x, axis=-1) -> Node:
        """Sum of squares along ``axis`` (kept as a trailing singleton)."""
        x = self._lift(x)
        return self._push("sq_norm", (x,), np.sum(x.value**2, axis=axis, keepdims=True), axis=axis)

    def take(self, x, idx) -> Node:
        """Select columns ``idx`` along the last axis."""
        x = self._lift(x)
        idx = np.asarray(idx, dtype=np.intp)
        return self._push("take", (x,), x.value[..., idx], idx=idx)

    def concat(self, parts) -> Node:
        parts = [self._lift(p) for p in parts]
        return self._push("concat", parts, np.concatenate([p.value for p in parts], axis=-1))

    # ---- reverse mode --------------------------------------------------------

    def backward(self, out: Node, cotangent=None) -> Dict[int, np.ndarray]:
        """Cotangents of every node reached from ``out``, keyed by node id."""
        if not self.nodes or not isinstance(out, Node) or out.tape is not self:
            raise StateError("backward called before forward on this tape")
        if cotangent is None:
            if out.value.size != 1:
                raise InvalidArgumentError("a cotangent is required for non-scalar outputs")
            cotangent = np.ones_like(out.value)
        grads: Dict[int, np.ndarray] = {out.id: np.asarray(cotangent, dtype=np.float64)}
        for node in reversed(self.nodes[: out.id + 1]):
            g = grads.get(node.id)
            if g is None or not node.inputs:
                continue
            for inp, gi in zip(node.inputs, self._vjp(node, g)):
                if gi is None:
                    continue
                gi = _unbroadcast(gi, inp.value.shape)
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        return grads

    @staticmethod
    def _vjp(node: Node, g):
        op, ins, y = node.op, node.inputs, node.value
        if op == "add":
            return g, g
        if op == "sub":
            return g, -g
        if op == "mul":
            return g * ins[1].value, g * ins[0].value
        if op == "scale":
            return (g * node.attrs["c"],)
        if op == "matmul":
            x, W = ins[0].value, ins[1].value
            return g @ W.T, x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if op == "affine":
            x, W = ins[0].value, ins[1].value
            g2 = g.reshape(-1, g.shape[-1])
            return g @ W.T, x.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0).reshape(ins[2].value.shape)
        if op == "tanh":
            return (g * (1.0 - y * y),)
        if op == "sigmoid":
            return (g * y * (1.0 - y),)
        if op == "softplus":
            return (g * expit(ins[0].value),)
        if op == "relu":
            return (g * (ins[0].value > 0),)
        if op == "exp":
            return (g * y,)
        if op == "log":
            return (g / ins[0].value,)
        if op == "reciprocal":
            return (-g * y * y,)
        if op == "sum":
            axis, keep = node.attrs["axis"], node.attrs["keepdims"]
            shape = ins[0].value.shape
            if axis is not None and not keep:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        if op == "sq_norm":
            return (2.0 * ins[0].value * g,)
        if op == "take":
            x = ins[0].value
            out = np.zeros_like(x)
            np.add.at(out, (..., node.attrs["idx"]), g)
            return (out,)
        if op == "concat":
            sizes = np.cumsum([p.value.shape[-1] for p in ins])[:-1]
            return tuple(np.split(g, sizes, axis=-1))
        raise UnsupportedOpError(f"no reverse rule for op {op!r}")

    # ---- forward mode, recorded on the tape ----------------------------------

    def jvp(self, out: Node, wrt: Node, tangent) -> Optional[Node]:
        """Append nodes computing the directional derivative of ``out``
        with respect to ``wrt`` along ``tangent``; returns the tangent node
        (``None`` if ``out`` does not depend on ``wrt``)."""
        if out.tape is not self or wrt.tape is not self:
            raise StateError("jvp nodes must belong to this tape")
        tan: Dict[int, Optional[Node]] = {wrt.id: self.const(tangent)}
        stop = out.id
        for node in list(self.nodes[wrt.id + 1 : stop + 1]):
            if not node.inputs:
                continue
            tin = [tan.get(i.id) for i in node.inputs]
            if all(t is None for t in tin):
                continue
            tan[node.id] = self._jvp_rule(node, tin)
        return tan.get(out.id)

    def _jvp_rule(self, node: Node, t) -> Optional[Node]:
        op, ins = node.op, node.inputs

        def plus(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return self.add(a, b)

        if op == "add":
            return plus(t[0], t[1])
        if op == "sub":
            if t[1] is None:
                return t[0]
            neg = self.scale(t[1], -1.0)
            return plus(t[0], neg)
        if op == "mul":
            a = None if t[0] is None else self.mul(t[0], ins[1])
            b = None if t[1] is None else self.mul(ins[0], t[1])
            return plus(a, b)
        if op == "scale":
            return self.scale(t[0], node.attrs["c"])
        if op == "matmul":
            a = None if t[0] is None else self.matmul(t[0], ins[1])
            b = None if t[1] is None else self.matmul(ins[0], t[1])
            return plus(a, b)
        if op == "affine":
            a = None if t[0] is None else self.matmul(t[0], ins[1])
            b = None if t[1] is None else self.matmul(ins[0], t[1])
            return plus(plus(a, b), t[2])
        if op == "tanh":
            return self.mul(t[0], self.sub(1.0, self.mul(node, node)))
        if op == "sigmoid":
            return self.mul(t[0], self.mul(node, self.sub(1.0, node)))
        if op == "softplus":
            return self.mul(t[0], self.sigmoid(ins[0]))
        if op == "exp":
            return self.mul(t[0], node)
        if op == "log":
            return self.mul(t[0], self.reciprocal(ins[0]))
        if op == "reciprocal":
            return self.scale(self.mul(t[0], self.mul(node, node)), -1.0)
        if op == "sum":
            return self.sum(t[0], axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])
        if op == "sq_norm":
            return self.scale(self.sum(self.mul(ins[0], t[0]), axis=node.attrs["axis"], keepdims=True), 2.0)
        if op == "take":
            return self.take(t[0], node.attrs["idx"])
        if op == "concat":
            parts = [ti if ti is not None else self.const(np.zeros_like(p.value)) for p, ti in zip(ins, t)]
            return self.concat(parts)
        raise UnsupportedOpError(f"op {op!r} has no second-order-safe tangent rule")


def param_grads(tape: Tape, grads: Dict[int, np.ndarray], params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Collect cotangents of ``param`` nodes by parameter name (zero if unreached)."""
    out = {name: np.zeros_like(v) for name, v in params.items()}
    for node in tape.nodes:
        if node.op == "param" and node.id in grads:
            out[node.attrs["name"]] = out[node.attrs["name"]] + grads[node.id]
    return out


# --------------------------------------------------------------------------
# Small networks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MLP:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ``activation``; the output layer is linear.
    Parameters live in an external dict under ``{prefix}W{i}`` / ``{prefix}b{i}``.
    """

    sizes: tuple
    activation: str = "tanh"
    prefix: str = ""

    def init(self, rng: np.random.Generator, params: dict, zero_last: bool = False) -> dict:
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if last and zero_last:
                W = np.zeros((a, b))
            else:
                W = rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
            params[f"{self.prefix}W{i}"] = W
            params[f"{self.prefix}b{i}"] = np.zeros(b)
        return params

    def param_names(self):
        n = len(self.sizes) - 1
        return [f"{self.prefix}{k}{i}" for i in range(n) for k in ("W", "b")]

    def build(self, tape: Tape, x: Node, params: dict) -> Node:
        h = x
        n = len(self.sizes) - 1
        for i in range(n):
            h = tape.affine(h, tape.param(f"{self.prefix}W{i}", params), tape.param(f"{self.prefix}b{i}", params))
            if i < n - 1:
                h = getattr(tape, self.activation)(h)
        return h

    def __call__(self, x, params: dict) -> np.ndarray:
        """Plain numpy forward pass (no tape)."""
        h = np.asarray(x, dtype=np.float64)
        n = len(self.sizes) - 1
        act = {"tanh": np.tanh, "softplus": _softplus, "sigmoid": expit, "relu": lambda v: np.maximum(v, 0.0)}[
            self.activation
        ]
        for i in range(n):
            h = h @ params[f"{self.prefix}W{i}"] + params[f"{self.prefix}b{i}"]
            if i < n - 1:
                h = act(h)
        return h


def value_and_input_grad(net: Callable, params: dict, x):
    """Scalar-per-row network outputs ``(B,)`` and input gradients ``(B, D)``."""
    tape = Tape()
    xin = tape.input(np.atleast_2d(x))
    out = net(tape, xin, params)
    grads = tape.backward(tape.sum(out))
    return out.value[:, 0], grads.get(xin.id, np.zeros_like(xin.value))


def second_order_input_grad_penalty(net: Callable, params: dict, x):
    """Mean over rows of ``(||grad_x D(x)|| - 1)^2`` and its parameter gradients.

    ``net(tape, x_node, params)`` must return a ``(B, 1)`` node built from
    smooth operations.  The input gradient ``g`` is taken by reverse mode; the
    parameter gradient is the reverse-mode derivative of the tangent
    ``<grad_x D, v>`` with ``v = d penalty / d g`` held fixed.
    At ``g = 0`` the subgradient convention ``v = 0`` is used.
    """
    tape = Tape()
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xin = tape.input(X)
    out = net(tape, xin, params)
    bad = {n.op for n in tape.nodes} - SMOOTH_OPS - {"const", "input", "param", "add", "sub", "mul", "scale", "matmul", "affine", "sum", "sq_norm", "take", "concat"}
    if bad:
        raise UnsupportedOpError(f"penalty needs smooth operations, found {sorted(bad)}")
    grads = tape.backward(tape.sum(out))
    g = grads.get(xin.id, np.zeros_like(X))
    B = X.shape[0]
    gn = np.linalg.norm(g, axis=1)
    penalty = float(np.mean((gn - 1.0) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(gn > 0, 2.0 * (gn - 1.0) / np.where(gn > 0, gn, 1.0), 0.0)
    v = coef[:, None] * g / B
    tang = tape.jvp(out, xin, v)
    if tang is None:
        return penalty, {k: np.zeros_like(p) for k, p in params.items()}, g
    s = tape.sum(tang)
    pg = param_grads(tape, tape.backward(s), params)
    return penalty, pg, g


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update.

    ``params``/``grads`` are dicts of arrays (or single arrays).  Returns new
    parameter containers and advances ``state`` in place.
    """
    single = isinstance(params, np.ndarray)
    if single:
        params, grads = {"_": params}, {"_": grads}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {np.shape(p)} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new["_"] if single else new
