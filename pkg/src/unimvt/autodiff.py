"""Tape-based reverse-mode autodiff over float64 numpy arrays.

This is the substrate everything else is built on: dense affine layers with
relu/sigmoid/softmax activations, elementwise arithmetic, a stop-gradient
operator, an Adam optimizer and a central-difference gradient checker.

Values are numpy float64 arrays, either 2-D ``(rows, cols)`` matrices
(row = sample), 1-D bias vectors, or 0-D scalars (loss values). A ``Tape``
records every primitive in creation order; ``backward`` replays it once in
reverse, so creation order doubles as the topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

PROB_EPS = 1e-7  # probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before logs/logits


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # dtype-preserving (works in extended precision), no overflow either side
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


class ParamTensor:
    """Trainable tensor with a persistent accumulated gradient."""

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values) -> None:
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.values.shape})"


class Node:
    """One tape entry: a value plus the recipe for pushing gradients to parents."""

    __slots__ = ("tape", "value", "parents", "vjp", "param", "grad")

    def __init__(self, tape, value, parents=(), vjp=None, param=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)


class Tape:
    """Ordered record of forward primitives, replayed in reverse by backward()."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def record(self, value, parents=(), vjp=None, param=None) -> Node:
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        node = Node(self, value, tuple(parents), vjp, param)
        self.nodes.append(node)
        return node

    def constant(self, values) -> Node:
        """A leaf that receives no gradient."""
        return self.record(values)

    def param(self, p: ParamTensor) -> Node:
        """Leaf bound to a ParamTensor; repeated use returns the same node."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self.record(p.values, param=p)
            self._param_nodes[id(p)] = node
        return node


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise UsageError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise UsageError("at least one operand must be a tape node")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Node:
    """Elementwise product with numpy broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    av, bv = a.value, b.value
    return tape.record(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ W + b with b broadcast over rows."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ConfigError(
            f"affine input width {xv.shape[-1]} does not match weight rows {wv.shape[0]}"
        )
    return x.tape.record(
        xv @ wv + b.value, (x, w, b),
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)),
    )


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    s = _stable_sigmoid(a.value)
    return a.tape.record(s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a: Node) -> Node:
    """Row-wise softmax (max-shifted for stability)."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return a.tape.record(s, (a,), vjp)


def log(a: Node) -> Node:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def absolute(a: Node) -> Node:
    sign = np.sign(a.value)
    return a.tape.record(np.abs(a.value), (a,), lambda g: (g * sign,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip values into [lo, hi]; gradient is zero where the clip binds."""
    inside = (a.value > lo) & (a.value < hi)
    return a.tape.record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def logit(a: Node) -> Node:
    """Inverse sigmoid on probabilities clamped into [PROB_EPS, 1 - PROB_EPS]."""
    p = np.clip(a.value, PROB_EPS, 1.0 - PROB_EPS)
    inside = (a.value > PROB_EPS) & (a.value < 1.0 - PROB_EPS)
    return a.tape.record(
        np.log(p) - np.log1p(-p), (a,),
        lambda g: (g * inside / (p * (1.0 - p)),),
    )


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    tape = nodes[0].tape
    widths = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(nodes))
        )

    return tape.record(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), vjp)


def column(a: Node, k: int) -> Node:
    """Column k of a matrix as an (n, 1) slice."""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, k : k + 1] = g
        return (out,)

    return a.tape.record(a.value[:, k : k + 1], (a,), vjp)


class _SgFreeze:
    """Record/replay of stop-gradient outputs for the gradient checker.

    A stop-gradient makes the tape's gradient intentionally differ from the
    true derivative of the forward function, so central differences of the
    raw loss cannot match it. Freezing pins every stop-gradient output at its
    unperturbed value during the perturbed evaluations, which turns the
    finite difference into the derivative the tape actually defines.
    """

    __slots__ = ("mode", "values", "idx")

    def __init__(self) -> None:
        self.mode = None  # None | "record" | "replay"
        self.values: list[np.ndarray] = []
        self.idx = 0

    def reset(self) -> None:
        self.mode, self.values, self.idx = None, [], 0


_SG_FREEZE = _SgFreeze()


def stop_gradient(a: Node) -> Node:
    """Forward identity whose backward contribution is exactly zero."""
    value = a.value
    fz = _SG_FREEZE
    if fz.mode == "record":
        fz.values.append(np.array(value, copy=True))
    elif fz.mode == "replay":
        if fz.idx >= len(fz.values):
            raise UsageError("stop-gradient replay saw more SG nodes than were recorded")
        value = fz.values[fz.idx]
        fz.idx += 1
    return a.tape.record(value, (a,), lambda g: (None,))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.tape.record(a.value.sum(), (a,), lambda g: (np.full(shape, float(g)),))


def binary_cross_entropy(y, p: Node) -> Node:
    """Per-element -[y log p + (1-y) log(1-p)] with the standard probability clamp.

    Fused primitive: one tape node, gradient (p - y) / (p (1 - p)) where the
    clamp does not bind, zero where it does.
    """
    yv = np.asarray(y, dtype=np.float64)
    pv = p.value
    pc = np.clip(pv, PROB_EPS, 1.0 - PROB_EPS)
    inside = (pv > PROB_EPS) & (pv < 1.0 - PROB_EPS)
    value = -(yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc))
    return p.tape.record(value, (p,), lambda g: (g * inside * (pc - yv) / (pc * (1.0 - pc)),))


def backward(tape: Tape, loss_seed: float = 1.0) -> None:
    """Replay the tape in reverse, accumulating d(loss)/d(param) into ParamTensor.grad.

    The tape must end in a scalar node (the loss). Each node is visited
    exactly once; stop-gradient nodes propagate nothing upstream.
    """
    if not tape.nodes:
        raise UsageError("backward called before any forward computation")
    last = tape.nodes[-1]
    if np.size(last.value) != 1:
        raise UsageError(f"tape must end in a scalar node, got shape {last.shape}")
    last.grad = np.full_like(np.asarray(last.value), float(loss_seed))
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        if node.param is not None:
            node.param.grad += g
        if node.vjp is not None:
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("linear", "relu", "sigmoid")


@dataclass
class Layer:
    """One affine layer with an optional activation."""

    W: ParamTensor
    b: ParamTensor
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(
    rng: np.random.Generator,
    name: str,
    dims: Sequence[int],
    hidden_activation: str = "relu",
    out_activation: str = "linear",
) -> list[Layer]:
    """Stack of affine layers with glorot-uniform weights and zero biases."""
    layers = []
    for i in range(len(dims) - 1):
        act = out_activation if i == len(dims) - 2 else hidden_activation
        layers.append(
            Layer(
                ParamTensor(f"{name}.l{i}.W", glorot_uniform(rng, dims[i], dims[i + 1])),
                ParamTensor(f"{name}.l{i}.b", np.zeros(dims[i + 1])),
                act,
            )
        )
    return layers


def mlp_params(layers: Sequence[Layer]) -> list[ParamTensor]:
    out = []
    for layer in layers:
        out.extend((layer.W, layer.b))
    return out


def mlp_forward(layers: Sequence[Layer], x, tape: Tape | None = None) -> Node:
    """Run a layer stack; raises NumericError (with layer index) on non-finite output."""
    if isinstance(x, Node):
        tape = x.tape
    elif tape is None:
        raise UsageError("mlp_forward needs a tape when the input is a plain array")
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        x = tape.constant(x)
    h = x
    for i, layer in enumerate(layers):
        if h.value.shape[-1] != layer.W.shape[0]:
            raise ConfigError(
                f"layer {i} expects input width {layer.W.shape[0]}, got {h.value.shape[-1]}"
            )
        h = affine(h, tape.param(layer.W), tape.param(layer.b))
        if layer.activation == "relu":
            h = relu(h)
        elif layer.activation == "sigmoid":
            h = sigmoid(h)
        # a non-finite entry poisons the sum, so one reduction guards the layer
        if not math.isfinite(h.value.sum()):
            raise NumericError(f"non-finite activation after layer {i}")
    return h


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name (names must be unique)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[ParamTensor], lr: float = 1e-3, **kw) -> "OptimizerState":
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique for optimizer state")
        return cls(lr=lr, **kw)


def optimizer_step(params: Sequence[ParamTensor], state: OptimizerState) -> None:
    """One Adam update (bias-corrected); gradients are zeroed afterwards."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        slot = state.slots.get(p.name)
        if slot is None:
            slot = (np.zeros_like(p.values), np.zeros_like(p.values))
        m = state.beta1 * slot[0] + (1.0 - state.beta1) * g
        v = state.beta2 * slot[1] + (1.0 - state.beta2) * g * g
        state.slots[p.name] = (m, v)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[], Node],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
    freeze_stop_gradients: bool = True,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must rebuild the loss on a fresh tape at every call and return
    the scalar loss node. The relative error for one parameter entry is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8); the max over all entries of
    all params is returned. This routine never trusts the tape for the
    reference values: it only re-evaluates the forward pass.

    With ``freeze_stop_gradients`` (the default), stop-gradient outputs are
    replayed at their unperturbed values during the +-eps evaluations, so the
    check validates the derivative the tape defines: SG inputs are constants.
    Without it, any parameter that reaches the loss through an SG boundary
    reports the (intentional) mismatch between tape gradient and true
    derivative.

    Entries whose central difference is quantization-limited in float64 (the
    +-eps loss change sits within a few ulp of the loss magnitude, which caps
    the attainable agreement for tiny gradients) are re-evaluated with the
    parameters cast to extended precision: same definition, same eps, just
    enough arithmetic headroom to resolve the difference. Genuine gradient
    bugs survive the re-evaluation unchanged.
    """
    if eps <= 0:
        raise ConfigError("finite difference step must be positive")
    fz = _SG_FREEZE
    fz.reset()
    if freeze_stop_gradients:
        fz.mode = "record"
    recheck: list = []
    try:
        for p in params:
            p.zero_grad()
        node = loss_fn()
        backward(node.tape, 1.0)
        analytic = {p.name: p.grad.copy() for p in params}
        for p in params:
            p.zero_grad()
        if freeze_stop_gradients:
            fz.mode = "replay"

        worst = 0.0
        for p in params:
            flat = p.values.reshape(-1)
            ref = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fz.idx = 0
                lp = float(loss_fn().value)
                flat[i] = orig - eps
                fz.idx = 0
                lm = float(loss_fn().value)
                flat[i] = orig
                cd = (lp - lm) / (2.0 * eps)
                denom = max(abs(ref[i]), abs(cd), 1e-8)
                rel = abs(ref[i] - cd) / denom
                if rel > 1e-5 and np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
                    recheck.append((p, i, ref[i]))
                else:
                    worst = max(worst, rel)

        if recheck:
            originals = {id(p): p.values for p in params}
            for p in params:
                p.values = p.values.astype(np.longdouble)
            try:
                for p, i, a in recheck:
                    flat = p.values.reshape(-1)
                    orig = flat[i]
                    flat[i] = orig + eps
                    fz.idx = 0
                    lp = loss_fn().value
                    flat[i] = orig - eps
                    fz.idx = 0
                    lm = loss_fn().value
                    flat[i] = orig
                    cd = float((lp - lm) / np.longdouble(2.0 * eps))
                    denom = max(abs(a), abs(cd), 1e-8)
                    worst = max(worst, abs(a - cd) / denom)
            finally:
                for p in params:
                    p.values = originals[id(p)]
    finally:
        fz.reset()
    return worst
