"""Reverse-mode automatic differentiation on a recorded tape.

Nodes hold float64 numpy arrays (0-d for scalars). Every operation that
touches a node living on a :class:`Tape` appends its result to that tape, so
the tape order is a topological order of the graph and the backward sweep is
a single reverse pass.

Typical use::

    tape = Tape()
    theta = tape.watch(params)            # leaf over a ParamVector
    out = mlp_forward(theta, x, arch)
    loss = (out * out).sum()
    grad = backward(loss, theta)          # ParamVector with params.layout
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Node",
    "Tape",
    "Layout",
    "ParamVector",
    "Architecture",
    "OptimizerState",
    "constant",
    "tanh",
    "exp",
    "log",
    "clip",
    "minimum",
    "logsumexp",
    "log_softmax",
    "concatenate",
    "backward",
    "mlp_layout",
    "init_mlp",
    "mlp_forward",
    "mlp_apply",
    "finite_diff_grad",
    "adam_step",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value in the graph plus its partial-derivative accumulator.

    ``parents`` pairs each input node with a function mapping the upstream
    gradient to that input's contribution. Nodes with ``tape=None`` are
    constants: operations on them are evaluated but not recorded.
    """

    __slots__ = ("value", "grad", "parents", "tape", "layout", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), tape: Tape | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.tape = tape
        self.layout: Layout | None = None

    def __repr__(self) -> str:
        return f"Node(value={self.value!r})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        return _record(
            self.value + other.value,
            (
                (self, lambda g, s=self.shape: _unbroadcast(g, s)),
                (other, lambda g, s=other.shape: _unbroadcast(g, s)),
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        return _record(
            self.value - other.value,
            (
                (self, lambda g, s=self.shape: _unbroadcast(g, s)),
                (other, lambda g, s=other.shape: -_unbroadcast(g, s)),
            ),
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return _record(
            a * b,
            (
                (self, lambda g: _unbroadcast(g * b, a.shape)),
                (other, lambda g: _unbroadcast(g * a, b.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return _record(
            a / b,
            (
                (self, lambda g: _unbroadcast(g / b, a.shape)),
                (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
            ),
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return _record(-self.value, ((self, lambda g: -g),))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Node):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return _record(a**exponent, ((self, lambda g: g * exponent * a ** (exponent - 1)),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 and b.ndim != 2:
            raise ShapeError("matmul expects at least one 2-D operand")

        def grad_a(g):
            if b.ndim == 1:
                return np.outer(g, b) if a.ndim == 2 else g * b
            return g @ b.T if g.ndim > 1 else (b @ g if a.ndim == 1 else np.outer(g, b))

        def grad_b(g):
            if a.ndim == 1:
                return np.outer(a, g)
            if b.ndim == 1:
                return a.T @ g
            return a.T @ g if g.ndim > 1 else np.outer(a, g)

        return _record(a @ b, ((self, grad_a), (other, grad_b)))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, index):
        shape = self.shape

        basic = _is_basic_index(index)

        def grad(g):
            out = np.zeros(shape)
            if basic:
                # basic indexing never repeats a position
                out[index] += g
            else:
                np.add.at(out, index, g)
            return out

        return _record(self.value[index], ((self, grad),))

    # reductions and reshaping ---------------------------------------------
    def sum(self, axis=None):
        shape = self.shape

        def grad(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return _record(self.value.sum(axis=axis), ((self, grad),))

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape):
        old = self.shape
        return _record(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    @property
    def T(self):
        return _record(self.value.T, ((self, lambda g: g.T),))


def constant(value) -> Node:
    """Wrap a value as an untracked node."""
    return Node(value)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _record(value, parents) -> Node:
    tapes = {p.tape for p, _ in parents if p.tape is not None}
    if not tapes:
        return Node(value)
    if len(tapes) > 1:
        raise AutodiffError("operands belong to different tapes")
    tape = tapes.pop()
    tracked = tuple((p, fn) for p, fn in parents if p.tape is not None)
    return tape._append(Node(value, tracked, tape))


class Tape:
    """Ordered record of tracked nodes. Single writer; not thread-safe.

    The tape refers to its nodes weakly, so dropping every handle to a graph
    frees it at once instead of waiting for the cycle collector. Nodes that
    can still reach a gradient stay alive through their children's parents.
    """

    def __init__(self):
        self._refs: list[weakref.ref] = []
        self.swept = False

    @property
    def nodes(self) -> list[Node]:
        """Live nodes in recording order."""
        return [n for n in (r() for r in self._refs) if n is not None]

    def _append(self, node: Node) -> Node:
        if self.swept:
            raise AutodiffError("tape already swept; call zero_grad() before recording more")
        self._refs.append(weakref.ref(node))
        return node

    def variable(self, value) -> Node:
        return self._append(Node(value, (), self))

    def watch(self, params: ParamVector) -> Node:
        """Leaf node over a flat parameter vector; carries its layout."""
        node = self.variable(params.values.copy())
        node.layout = params.layout
        return node

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None
        self.swept = False


# elementwise functions ------------------------------------------------------
def tanh(x) -> Node:
    x = _lift(x)
    t = np.tanh(x.value)
    return _record(t, ((x, lambda g: g * (1.0 - t * t)),))


def exp(x) -> Node:
    x = _lift(x)
    e = np.exp(x.value)
    return _record(e, ((x, lambda g: g * e),))


def log(x) -> Node:
    x = _lift(x)
    v = x.value
    return _record(np.log(v), ((x, lambda g: g / v),))


def clip(x, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; zero gradient strictly outside the interval."""
    x = _lift(x)
    v = x.value
    inside = ((v >= lo) & (v <= hi)).astype(np.float64)
    return _record(np.clip(v, lo, hi), ((x, lambda g: g * inside),))


def minimum(a, b) -> Node:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    pick_a = a.value <= b.value
    out = np.where(pick_a, a.value, b.value)
    return _record(
        out,
        (
            (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
        ),
    )


def logsumexp(x, axis: int = -1) -> Node:
    x = _lift(x)
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    shifted = np.exp(v - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    soft = shifted / total
    return _record(out, ((x, lambda g: np.expand_dims(g, axis) * soft),))


def log_softmax(x, axis: int = -1) -> Node:
    x = _lift(x)
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    z = v - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _record(
        out, ((x, lambda g: g - soft * g.sum(axis=axis, keepdims=True)),)
    )


def concatenate(parts: Sequence, axis: int = -1) -> Node:
    nodes = [_lift(p) for p in parts]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def make(i):
        sl = [slice(None)] * nodes[i].ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g, sl=tuple(sl): g[sl]

    value = np.concatenate([n.value for n in nodes], axis=axis)
    return _record(value, tuple((n, make(i)) for i, n in enumerate(nodes)))


# backward sweep -------------------------------------------------------------
def backward(root: Node, wrt=None):
    """Accumulate d(root)/d(node) into every node on root's tape.

    ``wrt`` may be a watched leaf (returns a ParamVector), a sequence of
    leaves (returns a tuple), or None (returns nothing; read ``.grad``).
    """
    if root.value.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    if tape is None:
        raise AutodiffError("root is a constant; nothing was recorded")
    if tape.swept:
        raise AutodiffError("accumulators hold a previous sweep; call tape.zero_grad() first")
    nodes = tape.nodes
    for node in nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes):
        g = node.grad
        if g is None:
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True).reshape(parent.shape)
            else:
                parent.grad = parent.grad + contrib
    for node in nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
    tape.swept = True
    if wrt is None:
        return None
    if isinstance(wrt, Node):
        return _as_params(wrt)
    return tuple(_as_params(n) for n in wrt)


def _as_params(node: Node) -> ParamVector:
    if node.layout is None:
        raise AutodiffError("gradient requested for a node that was not created by Tape.watch")
    return ParamVector(node.grad.copy(), node.layout)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) and not isinstance(i, bool) for i in items)


# parameter vectors ----------------------------------------------------------
@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) entries packed contiguously into a flat vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        out, pos = {}, 0
        for name, shape in self.entries:
            n = math.prod(shape)
            out[name] = (pos, pos + n, shape)
            pos += n
        # cached; entries are immutable
        object.__setattr__(self, "_offsets", out)
        object.__setattr__(self, "_size", pos)

    @property
    def size(self) -> int:
        return self._size

    def offsets(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        """name -> (start, stop, shape). Shared cache: do not mutate."""
        return self._offsets

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_list(self) -> list:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_list(cls, items) -> Layout:
        return cls(tuple((str(name), tuple(int(s) for s in shape)) for name, shape in items))

    def __add__(self, other: Layout) -> Layout:
        clash = set(self.names()) & set(other.names())
        if clash:
            raise ShapeError(f"duplicate layout entries: {sorted(clash)}")
        return Layout(self.entries + other.entries)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.layout.size:
            raise ShapeError(
                f"parameter vector of size {values.size} does not match layout size {self.layout.size}"
            )
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def get(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout.offsets()[name]
        return self.values[start:stop].reshape(shape)

    def structured(self) -> dict[str, np.ndarray]:
        return {name: self.values[a:b].reshape(shape).copy() for name, (a, b, shape) in self.layout.offsets().items()}

    @classmethod
    def from_structured(cls, arrays: dict[str, np.ndarray], layout: Layout) -> ParamVector:
        missing = set(layout.names()) - set(arrays)
        if missing:
            raise ShapeError(f"missing entries: {sorted(missing)}")
        parts = []
        for name, shape in layout.entries:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeError(f"entry {name!r} has shape {arr.shape}, expected {shape}")
            parts.append(arr.ravel())
        flat = np.concatenate(parts) if parts else np.zeros(0)
        return cls(flat, layout)

    def replace(self, values) -> ParamVector:
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def zeros_like(self) -> ParamVector:
        return ParamVector(np.zeros_like(self.values), self.layout)


def param_slice(params, name: str):
    """Structured view of one layout entry, as a Node when ``params`` is one."""
    if isinstance(params, ParamVector):
        return params.get(name)
    start, stop, shape = params.layout.offsets()[name]
    return params[start:stop].reshape(shape)


# multilayer perceptron --------------------------------------------------------
_ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class Architecture:
    """Layer widths from input to output and the hidden activation."""

    sizes: tuple[int, ...]
    activation: str = "tanh"
    prefix: str = "layers"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ShapeError(f"architecture needs >= 2 positive layer sizes, got {self.sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {_ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation, "prefix": self.prefix}

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        return cls(tuple(d["sizes"]), d.get("activation", "tanh"), d.get("prefix", "layers"))


def mlp_layout(arch: Architecture) -> Layout:
    entries = []
    for i in range(arch.n_layers):
        fan_in, fan_out = arch.sizes[i], arch.sizes[i + 1]
        entries.append((f"{arch.prefix}.{i}.weight", (fan_out, fan_in)))
        entries.append((f"{arch.prefix}.{i}.bias", (fan_out,)))
    return Layout(tuple(entries))


def init_mlp(arch: Architecture, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    arrays = {}
    for i in range(arch.n_layers):
        fan_in, fan_out = arch.sizes[i], arch.sizes[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        arrays[f"{arch.prefix}.{i}.weight"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        arrays[f"{arch.prefix}.{i}.bias"] = np.zeros(fan_out)
    return arrays


_CHECKED_MLPS: set = set()


def _check_mlp(params, x_shape: tuple, arch: Architecture) -> None:
    layout = params.layout
    if layout is None:
        raise ShapeError("parameters carry no layout")
    if (layout, arch) not in _CHECKED_MLPS:
        _check_layers(layout, arch)
        _CHECKED_MLPS.add((layout, arch))
    if len(x_shape) not in (1, 2) or x_shape[-1] != arch.sizes[0]:
        raise ShapeError(f"layer 0: input of shape {x_shape} does not match input width {arch.sizes[0]}")


def _check_layers(layout: Layout, arch: Architecture) -> None:
    offsets = layout.offsets()
    for i in range(arch.n_layers):
        expected = {
            f"{arch.prefix}.{i}.weight": (arch.sizes[i + 1], arch.sizes[i]),
            f"{arch.prefix}.{i}.bias": (arch.sizes[i + 1],),
        }
        for name, shape in expected.items():
            if name not in offsets:
                raise ShapeError(f"layer {i}: parameters have no entry {name!r}")
            if tuple(offsets[name][2]) != shape:
                raise ShapeError(f"layer {i}: {name!r} has shape {offsets[name][2]}, expected {shape}")


def mlp_forward(params, x, arch: Architecture) -> Node:
    """Differentiable forward pass; tanh hidden layers, linear output.

    ``params`` is a watched Node (gradients flow into it) or a ParamVector
    (everything is a constant). ``x`` is one input vector or a (batch, in)
    array; the output keeps the same leading shape.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_mlp(params, x.shape, arch)
    h = Node(x)
    for i in range(arch.n_layers):
        w = param_slice(params, f"{arch.prefix}.{i}.weight")
        b = param_slice(params, f"{arch.prefix}.{i}.bias")
        h = h @ _lift(w).T + b
        if i < arch.n_layers - 1 and arch.activation == "tanh":
            h = tanh(h)
    return h


def mlp_apply(params: ParamVector, x, arch: Architecture) -> np.ndarray:
    """Same map as :func:`mlp_forward` on plain arrays, no graph recorded."""
    x = np.asarray(x, dtype=np.float64)
    _check_mlp(params, x.shape, arch)
    h = x
    for i in range(arch.n_layers):
        h = h @ params.get(f"{arch.prefix}.{i}.weight").T + params.get(f"{arch.prefix}.{i}.bias")
        if i < arch.n_layers - 1 and arch.activation == "tanh":
            h = np.tanh(h)
    return h


# finite differences ---------------------------------------------------------
def finite_diff_grad(f: Callable[[ParamVector], float], params: ParamVector, eps: float = 1e-5) -> ParamVector:
    """Central-difference gradient of ``f`` at ``params``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = params.values
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        fp = float(f(params.replace(plus)))
        fm = float(f(params.replace(minus)))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * eps)
    return params.replace(out)


# optimizer ------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m.shape != self.v.shape:
            raise ShapeError("moment vectors differ in length")
        if self.step < 0:
            raise ValueError("step counter must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("numerical floor must be positive")

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> OptimizerState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "v": self.v.tolist(),
            "step": self.step,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OptimizerState:
        return cls(np.array(d["m"], dtype=np.float64), np.array(d["v"], dtype=np.float64),
                   int(d["step"]), float(d["lr"]), float(d["beta1"]), float(d["beta2"]), float(d["eps"]))


def adam_step(params: ParamVector, grads: ParamVector, state: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    """One bias-corrected Adam descent step. Inputs are not modified."""
    g = np.asarray(grads.values if isinstance(grads, ParamVector) else grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ShapeError(
            f"length mismatch: params {params.values.size}, grads {g.size}, moments {state.m.size}"
        )
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient entries at indices {bad.tolist()}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return params.replace(new), new_state


def flat_norm(vectors: Iterable[ParamVector]) -> float:
    return float(math.sqrt(sum(float(np.dot(p.values, p.values)) for p in vectors)))
