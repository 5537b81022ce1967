"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Only the primitives the VIN/DiT forward pass needs are provided. Operations
record onto the innermost active :class:`Tape` when at least one input
requires a gradient; outside a tape they evaluate eagerly and record nothing,
which is what the samplers use.

Every primitive is a pure function of its input arrays. Reductions go through
numpy with fixed axes, so for a given input the result does not depend on
evaluation order elsewhere in the program.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape():
        loss = mean(square(matmul(x, w)))
    (g,) = grad(loss, [w])
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

# Checked after every primitive. Switch off only for profiling.
CHECK_FINITE = True


class NumcoreError(Exception):
    pass


class ShapeError(NumcoreError, ValueError):
    pass


class ContractError(NumcoreError, ValueError):
    pass


class NotOnTapeError(NumcoreError, LookupError):
    pass


class NonFiniteError(NumcoreError, FloatingPointError):
    pass


class Node:
    __slots__ = ("op", "inputs", "output", "forward", "backward", "tape", "index")

    def __init__(self, op, inputs, output, forward, backward, tape, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward = forward
        self.backward = backward
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"Node({self.op}, #{self.index})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, which is a topological order of
    the computation graph; :func:`grad` walks it backwards.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the leaf values.

        Returns the recomputed output of each node, in tape order.
        """
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out = node.forward(*args)
            values[id(node.output)] = out
            outs.append(out)
        return outs


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, forward: Callable, backward: Callable, *inputs) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = forward(*(t.data for t in inputs))
    if CHECK_FINITE and not np.isfinite(out).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{op} produced non-finite values (inputs {shapes})")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        node = Node(op, inputs, result, forward, backward, tape, len(tape.nodes))
        tape.nodes.append(node)
        result._node = node
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        a,
        b,
    )


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, out, x: (-g,), a)


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", lambda x: x * c, lambda g, out, x: (g * c,), a)


def square(a) -> Tensor:
    return _apply("square", np.square, lambda g, out, x: (2.0 * g * x,), a)


def _gelu_tanh(x):
    return np.tanh(GELU_C * x * (1.0 + GELU_K * (x * x)))


def _gelu(x):
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_backward(g, out, x):
    th = _gelu_tanh(x)
    x2 = x * x
    dth = (1.0 - th * th) * (GELU_C * (1.0 + 3.0 * GELU_K * x2))
    return (g * (0.5 * (1.0 + th + x * dth)),)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return _apply("gelu", _gelu, _gelu_backward, a)


def stop_gradient(a) -> Tensor:
    """Identity forward, exactly zero backward."""
    return _apply("stop_gradient", lambda x: x.copy(), lambda g, out, x: (None,), a)


# --- shape ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda x: x.reshape(shape),
        lambda g, out, x: (g.reshape(src),),
        a,
    )


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda g, out, x: (np.transpose(g, inv),),
        a,
    )


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing. Use :func:`take_rows` for gathers."""
    a = as_tensor(a)
    src = a.shape

    def backward(g, out, x):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return _apply("getitem", lambda x: x[key].copy(), backward, a)


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    src = a.shape

    def backward(g, out, x):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _apply("take_rows", lambda x: x[index], backward, a)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def forward(*xs):
        return np.concatenate(xs, axis=axis)

    def backward(g, out, *xs):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", forward, backward, *tensors)


# --- reductions ------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def backward(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), backward, a)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g, out, x, y):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _apply("matmul", np.matmul, backward, a, b)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stable softmax along ``axis``."""

    def backward(g, out, x):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _apply("softmax", lambda x: _softmax(x, axis), backward, a)


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} for width {d}")

    def normalize(x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv, inv

    def forward(x, w, b):
        xhat, _ = normalize(x)
        return xhat * w + b

    def backward(g, out, x, w, b):
        xhat, inv = normalize(x)
        gx = g * w
        dx = inv * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _apply("layer_norm", forward, backward, a, gain, bias)


# --- differentiation -----------------------------------------------------


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    ``wrt`` may hold leaves or intermediate tensors. A tensor that is on the
    tape but does not influence ``loss`` (including one reached only through
    :func:`stop_gradient`) gets an exact zero array.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise ContractError("loss was not recorded on a tape")
    nodes = node.tape.nodes[: node.index + 1]

    seen = {id(loss)}
    for n in nodes:
        seen.update(id(t) for t in n.inputs)
    for t in wrt:
        if id(t) not in seen:
            raise NotOnTapeError(f"{t!r} does not appear on the tape of this loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for n in reversed(nodes):
        g = grads.get(id(n.output))
        if g is None:
            continue
        in_grads = n.backward(g, n.output.data, *(t.data for t in n.inputs))
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(t), np.zeros(t.shape)).reshape(t.shape) for t in wrt]
