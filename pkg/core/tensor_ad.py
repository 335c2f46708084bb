"""Float64 tensors with nested forward- and reverse-mode differentiation.

Values flowing through the primitives below are plain ``numpy.ndarray``
objects (a shape plus a row-major float64 buffer), :class:`Dual` numbers
carrying a tangent, or :class:`Var` nodes recorded on a :class:`Tape`.
Every Dual and every Tape owns a ``level`` drawn from one global counter.
A primitive unwraps the argument with the highest level first and states its
rule with the same primitives applied to the components, so transformations
nest exactly: forward-mode tangents taken inside a loss land on the parameter
tape (reverse-over-forward), second derivatives are tangents of tangents, and
reverse-mode input derivatives can themselves be differentiated.

Broadcasting follows numpy's trailing-dimension alignment; reverse rules sum
cotangents back over the broadcast axes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from core.errors import ADError

_levels = itertools.count(1)


def _coerce(value):
    if isinstance(value, Traced):
        return value
    return np.asarray(value, dtype=np.float64)


def shape_of(value) -> tuple[int, ...]:
    if isinstance(value, Traced):
        return value.shape
    return np.shape(value)


def primal(value) -> np.ndarray:
    """Strip every tracing layer and return the plain float64 array."""
    while isinstance(value, Traced):
        value = value.primal if isinstance(value, Dual) else value.value
    return np.asarray(value, dtype=np.float64)


def is_traced(value) -> bool:
    return isinstance(value, Traced)


class Traced:
    """Common operator surface of :class:`Dual` and :class:`Var`."""

    __slots__ = ("level",)
    __array_priority__ = 1000.0

    @property
    def shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pos__(self):
        return self

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, out=None, keepdims=False):
        if out is not None:
            raise ADError("not differentiable: in-place reduction")
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __array__(self, dtype=None, copy=None):
        raise ADError("not differentiable: implicit conversion of a traced value to ndarray")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        rule = _UFUNC_RULES.get(ufunc) if method == "__call__" else None
        if rule is None or any(value is not None for value in kwargs.values()):
            raise ADError(f"not differentiable: numpy.{ufunc.__name__} is not a supported primitive")
        return rule(*inputs)


class Dual(Traced):
    """A primal value together with its tangent for one forward-mode pass."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent, level: int):
        self.primal = primal
        self.tangent = tangent
        self.level = level

    @property
    def shape(self) -> tuple[int, ...]:
        return shape_of(self.primal)

    def __repr__(self) -> str:
        return f"Dual(level={self.level}, shape={self.shape})"


class Var(Traced):
    """Handle to a node recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index
        self.level = tape.level

    @property
    def shape(self) -> tuple[int, ...]:
        return shape_of(self.value)

    def __repr__(self) -> str:
        return f"Var(level={self.level}, index={self.index}, shape={self.shape})"


@dataclass(slots=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    partials: tuple[Callable[[Any], Any], ...]


class Tape:
    """Append-only record of primitive applications.

    Node inputs always point at earlier indices, so a single sweep in reverse
    index order visits every node after all of its consumers. Adjoints live
    only for the duration of a sweep; :meth:`release` drops the nodes.
    """

    def __init__(self):
        self.level = next(_levels)
        self.nodes: list[Node] = []
        self.released = False

    def variable(self, value) -> Var:
        return self.record("leaf", _coerce(value), (), ())

    def record(self, op: str, value, inputs: tuple[int, ...], partials: tuple) -> Var:
        if self.released:
            raise ADError("tape was already swept and released")
        self.nodes.append(Node(op, inputs, partials))
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, output: Var) -> list:
        if output.tape is not self:
            raise ADError("output was not recorded on this tape")
        adjoints: list = [None] * (output.index + 1)
        adjoints[output.index] = np.ones(shape_of(output.value))
        for index in range(output.index, -1, -1):
            adjoint = adjoints[index]
            if adjoint is None:
                continue
            node = self.nodes[index]
            for source, rule in zip(node.inputs, node.partials):
                contribution = rule(adjoint)
                previous = adjoints[source]
                adjoints[source] = contribution if previous is None else add(previous, contribution)
        return adjoints

    def gradient(self, output, wrt: Sequence[Var]) -> list:
        if not (isinstance(output, Var) and output.tape is self):
            return [np.zeros(shape_of(w.value)) for w in wrt]
        adjoints = self.backward(output)
        grads = []
        for w in wrt:
            adjoint = adjoints[w.index] if w.index < len(adjoints) else None
            grads.append(np.zeros(shape_of(w.value)) if adjoint is None else adjoint)
        return grads

    def release(self) -> None:
        self.nodes.clear()
        self.released = True


@dataclass(frozen=True)
class Primitive:
    name: str
    impl: Callable[..., Any]
    jvp: Callable[..., Any]
    vjp: Callable[..., Any]

    def __call__(self, *args, **params):
        return _bind(self, tuple(_coerce(a) for a in args), params)


def _bind(prim: Primitive, args: tuple, params: dict):
    top = None
    for arg in args:
        if isinstance(arg, Traced) and (top is None or arg.level > top.level):
            top = arg
    if top is None:
        return prim.impl(*args, **params)

    level = top.level
    if isinstance(top, Dual):
        primals, tangents = [], []
        for arg in args:
            if isinstance(arg, Dual) and arg.level == level:
                primals.append(arg.primal)
                tangents.append(arg.tangent)
            else:
                primals.append(arg)
                tangents.append(None)
        primals = tuple(primals)
        out = _bind(prim, primals, params)
        tangent = prim.jvp(primals, tuple(tangents), out, **params)
        return out if tangent is None else Dual(out, tangent, level)

    tape = top.tape
    values, positions = [], []
    for position, arg in enumerate(args):
        if isinstance(arg, Var) and arg.level == level:
            values.append(arg.value)
            positions.append(position)
        else:
            values.append(arg)
    values = tuple(values)
    out = _bind(prim, values, params)
    partials = tuple(partial(_pullback, prim, position, values, out, params) for position in positions)
    return tape.record(prim.name, out, tuple(args[p].index for p in positions), partials)


def _pullback(prim: Primitive, position: int, primals: tuple, out, params: dict, cotangent):
    return prim.vjp(position, cotangent, primals, out, **params)


# -- rule helpers -------------------------------------------------------------

def _accumulate(*terms):
    total = None
    for term in terms:
        if term is None:
            continue
        total = term if total is None else add(total, term)
    return total


def _fit(tangent, shape):
    if tangent is None or shape_of(tangent) == shape:
        return tangent
    return broadcast_to(tangent, shape)


def _unbroadcast(cotangent, shape):
    cshape = shape_of(cotangent)
    if cshape == tuple(shape):
        return cotangent
    lead = len(cshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, extent in enumerate(shape) if extent == 1 and cshape[lead + i] != 1
    )
    if axes:
        cotangent = reduce_sum(cotangent, axis=axes)
    return reshape(cotangent, tuple(shape))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(item, (np.ndarray, list)) for item in items)


# -- primitive rules ------------------------------------------------------------

def _add_jvp(primals, tangents, out):
    shape = shape_of(out)
    return _accumulate(_fit(tangents[0], shape), _fit(tangents[1], shape))


def _sub_jvp(primals, tangents, out):
    shape = shape_of(out)
    right = None if tangents[1] is None else negative(tangents[1])
    return _accumulate(_fit(tangents[0], shape), _fit(right, shape))


def _sub_vjp(position, g, primals, out):
    g = g if position == 0 else negative(g)
    return _unbroadcast(g, shape_of(primals[position]))


def _mul_jvp(primals, tangents, out):
    a, b = primals
    ta, tb = tangents
    shape = shape_of(out)
    return _accumulate(
        None if ta is None else _fit(multiply(ta, b), shape),
        None if tb is None else _fit(multiply(a, tb), shape),
    )


def _mul_vjp(position, g, primals, out):
    other = primals[1 - position]
    return _unbroadcast(multiply(g, other), shape_of(primals[position]))


def _div_jvp(primals, tangents, out):
    _, b = primals
    ta, tb = tangents
    shape = shape_of(out)
    return _accumulate(
        None if ta is None else _fit(divide(ta, b), shape),
        None if tb is None else _fit(negative(divide(multiply(out, tb), b)), shape),
    )


def _div_vjp(position, g, primals, out):
    _, b = primals
    if position == 0:
        return _unbroadcast(divide(g, b), shape_of(primals[0]))
    return _unbroadcast(negative(divide(multiply(g, out), b)), shape_of(b))


def _power_slope(a, exponent):
    return multiply(exponent, _POWER(a, exponent=exponent - 1.0))


def _power_jvp(primals, tangents, out, exponent):
    return _fit(multiply(tangents[0], _power_slope(primals[0], exponent)), shape_of(out))


def _power_vjp(position, g, primals, out, exponent):
    return _unbroadcast(multiply(g, _power_slope(primals[0], exponent)), shape_of(primals[0]))


def _matmul_impl(a, b):
    if np.ndim(a) < 1 or np.ndim(b) not in (1, 2):
        raise ADError(f"matmul operands must be (..., k) @ (k[, m]), got {np.shape(a)} and {np.shape(b)}")
    return np.matmul(a, b)


def _matmul_jvp(primals, tangents, out):
    a, b = primals
    ta, tb = tangents
    return _accumulate(
        None if ta is None else matmul(ta, b),
        None if tb is None else matmul(a, tb),
    )


def _matmul_vjp(position, g, primals, out):
    a, b = primals
    a_shape, b_shape = shape_of(a), shape_of(b)
    if position == 0:
        if len(b_shape) == 1:
            grad = multiply(expand_last(g), b)
        elif len(a_shape) == 1:
            grad = matmul(b, g)
        else:
            grad = matmul(g, transpose(b))
        return _unbroadcast(grad, a_shape)
    if len(b_shape) == 1:
        return _unbroadcast(multiply(a, expand_last(g)), b_shape)
    if len(a_shape) == 1:
        return multiply(expand_last(a), reshape(g, (1,) + shape_of(g)))
    rows = reshape(a, (-1, a_shape[-1]))
    grads = reshape(g, (-1, b_shape[-1]))
    return matmul(transpose(rows), grads)


def _sum_vjp(position, g, primals, out, axis=None, keepdims=False):
    shape = shape_of(primals[0])
    if not keepdims:
        axes = _normalize_axes(axis, len(shape))
        g = reshape(g, tuple(1 if i in axes else n for i, n in enumerate(shape)))
    return broadcast_to(g, shape)


def _transpose_vjp(position, g, primals, out, axes=None):
    inverse = None if axes is None else tuple(int(i) for i in np.argsort(axes))
    return transpose(g, inverse)


def _scatter_impl(g, index, shape):
    buffer = np.zeros(shape)
    if _is_fancy(index):
        np.add.at(buffer, index, g)
    else:
        buffer[index] += g
    return buffer


def _concatenate_jvp(primals, tangents, out, axis=0):
    if all(t is None for t in tangents):
        return None
    filled = [np.zeros(shape_of(p)) if t is None else t for p, t in zip(primals, tangents)]
    return _CONCATENATE(*filled, axis=axis)


def _concatenate_vjp(position, g, primals, out, axis=0):
    shapes = [shape_of(p) for p in primals]
    ax = axis % len(shapes[0])
    start = sum(s[ax] for s in shapes[:position])
    stop = start + shapes[position][ax]
    return getitem(g, (slice(None),) * ax + (slice(start, stop),))


_ADD = Primitive(
    "add", np.add, _add_jvp,
    lambda position, g, primals, out: _unbroadcast(g, shape_of(primals[position])),
)
_SUBTRACT = Primitive("subtract", np.subtract, _sub_jvp, _sub_vjp)
_MULTIPLY = Primitive("multiply", np.multiply, _mul_jvp, _mul_vjp)
_DIVIDE = Primitive("divide", np.divide, _div_jvp, _div_vjp)
_NEGATIVE = Primitive(
    "negative", np.negative,
    lambda primals, tangents, out: negative(tangents[0]),
    lambda position, g, primals, out: negative(g),
)
_POWER = Primitive("power", lambda a, exponent: np.power(a, exponent), _power_jvp, _power_vjp)
_EXP = Primitive(
    "exp", np.exp,
    lambda primals, tangents, out: multiply(out, tangents[0]),
    lambda position, g, primals, out: multiply(g, out),
)
_LOG = Primitive(
    "log", np.log,
    lambda primals, tangents, out: divide(tangents[0], primals[0]),
    lambda position, g, primals, out: divide(g, primals[0]),
)
_SIN = Primitive(
    "sin", np.sin,
    lambda primals, tangents, out: multiply(cos(primals[0]), tangents[0]),
    lambda position, g, primals, out: multiply(g, cos(primals[0])),
)
_COS = Primitive(
    "cos", np.cos,
    lambda primals, tangents, out: negative(multiply(sin(primals[0]), tangents[0])),
    lambda position, g, primals, out: negative(multiply(g, sin(primals[0]))),
)
_TANH = Primitive(
    "tanh", np.tanh,
    lambda primals, tangents, out: multiply(subtract(1.0, multiply(out, out)), tangents[0]),
    lambda position, g, primals, out: multiply(g, subtract(1.0, multiply(out, out))),
)
_MATMUL = Primitive("matmul", _matmul_impl, _matmul_jvp, _matmul_vjp)
_SUM = Primitive(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    lambda primals, tangents, out, axis=None, keepdims=False: reduce_sum(tangents[0], axis=axis, keepdims=keepdims),
    _sum_vjp,
)
_BROADCAST = Primitive(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape),
    lambda primals, tangents, out, shape: broadcast_to(tangents[0], shape),
    lambda position, g, primals, out, shape: _unbroadcast(g, shape_of(primals[0])),
)
_RESHAPE = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda primals, tangents, out, shape: reshape(tangents[0], shape),
    lambda position, g, primals, out, shape: reshape(g, shape_of(primals[0])),
)
_TRANSPOSE = Primitive(
    "transpose",
    lambda a, axes=None: np.transpose(a, axes),
    lambda primals, tangents, out, axes=None: transpose(tangents[0], axes),
    _transpose_vjp,
)
_GETITEM = Primitive(
    "getitem",
    lambda a, index: np.asarray(a[index], dtype=np.float64),
    lambda primals, tangents, out, index: getitem(tangents[0], index),
    lambda position, g, primals, out, index: _SCATTER(g, index=index, shape=shape_of(primals[0])),
)
_SCATTER = Primitive(
    "scatter_add",
    _scatter_impl,
    lambda primals, tangents, out, index, shape: _SCATTER(tangents[0], index=index, shape=shape),
    lambda position, g, primals, out, index, shape: getitem(g, index),
)
_CONCATENATE = Primitive(
    "concatenate",
    lambda *arrays, axis=0: np.concatenate(arrays, axis=axis),
    _concatenate_jvp,
    _concatenate_vjp,
)


# -- public primitive surface -------------------------------------------------

def add(a, b):
    return _ADD(a, b)


def subtract(a, b):
    return _SUBTRACT(a, b)


def multiply(a, b):
    return _MULTIPLY(a, b)


def divide(a, b):
    return _DIVIDE(a, b)


def negative(a):
    return _NEGATIVE(a)


def power(a, b):
    if isinstance(b, Traced):
        return exp(multiply(b, log(a)))
    return _POWER(a, exponent=np.asarray(b, dtype=np.float64))


def square(a):
    return multiply(a, a)


def sqrt(a):
    return power(a, 0.5)


def exp(a):
    return _EXP(a)


def log(a):
    return _LOG(a)


def sin(a):
    return _SIN(a)


def cos(a):
    return _COS(a)


def tanh(a):
    return _TANH(a)


def sigmoid(a):
    return divide(1.0, add(1.0, exp(negative(a))))


def matmul(a, b):
    return _MATMUL(a, b)


def reduce_sum(a, axis=None, keepdims: bool = False):
    return _SUM(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    shape = shape_of(a)
    count = int(np.prod([shape[i] for i in _normalize_axes(axis, len(shape))]))
    return divide(reduce_sum(a, axis=axis), float(count))


def broadcast_to(a, shape):
    return _BROADCAST(a, shape=tuple(shape))


def reshape(a, shape):
    return _RESHAPE(a, shape=tuple(shape))


def transpose(a, axes=None):
    return _TRANSPOSE(a, axes=axes)


def getitem(a, index):
    return _GETITEM(a, index=index)


def expand_last(a):
    return reshape(a, shape_of(a) + (1,))


def concatenate(arrays: Sequence, axis: int = 0):
    return _CONCATENATE(*arrays, axis=axis)


def stack(arrays: Sequence, axis: int = -1):
    expanded = []
    for array in arrays:
        shape = shape_of(array)
        position = axis % (len(shape) + 1)
        expanded.append(reshape(array, shape[:position] + (1,) + shape[position:]))
    return concatenate(expanded, axis=axis)


_UFUNC_RULES: dict[np.ufunc, Callable] = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: multiply,
    np.true_divide: divide,
    np.negative: negative,
    np.positive: lambda a: a,
    np.power: power,
    np.square: square,
    np.sqrt: sqrt,
    np.exp: exp,
    np.log: log,
    np.sin: sin,
    np.cos: cos,
    np.tanh: tanh,
    np.matmul: matmul,
}


# -- reductions ---------------------------------------------------------------

def pairwise_sum(values):
    """Sum a 1-D tensor with a balanced pairwise tree.

    Entries are reduced in ascending order of their primal values, so the
    result is independent of the order in which points were supplied.
    """
    values = _coerce(values)
    shape = shape_of(values)
    if len(shape) != 1:
        raise ADError(f"pairwise_sum expects a 1-D tensor, got shape {shape}")
    count = shape[0]
    if count == 0:
        raise ADError("pairwise_sum of an empty tensor")
    values = getitem(values, np.argsort(primal(values), kind="stable"))
    while count > 1:
        half = count // 2
        paired = add(getitem(values, slice(0, 2 * half, 2)), getitem(values, slice(1, 2 * half, 2)))
        if count % 2:
            paired = concatenate([paired, getitem(values, slice(2 * half, count))])
        values = paired
        count = half + count % 2
    return getitem(values, 0)


def pairwise_mean(values):
    return divide(pairwise_sum(values), float(shape_of(values)[0]))


# -- transformations ------------------------------------------------------------

def jvp(f: Callable, x, v):
    """Return ``(f(x), J_f(x) v)`` by pushing a tangent forward."""
    x, v = _coerce(x), _coerce(v)
    if shape_of(v) != shape_of(x):
        raise ADError(f"tangent shape {shape_of(v)} does not match input shape {shape_of(x)}")
    level = next(_levels)
    out = f(Dual(x, v, level))
    if isinstance(out, Dual) and out.level == level:
        return out.primal, out.tangent
    if isinstance(out, Traced) and out.level > level:
        raise ADError("a perturbation escaped the function it was created for")
    out = _coerce(out)
    return out, np.zeros(shape_of(out))


def vjp(f: Callable, x):
    """Return ``(f(x), grad f(x))`` for scalar-valued ``f`` via one tape sweep."""
    tape = Tape()
    try:
        xv = tape.variable(x)
        out = f(xv)
        if shape_of(out) != ():
            raise ADError(f"scalar output required, got shape {shape_of(out)}")
        (grad,) = tape.gradient(out, [xv])
        value = out.value if isinstance(out, Var) and out.tape is tape else _coerce(out)
    finally:
        tape.release()
    return value, grad


def second_directional(f: Callable, x, v):
    """Return ``v^T H_f(x) v`` as the tangent of a tangent."""
    return jvp(lambda y: jvp(f, y, v)[1], x, v)[1]


class LeafContainer(Protocol):
    def leaves(self) -> Mapping[str, Any]: ...

    def replace_leaves(self, leaves: Mapping[str, Any]) -> "LeafContainer": ...


def value_and_grads(fn: Callable, p: LeafContainer, has_aux: bool = False):
    """Differentiate each named scalar output of ``fn(p)`` with respect to every leaf of ``p``.

    ``fn`` is traced once and the tape is swept once per output. Returns
    ``(values, grads, aux)``; ``grads[name]`` has the structure of ``p``.
    """
    tape = Tape()
    try:
        traced = {path: tape.variable(leaf) for path, leaf in p.leaves().items()}
        result = fn(p.replace_leaves(traced))
        outputs, aux = result if has_aux else (result, None)
        wrt = list(traced.values())
        values, grads = {}, {}
        for name, out in outputs.items():
            if shape_of(out) != ():
                raise ADError(f"scalar output required for '{name}', got shape {shape_of(out)}")
            grads[name] = p.replace_leaves(dict(zip(traced, tape.gradient(out, wrt))))
            values[name] = out.value if isinstance(out, Var) and out.tape is tape else _coerce(out)
    finally:
        tape.release()
    return values, grads, aux


def value_and_grad_wrt_params(loss: Callable, p: LeafContainer, has_aux: bool = False):
    def named(q):
        result = loss(q)
        if has_aux:
            value, aux = result
            return {"loss": value}, aux
        return {"loss": result}

    values, grads, aux = value_and_grads(named, p, has_aux=has_aux)
    if has_aux:
        return (values["loss"], aux), grads["loss"]
    return values["loss"], grads["loss"]


def grad_wrt_params(loss: Callable, p: LeafContainer):
    """Gradient of a scalar loss over every leaf of both parameter branches."""
    return value_and_grad_wrt_params(loss, p)[1]
