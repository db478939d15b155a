"""Scalar reverse-mode automatic differentiation on a flat tape.

The tape is a set of preallocated arrays (op code, up to three operand ids,
primal value) plus a small metadata vector.  Every primitive is a numba
kernel, so the same recording code runs from plain Python (through
:class:`Tape`) and from compiled rollout loops in :mod:`ceapg.apg`.

A VarId is just the integer index of a node.  Operands always have a smaller
index than the node that uses them, so a single reverse sweep computes all
adjoints.

Kink conventions: ``relu'(0) = 0``; ``min``/``max`` send the gradient to the
first operand on ties; ``clamp`` passes no gradient at (or beyond) a bound
except to the active bound operand when strictly outside.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numba import njit

LEAF = 0
ADD = 1
SUB = 2
MUL = 3
DIV = 4
NEG = 5
SIN = 6
COS = 7
TANH = 8
SIGMOID = 9
RELU = 10
SQUARE = 11
SQRT = 12
MIN = 13
MAX = 14
CLAMP = 15

OPS = {
    "add": (ADD, 2),
    "sub": (SUB, 2),
    "mul": (MUL, 2),
    "div": (DIV, 2),
    "neg": (NEG, 1),
    "sin": (SIN, 1),
    "cos": (COS, 1),
    "tanh": (TANH, 1),
    "sigmoid": (SIGMOID, 1),
    "relu": (RELU, 1),
    "square": (SQUARE, 1),
    "sqrt": (SQRT, 1),
    "min": (MIN, 2),
    "max": (MAX, 2),
    "clamp": (CLAMP, 3),
}

# metadata slots
_SIZE = 0
_ERR = 1
_ERR_NODE = 2

ERR_NONE = 0
ERR_NONFINITE = 1
ERR_DIV_ZERO = 2
ERR_SQRT_DOMAIN = 3

_ERR_TEXT = {
    ERR_NONFINITE: "non-finite value",
    ERR_DIV_ZERO: "division by zero",
    ERR_SQRT_DOMAIN: "sqrt of negative number",
}


class TapeError(ArithmeticError):
    """A primitive produced an invalid value; ``node`` is the offending VarId."""

    def __init__(self, code: int, node: int):
        self.code = code
        self.node = node
        super().__init__(f"{_ERR_TEXT.get(code, 'tape error')} at node {node}")


class TapeBuf(NamedTuple):
    op: np.ndarray  # int8[cap]
    args: np.ndarray  # int32[cap, 3]
    val: np.ndarray  # float64[cap]
    meta: np.ndarray  # int64[3]: size, error code, error node


def new_buffer(capacity: int) -> TapeBuf:
    capacity = max(int(capacity), 1)
    return TapeBuf(
        np.zeros(capacity, np.int8),
        np.full((capacity, 3), -1, np.int32),
        np.zeros(capacity, np.float64),
        np.zeros(3, np.int64),
    )


def reset_buffer(buf: TapeBuf) -> None:
    buf.meta[:] = 0


# ---------------------------------------------------------------------------
# recording kernels


@njit(cache=True, inline='always')
def _push(t, code, a, b, c, value):
    n = t.meta[0]
    if n >= t.val.shape[0]:
        raise IndexError("tape capacity exceeded")
    # flag before the stores: checking afterwards defeats LLVM (~10x slower)
    if not math.isfinite(value) and t.meta[1] == 0:
        t.meta[1] = ERR_NONFINITE
        t.meta[2] = n
    t.op[n] = code
    t.args[n, 0] = a
    t.args[n, 1] = b
    t.args[n, 2] = c
    t.val[n] = value
    t.meta[0] = n + 1
    return n


@njit(cache=True, inline='always')
def leaf(t, value):
    return _push(t, LEAF, -1, -1, -1, value)


@njit(cache=True, inline='always')
def add(t, a, b):
    return _push(t, ADD, a, b, -1, t.val[a] + t.val[b])


@njit(cache=True, inline='always')
def sub(t, a, b):
    return _push(t, SUB, a, b, -1, t.val[a] - t.val[b])


@njit(cache=True, inline='always')
def mul(t, a, b):
    return _push(t, MUL, a, b, -1, t.val[a] * t.val[b])


@njit(cache=True, inline='always')
def div(t, a, b):
    den = t.val[b]
    if den == 0.0:
        if t.meta[1] == 0:
            t.meta[1] = ERR_DIV_ZERO
            t.meta[2] = t.meta[0]
        return _push(t, DIV, a, b, -1, np.nan)
    return _push(t, DIV, a, b, -1, t.val[a] / den)


@njit(cache=True, inline='always')
def neg(t, a):
    return _push(t, NEG, a, -1, -1, -t.val[a])


@njit(cache=True, inline='always')
def sin(t, a):
    return _push(t, SIN, a, -1, -1, math.sin(t.val[a]))


@njit(cache=True, inline='always')
def cos(t, a):
    return _push(t, COS, a, -1, -1, math.cos(t.val[a]))


@njit(cache=True, inline='always')
def tanh(t, a):
    return _push(t, TANH, a, -1, -1, math.tanh(t.val[a]))


@njit(cache=True, inline='always')
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline='always')
def sigmoid(t, a):
    return _push(t, SIGMOID, a, -1, -1, _sigmoid(t.val[a]))


@njit(cache=True, inline='always')
def relu(t, a):
    x = t.val[a]
    return _push(t, RELU, a, -1, -1, x if x > 0.0 else 0.0)


@njit(cache=True, inline='always')
def square(t, a):
    x = t.val[a]
    return _push(t, SQUARE, a, -1, -1, x * x)


@njit(cache=True, inline='always')
def sqrt(t, a):
    x = t.val[a]
    if x < 0.0:
        if t.meta[1] == 0:
            t.meta[1] = ERR_SQRT_DOMAIN
            t.meta[2] = t.meta[0]
        return _push(t, SQRT, a, -1, -1, np.nan)
    return _push(t, SQRT, a, -1, -1, math.sqrt(x))


@njit(cache=True, inline='always')
def minimum(t, a, b):
    x = t.val[a]
    y = t.val[b]
    return _push(t, MIN, a, b, -1, x if x <= y else y)


@njit(cache=True, inline='always')
def maximum(t, a, b):
    x = t.val[a]
    y = t.val[b]
    return _push(t, MAX, a, b, -1, x if x >= y else y)


@njit(cache=True, inline='always')
def clamp(t, a, lo, hi):
    x = t.val[a]
    l = t.val[lo]
    h = t.val[hi]
    v = x
    if x < l:
        v = l
    elif x > h:
        v = h
    return _push(t, CLAMP, a, lo, hi, v)


@njit(cache=True)
def scale(t, a, c):
    """Multiply by a constant (leaf + mul)."""
    return mul(t, a, leaf(t, c))


@njit(cache=True)
def dot(t, w_ids, x_ids):
    acc = mul(t, w_ids[0], x_ids[0])
    for j in range(1, x_ids.shape[0]):
        acc = add(t, acc, mul(t, w_ids[j], x_ids[j]))
    return acc


@njit(cache=True)
def apply_code(t, code, a, b, c):
    if code == ADD:
        return add(t, a, b)
    elif code == SUB:
        return sub(t, a, b)
    elif code == MUL:
        return mul(t, a, b)
    elif code == DIV:
        return div(t, a, b)
    elif code == NEG:
        return neg(t, a)
    elif code == SIN:
        return sin(t, a)
    elif code == COS:
        return cos(t, a)
    elif code == TANH:
        return tanh(t, a)
    elif code == SIGMOID:
        return sigmoid(t, a)
    elif code == RELU:
        return relu(t, a)
    elif code == SQUARE:
        return square(t, a)
    elif code == SQRT:
        return sqrt(t, a)
    elif code == MIN:
        return minimum(t, a, b)
    elif code == MAX:
        return maximum(t, a, b)
    elif code == CLAMP:
        return clamp(t, a, b, c)
    raise ValueError("unknown op code")


# ---------------------------------------------------------------------------
# reverse sweep


@njit(cache=True)
def backward_kernel(op, args, val, out, adj):
    adj[: out + 1] = 0.0
    adj[out] = 1.0
    for k in range(out, -1, -1):
        g = adj[k]
        if g == 0.0:
            continue
        code = op[k]
        if code == LEAF:
            continue
        a = args[k, 0]
        b = args[k, 1]
        if code == ADD:
            adj[a] += g
            adj[b] += g
        elif code == SUB:
            adj[a] += g
            adj[b] -= g
        elif code == MUL:
            adj[a] += g * val[b]
            adj[b] += g * val[a]
        elif code == DIV:
            adj[a] += g / val[b]
            adj[b] -= g * val[k] / val[b]
        elif code == NEG:
            adj[a] -= g
        elif code == SIN:
            adj[a] += g * math.cos(val[a])
        elif code == COS:
            adj[a] -= g * math.sin(val[a])
        elif code == TANH:
            y = val[k]
            adj[a] += g * (1.0 - y * y)
        elif code == SIGMOID:
            y = val[k]
            adj[a] += g * y * (1.0 - y)
        elif code == RELU:
            if val[a] > 0.0:
                adj[a] += g
        elif code == SQUARE:
            adj[a] += 2.0 * g * val[a]
        elif code == SQRT:
            if val[k] > 0.0:
                adj[a] += 0.5 * g / val[k]
        elif code == MIN:
            if val[a] <= val[b]:
                adj[a] += g
            else:
                adj[b] += g
        elif code == MAX:
            if val[a] >= val[b]:
                adj[a] += g
            else:
                adj[b] += g
        elif code == CLAMP:
            x = val[a]
            lo = val[b]
            hi = val[args[k, 2]]
            if lo < x < hi:
                adj[a] += g
            elif x < lo:
                adj[b] += g
            elif x > hi:
                adj[args[k, 2]] += g
    return adj


def raise_if_failed(buf: TapeBuf) -> None:
    if buf.meta[_ERR] != ERR_NONE:
        raise TapeError(int(buf.meta[_ERR]), int(buf.meta[_ERR_NODE]))


# ---------------------------------------------------------------------------
# Python surface


class Tape:
    """Growable scalar tape.

    >>> t = Tape()
    >>> x = t.leaf(3.0); y = t.leaf(4.0)
    >>> z = t.apply("mul", x, y)
    >>> grads = t.backward(z)
    >>> float(grads[x]), float(grads[y])
    (4.0, 3.0)
    """

    def __init__(self, capacity: int = 256):
        self.buf = new_buffer(capacity)

    def __len__(self) -> int:
        return int(self.buf.meta[_SIZE])

    def reserve(self, extra: int) -> TapeBuf:
        """Make room for ``extra`` more nodes and return the live buffer."""
        need = len(self) + int(extra)
        cap = self.buf.val.shape[0]
        if need > cap:
            new = new_buffer(max(need, 2 * cap))
            n = len(self)
            new.op[:n] = self.buf.op[:n]
            new.args[:n] = self.buf.args[:n]
            new.val[:n] = self.buf.val[:n]
            new.meta[:] = self.buf.meta
            self.buf = new
        return self.buf

    def _check(self, var: int) -> int:
        var = int(var)
        if not 0 <= var < len(self):
            raise IndexError(f"VarId {var} not on this tape (size {len(self)})")
        return var

    def leaf(self, value: float) -> int:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"leaf value must be finite, got {value}")
        return int(leaf(self.reserve(1), value))

    def apply(self, op: str, *operands: int) -> int:
        try:
            code, arity = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if len(operands) != arity:
            raise ValueError(f"{op} takes {arity} operands, got {len(operands)}")
        ids = [self._check(v) for v in operands] + [-1] * (3 - arity)
        buf = self.reserve(1)
        node = int(apply_code(buf, code, ids[0], ids[1], ids[2]))
        if buf.meta[_ERR] != ERR_NONE:
            err = TapeError(int(buf.meta[_ERR]), int(buf.meta[_ERR_NODE]))
            # drop the bad node so the tape stays usable
            buf.meta[:] = (node, 0, 0)
            raise err
        return node

    def value(self, var: int) -> float:
        return float(self.buf.val[self._check(var)])

    def values(self, ids) -> np.ndarray:
        return self.buf.val[np.asarray(ids, dtype=np.int64)].copy()

    def backward(self, output: int) -> np.ndarray:
        """Adjoints of every node with respect to ``output`` (the GradientMap).

        Entry ``k`` is d(output)/d(node k); nodes created after ``output`` or
        not reachable from it get 0.
        """
        out = self._check(output)
        n = len(self)
        adj = np.zeros(n, np.float64)
        backward_kernel(self.buf.op, self.buf.args, self.buf.val, out, adj)
        return adj
