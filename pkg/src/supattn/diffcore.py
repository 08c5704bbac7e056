"""Dense reverse-mode differentiation on float64 numpy arrays.

Graphs are built by calling the op functions below on :class:`Node` objects
and differentiated with :func:`backward`.  Every op stores the name of its
backward rule; the rule itself is looked up in :data:`BACKWARD` when the
backward pass runs, so a rule can be swapped out (the gradient checker's
negative control relies on this).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BACKWARD",
    "DimensionError",
    "Node",
    "NumericError",
    "add",
    "backward",
    "concat",
    "const",
    "dropout",
    "log_softmax_rows",
    "lstm_cell",
    "lstm_sequence",
    "matmul",
    "mul",
    "pick",
    "reshape",
    "scale",
    "sigmoid",
    "slice_",
    "softmax_rows",
    "sub",
    "sum_",
    "take_rows",
    "tanh",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A forward value or gradient became NaN or infinite."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """A value in the computation graph together with its gradient slot."""

    __slots__ = ("value", "grad", "parents", "op", "ctx")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf", ctx=None):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.op = op
        self.ctx = ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value: np.ndarray, parents, op: str, ctx=None) -> Node:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")
    return Node(value, parents, op, ctx)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- forward ops


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _make(a.value @ b.value, (a, b), "matmul")


def add(a: Node, b: Node) -> Node:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    if out != a.shape:
        raise DimensionError(f"add may only broadcast its second operand: {a.shape} + {b.shape}")
    return _make(a.value + b.value, (a, b), "add")


def sub(a: Node, b: Node) -> Node:
    return add(a, scale(b, -1.0))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _make(a.value * b.value, (a, b), "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), "scale", float(c))


def tanh(a: Node) -> Node:
    return _make(np.tanh(a.value), (a,), "tanh")


def sigmoid(a: Node) -> Node:
    return _make(_sigmoid(a.value), (a,), "sigmoid")


def sum_(a: Node) -> Node:
    """Sum of all elements, as a 0-d node."""
    return _make(np.asarray(a.value.sum()), (a,), "sum")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), "transpose")


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    return _make(a.value.reshape(shape).copy(), (a,), "reshape")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        shapes = [n.shape for n in nodes]
        raise DimensionError(f"concat shape mismatch: {shapes}") from exc
    sizes = [n.shape[axis] for n in nodes]
    return _make(value, nodes, "concat", (axis, sizes))


def slice_(a: Node, key) -> Node:
    """Basic numpy indexing (ints and slices)."""
    return _make(np.array(a.value[key]), (a,), "slice", key)


def take_rows(a: Node, index: Sequence[int]) -> Node:
    """Gather rows of a 2-D node; an embedding lookup."""
    index = np.asarray(index, dtype=np.intp)
    return _make(a.value[index], (a,), "take_rows", index)


def pick(a: Node, cols: Sequence[int]) -> Node:
    """Select ``a[k, cols[k]]`` for every row k, giving a 1-D node."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.value.ndim != 2 or len(cols) != a.shape[0]:
        raise DimensionError(f"pick needs one column per row: {a.shape} vs {len(cols)}")
    rows = np.arange(a.shape[0])
    return _make(a.value[rows, cols], (a,), "pick", (rows, cols))


def softmax_rows(a: Node) -> Node:
    x = a.value
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return _make(z / z.sum(axis=-1, keepdims=True), (a,), "softmax_rows")


def log_softmax_rows(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return _make(out, (a,), "log_softmax_rows")


def dropout(a: Node, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Node:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * mask, (a,), "dropout", mask)


def lstm_sequence(x: Node, w_ih: Node, w_hh: Node, b: Node, reverse: bool = False) -> Node:
    """Run an LSTM over the rows of ``x`` from zero initial state.

    Gate layout along the ``4H`` axis is input, forget, candidate, output.
    Returns the ``T x H`` hidden states in input order (also when ``reverse``).
    """
    xv = x.value
    T, n_in = xv.shape
    H = w_hh.shape[0]
    if w_ih.shape != (n_in, 4 * H) or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm shapes inconsistent: x {x.shape}, W_ih {w_ih.shape}, "
            f"W_hh {w_hh.shape}, b {b.shape}")
    gx = xv @ w_ih.value + b.value
    whh = w_hh.value
    gates = np.empty((T, 4 * H))
    cells = np.empty((T, H))
    tanh_c = np.empty((T, H))
    h_prev = np.zeros((T, H))
    c_prev = np.zeros((T, H))
    out = np.empty((T, H))
    h = np.zeros(H)
    c = np.zeros(H)
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_prev[t] = h
        c_prev[t] = c
        z = gx[t] + h @ whh
        g = np.empty(4 * H)
        g[:2 * H] = _sigmoid(z[:2 * H])
        g[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
        g[3 * H:] = _sigmoid(z[3 * H:])
        c = g[H:2 * H] * c + g[:H] * g[2 * H:3 * H]
        tc = np.tanh(c)
        h = g[3 * H:] * tc
        gates[t], cells[t], tanh_c[t], out[t] = g, c, tc, h
    ctx = (reverse, gates, tanh_c, h_prev, c_prev)
    return _make(out, (x, w_ih, w_hh, b), "lstm_sequence", ctx)


def lstm_cell(x: Node, h: Node, c: Node, w_ih: Node, w_hh: Node, b: Node) -> Node:
    """One LSTM step on 1-D vectors; returns ``[h', c']`` concatenated (length 2H)."""
    H = w_hh.shape[0]
    if h.shape != (H,) or c.shape != (H,) or x.value.ndim != 1:
        raise DimensionError(f"lstm_cell state shapes: x {x.shape}, h {h.shape}, c {c.shape}")
    z = x.value @ w_ih.value + h.value @ w_hh.value + b.value
    g = np.empty(4 * H)
    g[:2 * H] = _sigmoid(z[:2 * H])
    g[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
    g[3 * H:] = _sigmoid(z[3 * H:])
    c_new = g[H:2 * H] * c.value + g[:H] * g[2 * H:3 * H]
    tc = np.tanh(c_new)
    out = np.concatenate([g[3 * H:] * tc, c_new])
    return _make(out, (x, h, c, w_ih, w_hh, b), "lstm_cell", (g, tc))


# ------------------------------------------------------------ backward rules


def _gate_delta(g: np.ndarray, dc: np.ndarray, dh: np.ndarray, tc: np.ndarray,
                c_prev: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activation gradient and carry gradient for one LSTM step."""
    i, f, cand, o = g[..., :H], g[..., H:2 * H], g[..., 2 * H:3 * H], g[..., 3 * H:]
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * cand * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - cand * cand),
        dh * tc * o * (1.0 - o),
    ], axis=-1)
    return dz, dc * f


def _lstm_sequence_backward(node: Node, g: np.ndarray):
    x, w_ih, w_hh, b = node.parents
    reverse, gates, tanh_c, h_prev, c_prev = node.ctx
    T, H = g.shape
    whh_t = w_hh.value.T
    dz_all = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        dz, dc_next = _gate_delta(gates[t], dc_next, g[t] + dh_next, tanh_c[t], c_prev[t], H)
        dz_all[t] = dz
        dh_next = dz @ whh_t
    return (dz_all @ w_ih.value.T, x.value.T @ dz_all, h_prev.T @ dz_all, dz_all.sum(axis=0))


def _lstm_cell_backward(node: Node, g: np.ndarray):
    x, h, c, w_ih, w_hh, b = node.parents
    gates, tc = node.ctx
    H = h.shape[0]
    dz, dc_prev = _gate_delta(gates, g[H:], g[:H], tc, c.value, H)
    return (w_ih.value @ dz, w_hh.value @ dz, dc_prev,
            np.outer(x.value, dz), np.outer(h.value, dz), dz)


def _concat_backward(node: Node, g: np.ndarray):
    axis, sizes = node.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _slice_backward(node: Node, g: np.ndarray):
    out = np.zeros_like(node.parents[0].value)
    out[node.ctx] = g
    return (out,)


def _take_rows_backward(node: Node, g: np.ndarray):
    out = np.zeros_like(node.parents[0].value)
    np.add.at(out, node.ctx, g)
    return (out,)


def _pick_backward(node: Node, g: np.ndarray):
    out = np.zeros_like(node.parents[0].value)
    out[node.ctx] = g
    return (out,)


def _softmax_backward(node: Node, g: np.ndarray):
    y = node.value
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_backward(node: Node, g: np.ndarray):
    p = np.exp(node.value)
    return (g - p * g.sum(axis=-1, keepdims=True),)


BACKWARD: dict[str, Callable[[Node, np.ndarray], tuple]] = {
    "matmul": lambda n, g: (g @ n.parents[1].value.T, n.parents[0].value.T @ g),
    "add": lambda n, g: (g, _unbroadcast(g, n.parents[1].shape)),
    "mul": lambda n, g: (g * n.parents[1].value, g * n.parents[0].value),
    "scale": lambda n, g: (g * n.ctx,),
    "tanh": lambda n, g: (g * (1.0 - n.value ** 2),),
    "sigmoid": lambda n, g: (g * n.value * (1.0 - n.value),),
    "sum": lambda n, g: (np.full(n.parents[0].shape, float(g)),),
    "transpose": lambda n, g: (g.T,),
    "reshape": lambda n, g: (g.reshape(n.parents[0].shape),),
    "concat": _concat_backward,
    "slice": _slice_backward,
    "take_rows": _take_rows_backward,
    "pick": _pick_backward,
    "softmax_rows": _softmax_backward,
    "log_softmax_rows": _log_softmax_backward,
    "dropout": lambda n, g: (g * n.ctx,),
    "lstm_sequence": _lstm_sequence_backward,
    "lstm_cell": _lstm_cell_backward,
}


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every node reachable from a scalar root."""
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    root.grad = root.grad + np.ones_like(root.value)
    for node in reversed(order):
        if not node.parents:
            continue
        grads = BACKWARD[node.op](node, node.grad)
        for parent, pg in zip(node.parents, grads):
            if pg is None:
                continue
            parent.grad = parent.grad + pg
