"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` records every primitive applied to tensors that require
gradients while it is active (``with Graph() as g: ...``). Outside a graph,
primitives just compute values, which is the fast inference path.

Backward visits the recorded nodes in exact reverse order of the forward
pass; each node's backward function accumulates into its parents' ``grad``
buffers.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64

_state = threading.local()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; keeps test oracles readable
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Ordered tape of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _graph_stack() -> list[Graph]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it when a graph is active and any input needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    graph = current_graph()
    if graph is None or not any(p.requires_grad for p in parents):
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
        return out
    out.requires_grad = True
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    for p in parents:
        if p.requires_grad and p.backward_fn is None:
            graph.leaves.setdefault(id(p), p)
    graph.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    # flatten batch axes: 2-D BLAS is far faster than numpy's stacked matmul
    k = a.shape[-1]
    out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return _record(y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _record(y, (x,), backward)


def lstm_scan(z, U) -> Tensor:
    """LSTM recurrence over axis 1 of pre-activations ``z`` (..., n, 4H) given input terms.

    ``z`` is (B, n, d, 4H): n sequential steps, each advancing d independent
    chains at once. Gate order (i, f, g, o); ``U`` is (4H, H) and the step
    pre-activation is ``z[:, k] + h_{k-1} @ U.T``. Returns hidden states
    (B, n, d, H). Backward is hand-written BPTT, so the whole scan is one
    tape node.
    """
    z, U = as_tensor(z), as_tensor(U)
    B, n, d, G = z.shape
    H = U.shape[1]
    if G != 4 * H or U.shape != (4 * H, H):
        raise ShapeError(f"lstm_scan: z {z.shape} incompatible with U {U.shape}")
    acts = np.empty((B, n, d, G))
    cs = np.empty((B, n, d, H))
    tcs = np.empty((B, n, d, H))
    hs = np.empty((B, n, d, H))
    Ut = U.data.T
    for k in range(n):
        pre = z.data[:, k] if k == 0 else z.data[:, k] + (hs[:, k - 1].reshape(-1, H) @ Ut).reshape(B, d, G)
        a = acts[:, k]
        a[..., : 2 * H] = _sigmoid(pre[..., : 2 * H])
        a[..., 2 * H : 3 * H] = np.tanh(pre[..., 2 * H : 3 * H])
        a[..., 3 * H :] = _sigmoid(pre[..., 3 * H :])
        i, f, g, o = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
        cs[:, k] = i * g if k == 0 else f * cs[:, k - 1] + i * g
        tcs[:, k] = np.tanh(cs[:, k])
        hs[:, k] = o * tcs[:, k]

    def backward(gh):
        dz = np.empty_like(acts)
        dU = np.zeros_like(U.data)
        dh_next = np.zeros((B, d, H))
        dc_next = np.zeros((B, d, H))
        for k in range(n - 1, -1, -1):
            a = acts[:, k]
            i, f, g, o = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
            dh = gh[:, k] + dh_next
            tc = tcs[:, k]
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dzk = dz[:, k]
            dzk[..., :H] = dc * g * i * (1.0 - i)
            dzk[..., H : 2 * H] = (dc * cs[:, k - 1] * f * (1.0 - f)) if k else 0.0
            dzk[..., 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dzk[..., 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if k:
                flat = dzk.reshape(-1, G)
                dU += flat.T @ hs[:, k - 1].reshape(-1, H)
                dh_next = (flat @ U.data).reshape(B, d, H)
        _accumulate(z, dz)
        _accumulate(U, dU)

    return _record(hs, (z, U), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")

    def backward(g):
        _accumulate(x, g.T)

    return _record(x.data.T, (x,), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _record(out, (x,), backward)


def slice_(x, idx) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis. Negative steps allowed."""
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros(x.shape, dtype=DTYPE)
        x.grad[idx] += g

    return _record(out, (x,), backward)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                _accumulate(x, np.take(g, np.arange(lo, hi), axis=axis))

    return _record(out, xs, backward)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[x.shape for x in xs]}") from exc

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for x, part in zip(xs, parts):
            if x.requires_grad:
                _accumulate(x, part)

    return _record(out, xs, backward)


def gather_rows(m, rows) -> Tensor:
    """Row lookup ``m[rows]`` for an integer index array (embedding lookup)."""
    m = as_tensor(m)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= m.shape[0]):
        raise IndexError(f"row index out of range for {m.shape[0]} rows")
    out = m.data[rows]

    def backward(g):
        if not m.requires_grad:
            return
        if m.grad is None:
            m.grad = np.zeros(m.shape, dtype=DTYPE)
        np.add.at(m.grad, rows, g)

    return _record(out, (m,), backward)


def sum_(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _record(np.asarray(x.data.sum()), (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply_mask(x, mask)


def apply_mask(x, mask: np.ndarray) -> Tensor:
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=DTYPE)

    def backward(g):
        _accumulate(x, g * mask)

    return _record(x.data * mask, (x,), backward)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[Tensor, np.ndarray]:
    """Mean categorical cross-entropy of ``logits`` (B x G) against class ``labels``.

    Returns the scalar loss node and the row-softmax probabilities. The
    backward pass uses the fused gradient ``(probs - onehot) / B``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, n_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    logp = log_softmax_rows(logits.data)
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        _accumulate(logits, d * (g / n))

    return _record(loss, (logits,), backward), probs


# --------------------------------------------------------------------------
# reverse pass


def backward(graph: Graph, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Run reverse mode from scalar ``loss`` over ``graph``.

    Returns gradients for ``leaves`` (default: every leaf the graph touched, in
    first-use order). Leaves the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_list = list(graph.leaves.values()) if leaves is None else list(leaves)
    for t in leaf_list:
        t.grad = None
    for t in graph.leaves.values():
        t.grad = None
    for node in graph.nodes:
        node.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            if node.grad is not None:
                node.backward_fn(node.grad)
    grads = [t.grad if t.grad is not None else np.zeros(t.shape, dtype=DTYPE) for t in leaf_list]
    # release intermediate buffers; leaves keep theirs for the caller
    for node in graph.nodes:
        node.grad = None
    return grads


def grad_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor using the primitives above. The
    error per coordinate is ``|fd - analytic| / max(1, |analytic|)``.
    """
    base = np.array(as_tensor(theta).data, dtype=DTYPE, copy=True)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        out = f(leaf)
    (analytic,) = backward(g, out, [leaf])
    flat = base.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = float(f(Tensor(plus.reshape(base.shape))).data)
        f_minus = float(f(Tensor(minus.reshape(base.shape))).data)
        fd[i] = (f_plus - f_minus) / (2.0 * h)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(fd - a) / np.maximum(1.0, np.abs(a))))
