"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array.  A :class:`Tape` records the nodes
created during one forward pass; :meth:`Tape.backward` walks them in reverse
creation order and accumulates gradients into every node that requires one.

Tapes are single use: a second backward call raises :class:`ContractError`.

    >>> tape = Tape()
    >>> a = tape.leaf([[2.0]])
    >>> b = tape.leaf([[3.0]])
    >>> tape.backward(matmul(a, b))
    >>> a.grad, b.grad
    (array([[3.]]), array([[2.]]))
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ContractError, DimensionError, DomainError


def as_matrix(value):
    """Coerce ``value`` to a 2-D float64 array (scalars become 1x1, vectors rows)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("value", "_grad", "parents", "op", "backward_fn", "tape", "requires_grad")

    def __init__(self, tape, value, parents=(), op="leaf", backward_fn=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.op = op
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        # lazily zero
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self):
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Creation-ordered record of the nodes of one forward pass."""

    def __init__(self):
        self.nodes = []
        # (candidate index set, chosen index, gap to runner-up) per max reduction
        self.max_events = []
        self._used = False

    def leaf(self, value, requires_grad=True):
        node = Node(self, as_matrix(value), requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    def _record(self, value, parents, op, backward_fn):
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, op, backward_fn if requires else None, requires)
        self.nodes.append(node)
        return node

    def backward(self, root):
        """Accumulate d(root)/d(node) into every node reachable from a 1x1 ``root``."""
        if self._used:
            raise ContractError("tape already consumed by a backward pass; rerun the forward pass")
        if root.tape is not self:
            raise ContractError("root node belongs to a different tape")
        if root.value.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar (1x1) root, got {root.value.shape}")
        self._used = True
        root._grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = node._grad
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = pg
                else:
                    parent._grad = parent._grad + pg


def _tape_of(*nodes):
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _same_shape(a, b, op):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")
    av, bv = a.value, b.value
    return _tape_of(a, b)._record(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    return a.tape._record(a.value.T, (a,), "transpose", lambda g: (g.T,))


def broadcast(a, shape):
    """Expand a 1x1, row (1xn) or column (mx1) node to ``shape``; backward sums."""
    rows, cols = a.value.shape
    if (rows not in (1, shape[0])) or (cols not in (1, shape[1])):
        raise DimensionError(f"broadcast: cannot expand {a.value.shape} to {tuple(shape)}")

    def back(g):
        if rows == 1 and shape[0] != 1:
            g = g.sum(axis=0, keepdims=True)
        if cols == 1 and shape[1] != 1:
            g = g.sum(axis=1, keepdims=True)
        return (g,)

    return a.tape._record(np.broadcast_to(a.value, shape).copy(), (a,), "broadcast", back)


def concat(nodes):
    """Join 1x1 nodes into a 1xm row."""
    if not nodes:
        raise ContractError("concat needs at least one node")
    for n in nodes:
        if n.value.shape != (1, 1):
            raise DimensionError(f"concat expects 1x1 nodes, got {n.value.shape}")
    tape = _tape_of(*nodes)
    value = np.array([[n.value[0, 0] for n in nodes]])
    count = len(nodes)
    return tape._record(value, tuple(nodes), "concat",
                        lambda g: tuple(g[:, j:j + 1] for j in range(count)))


def gather(a, index):
    """Select flat entries ``index`` of ``a`` into a 1xlen(index) row."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size == 0:
        raise ContractError("gather: empty index set")
    size = a.value.size
    if idx.min() < 0 or idx.max() >= size:
        raise ContractError(f"gather: index out of bounds for {size} entries")
    shape = a.value.shape

    def back(g):
        out = np.zeros(size)
        np.add.at(out, idx, g.ravel())
        return (out.reshape(shape),)

    return a.tape._record(a.value.ravel()[idx].reshape(1, -1), (a,), "gather", back)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _same_shape(a, b, "add")
    return _tape_of(a, b)._record(a.value + b.value, (a, b), "add", lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _tape_of(a, b)._record(a.value - b.value, (a, b), "sub", lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _tape_of(a, b)._record(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def div(a, b):
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError(f"div: zero divisor at flat index {int(np.flatnonzero(bv == 0)[0])}")
    out = av / bv
    return _tape_of(a, b)._record(out, (a, b), "div", lambda g: (g / bv, -g * out / bv))


def scale(a, c):
    c = float(c)
    return a.tape._record(a.value * c, (a,), "scale", lambda g: (g * c,))


def add_const(a, c):
    c = float(c)
    return a.tape._record(a.value + c, (a,), "add_const", lambda g: (g,))


def maximum_const(a, c):
    """Entrywise max(a, c); gradient flows only where ``a`` strictly exceeds ``c``."""
    c = float(c)
    mask = a.value > c
    return a.tape._record(np.where(mask, a.value, c), (a,), "maximum_const",
                          lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _stable_sigmoid(a.value)
    return a.tape._record(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), "relu", lambda g: (g * mask,))


def log(a):
    bad = a.value <= 0
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"log of non-positive entry {a.value.ravel()[i]!r} at flat index {i}")
    av = a.value
    return a.tape._record(np.log(av), (a,), "log", lambda g: (g / av,))


def sqrt(a):
    """Entrywise square root; the derivative at exactly 0 is taken as 0."""
    bad = a.value < 0
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(f"sqrt of negative entry {a.value.ravel()[i]!r} at flat index {i}")
    out = np.sqrt(a.value)

    def back(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return a.tape._record(out, (a,), "sqrt", back)


_ELEMENTWISE = {
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "log": log, "sqrt": sqrt,
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
}


def elementwise(op, *args):
    """Dispatch by name, e.g. ``elementwise("tanh", x)`` or ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# softmax and reductions


_TINY = np.finfo(np.float64).tiny


def softmax_with_temperature(scores, tau=1.0):
    """Softmax over the entries of a 1xn row after dividing by ``tau``."""
    tau = float(tau)
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if scores.value.shape[0] != 1 or scores.value.shape[1] < 1:
        raise DimensionError(f"softmax expects a 1xn row, got {scores.value.shape}")
    s = scores.value / tau
    e = np.exp(s - s.max())
    # floor at the smallest normal float so every entry stays in (0, 1]
    out = np.maximum(e / e.sum(), _TINY)

    def back(g):
        return (out * (g - (g * out).sum()) / tau,)

    return scores.tape._record(out, (scores,), "softmax", back)


def reduce_sum(a):
    shape = a.value.shape
    return a.tape._record(np.array([[a.value.sum()]]), (a,), "sum",
                          lambda g: (np.full(shape, g[0, 0]),))


def reduce_mean(a):
    shape = a.value.shape
    n = a.value.size
    return a.tape._record(np.array([[a.value.sum() / n]]), (a,), "mean",
                          lambda g: (np.full(shape, g[0, 0] / n),))


def max_over_index_set(a, index):
    """Max over the flat entries in ``index``; ties go to the lowest index."""
    idx = sorted(set(int(i) for i in index))
    if not idx:
        raise ContractError("max over an empty index set")
    size = a.value.size
    if idx[0] < 0 or idx[-1] >= size:
        raise ContractError(f"max index set {idx} out of bounds for {size} entries")
    flat = a.value.ravel()
    vals = flat[idx]
    pos = int(np.argmax(vals))  # first occurrence, idx is sorted
    win = idx[pos]
    if len(idx) > 1:
        rest = np.delete(vals, pos)
        gap = float(vals[pos] - rest.max())
    else:
        gap = np.inf
    a.tape.max_events.append((tuple(idx), win, gap))
    shape = a.value.shape

    def back(g):
        out = np.zeros(size)
        out[win] = g[0, 0]
        return (out.reshape(shape),)

    return a.tape._record(np.array([[flat[win]]]), (a,), "max", back)


def reduce(op, a, index=None):
    if op == "sum":
        return reduce_sum(a)
    if op == "mean":
        return reduce_mean(a)
    if op == "max_over_index_set":
        return max_over_index_set(a, index)
    raise ContractError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int
    failures: list = field(default_factory=list)   # (param index, flat index, analytic, numeric, rel)
    skipped: list = field(default_factory=list)    # (param index, flat index, reason)

    @property
    def ok(self):
        return not self.failures

    def to_dict(self):
        return {
            "ok": self.ok,
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "checked": self.checked,
            "failures": [list(f) for f in self.failures],
            "skipped": [list(s) for s in self.skipped],
        }


def _evaluate(f, params):
    tape = Tape()
    leaves = [tape.leaf(p.copy()) for p in params]
    out = f(tape, *leaves)
    return tape, leaves, out


def gradcheck(f, params, h=1e-5, tol=1e-4, floor=1e-8):
    """Compare backward gradients of ``f`` with central differences.

    ``f(tape, *leaves)`` must build a 1x1 node from leaf nodes for ``params``.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates whose perturbation flips the winner of any max reduction are
    reported in ``skipped`` as nondifferentiable points rather than failures.
    """
    params = [as_matrix(p).copy() for p in params]
    tape, leaves, out = _evaluate(f, params)
    tape.backward(out)
    analytic = [leaf.grad for leaf in leaves]

    report = GradcheckReport(max_rel_error=0.0, tol=tol, checked=0)
    for pi, p in enumerate(params):
        for j in range(p.size):
            orig = p.flat[j]
            p.flat[j] = orig + h
            tp, _, fp = _evaluate(f, params)
            p.flat[j] = orig - h
            tm, _, fm = _evaluate(f, params)
            p.flat[j] = orig
            winners_p = [e[1] for e in tp.max_events]
            winners_m = [e[1] for e in tm.max_events]
            if winners_p != winners_m:
                report.skipped.append((pi, j, "nondifferentiable point, skipped"))
                continue
            num = (fp.item() - fm.item()) / (2.0 * h)
            ana = float(analytic[pi].flat[j])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                report.failures.append((pi, j, ana, num, rel))
    return report
