"""Reverse-mode automatic differentiation over the tensor ops.

The graph is the tape: every operation returns a :class:`Node` holding its
float64 value, its parent nodes, and one lazy vector-Jacobian thunk per
parent. Backward walks the reverse topological order and only evaluates
thunks on paths that reach a requested leaf, so gradients into constants or
unrequested parameters cost nothing. Backward rules are themselves built
from these ops, so gradients are ordinary nodes and a second ``backward``
through them yields exact second-order products; that exact path is the
oracle for the cheaper central-difference mixed Hessian-vector products used
during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

_next_id = 0


def _new_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


class Node:
    """One tape entry: value, parents, and lazy backward rules linking them."""

    __slots__ = ("value", "parents", "vjp", "id")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp  # callable(grad: Node) -> tuple of thunks, one per parent
        self.id = _new_id()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, id={self.id})"


def constant(x) -> Node:
    return Node(x)


leaf = constant


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def stop_gradient(x: Node) -> Node:
    """Freeze a value: backward treats it as a constant."""
    return Node(x.value)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: Node, shape) -> Node:
    """Reduce a gradient back to ``shape`` after numpy-style broadcasting."""
    if g.value.shape == tuple(shape):
        return g
    extra = g.value.ndim - len(shape)
    if extra:
        g = sum_(g, axes=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.value.shape[i] != 1)
    if axes:
        g = sum_(g, axes=axes, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    def vjp(g):
        return (lambda: _unbroadcast(g, a.value.shape),
                lambda: _unbroadcast(g, b.value.shape))

    return Node(a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    def vjp(g):
        return (lambda: _unbroadcast(g, a.value.shape),
                lambda: _unbroadcast(neg(g), b.value.shape))

    return Node(a.value - b.value, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    def vjp(g):
        return (lambda: _unbroadcast(mul(g, b), a.value.shape),
                lambda: _unbroadcast(mul(g, a), b.value.shape))

    return Node(a.value * b.value, (a, b), vjp)


def div(a: Node, b: Node) -> Node:
    def vjp(g):
        return (lambda: _unbroadcast(div(g, b), a.value.shape),
                lambda: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.value.shape))

    return Node(a.value / b.value, (a, b), vjp)


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), lambda g: (lambda: neg(g),))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (lambda: scale(g, c),))


def shift(a: Node, c) -> Node:
    """Add a constant array or scalar (no gradient into the constant)."""
    return Node(a.value + c, (a,), lambda g: (lambda: _unbroadcast(g, a.value.shape),))


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return Node(a.value * mask, (a,), lambda g: (lambda: mul(g, constant(mask)),))


def sigmoid(a: Node) -> Node:
    out = Node(T.sigmoid(a.value), (a,))
    out.vjp = lambda g: (lambda: mul(g, mul(out, shift(neg(out), 1.0))),)
    return out


def tanh(a: Node) -> Node:
    out = Node(np.tanh(a.value), (a,))
    out.vjp = lambda g: (lambda: mul(g, shift(neg(mul(out, out)), 1.0)),)
    return out


def exp(a: Node) -> Node:
    out = Node(np.exp(a.value), (a,))
    out.vjp = lambda g: (lambda: mul(g, out),)
    return out


def log(a: Node) -> Node:
    return Node(np.log(a.value), (a,), lambda g: (lambda: div(g, a),))


def softplus(a: Node) -> Node:
    """log(1+exp(a)); derivative is sigmoid(a)."""
    return Node(T.softplus(a.value), (a,), lambda g: (lambda: mul(g, sigmoid(a)),))


def absval(a: Node) -> Node:
    sgn = np.sign(a.value)
    return Node(np.abs(a.value), (a,), lambda g: (lambda: mul(g, constant(sgn)),))


def sum_(a: Node, axes=None, keepdims: bool = False) -> Node:
    out = np.sum(a.value, axis=axes, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        def back():
            if axes is None:
                return broadcast_to(g, shape)
            ax = (axes,) if isinstance(axes, int) else tuple(axes)
            gg = g
            if not keepdims:
                kshape = list(g.value.shape)
                for i in sorted(a_ % len(shape) for a_ in ax):
                    kshape.insert(i, 1)
                gg = reshape(g, tuple(kshape))
            return broadcast_to(gg, shape)

        return (back,)

    return Node(out, (a,), vjp)


def mean_(a: Node, axes=None, keepdims: bool = False) -> Node:
    if axes is None:
        n = a.value.size
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        n = int(np.prod([a.value.shape[i] for i in ax]))
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def broadcast_to(a: Node, shape) -> Node:
    out = np.broadcast_to(a.value, shape)
    return Node(out, (a,), lambda g: (lambda: _unbroadcast(g, a.value.shape),))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (lambda: reshape(g, old),))


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return Node(a.value.transpose(axes), (a,), lambda g: (lambda: transpose(g, inv),))


def matmul(a: Node, b: Node) -> Node:
    def vjp(g):
        return (lambda: matmul(g, transpose(b, (1, 0))),
                lambda: matmul(transpose(a, (1, 0)), g))

    return Node(a.value @ b.value, (a, b), vjp)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(
            (lambda s=start, e=end: slice_axis(g, axis, int(s), int(e)))
            for start, end in zip(offsets[:-1], offsets[1:]))

    return Node(out, tuple(nodes), vjp)


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    shape = a.value.shape
    return Node(a.value[tuple(idx)], (a,),
                lambda g: (lambda: pad_insert(g, shape, axis, start),))


def pad_insert(a: Node, shape, axis: int, start: int) -> Node:
    """Embed ``a`` into zeros of ``shape`` along ``axis`` (adjoint of slice)."""
    out = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * len(shape)
    stop = start + a.value.shape[axis]
    idx[axis] = slice(start, stop)
    out[tuple(idx)] = a.value
    return Node(out, (a,), lambda g: (lambda: slice_axis(g, axis, start, stop),))


def im2col(a: Node, kernel: int, stride: int, padding: int) -> Node:
    shape = a.value.shape
    out = T.im2col(np.ascontiguousarray(a.value), kernel, stride, padding)
    return Node(out, (a,),
                lambda g: (lambda: col2im(g, shape, kernel, stride, padding),))


def col2im(a: Node, x_shape, kernel: int, stride: int, padding: int) -> Node:
    out = T.col2im(np.ascontiguousarray(a.value), x_shape, kernel, stride, padding)
    return Node(out, (a,),
                lambda g: (lambda: im2col(g, kernel, stride, padding),))


def max_stop(a: Node, axes=None, keepdims: bool = False) -> Node:
    """Max over axes as a gradient-free constant (for stabilized exp/softmax)."""
    return constant(np.max(a.value, axis=axes, keepdims=keepdims))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def conv2d(x: Node, weight: Node, bias: Node, spec: T.ConvSpec) -> Node:
    """Differentiable convolution, composed from im2col/col2im and matmul."""
    n, c, h, w = x.value.shape
    k = spec.kernel
    oh, ow = spec.out_extent(h), spec.out_extent(w)
    if not spec.transposed:
        co = weight.value.shape[0]
        if weight.value.shape[1] != c:
            raise ValueError(f"conv2d channel mismatch: input {c}, weight {weight.value.shape}")
        cols = im2col(x, k, spec.stride, spec.padding)
        w_mat = reshape(transpose(weight, (0, 2, 3, 1)), (co, -1))
        y = matmul(cols, transpose(w_mat, (1, 0)))
        y = transpose(reshape(y, (n, oh, ow, co)), (0, 3, 1, 2))
    else:
        ci, co = weight.value.shape[0], weight.value.shape[1]
        if ci != c:
            raise ValueError(f"transposed conv2d channel mismatch: input {c}, weight {weight.value.shape}")
        u = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, ci))
        cols = matmul(u, reshape(transpose(weight, (0, 2, 3, 1)), (ci, -1)))
        y = col2im(cols, (n, co, oh, ow), k, spec.stride, spec.padding)
    return add(y, reshape(bias, (1, -1, 1, 1)))


def softmax(a: Node, axis: int = -1) -> Node:
    z = sub(a, max_stop(a, axes=axis, keepdims=True))
    e = exp(z)
    return div(e, sum_(e, axes=axis, keepdims=True))


def logsumexp(a: Node, axis: int, keepdims: bool = False) -> Node:
    m = max_stop(a, axes=axis, keepdims=True)
    s = log(sum_(exp(sub(a, m)), axes=axis, keepdims=True))
    out = add(s, m)
    if not keepdims:
        out = sum_(out, axes=axis)  # squeeze the singleton axis
    return out


def dot(a: Node, b: Node) -> Node:
    """Scalar inner product of two same-shaped nodes."""
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, wrt: Sequence[Node], create_graph: bool = False):
    """Accumulated gradients of a scalar loss with respect to leaf nodes.

    Returns one entry per ``wrt`` node: a :class:`Node` when
    ``create_graph`` (differentiable gradients), else a float64 array.
    Leaves the loss does not depend on get zeros. Gradient work is pruned to
    paths that reach a requested leaf.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    needed: dict[int, bool] = {w.id: True for w in wrt}
    for node in order:  # parents precede children
        if node.id not in needed:
            needed[node.id] = any(needed.get(p.id, False) for p in node.parents)

    grads: dict[int, Node] = {loss.id: constant(np.ones((), dtype=np.float64))}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        thunks = node.vjp(g)
        for parent, thunk in zip(node.parents, thunks):
            if thunk is None or not needed.get(parent.id, False):
                continue
            pg = thunk()
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else add(prev, pg)

    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            g = constant(np.zeros_like(w.value))
        out.append(g if create_graph else g.value)
    return out


# ---------------------------------------------------------------------------
# parameter groups
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    """Named, ordered collection of parameter tensors (one of G, H, S, A)."""

    name: str
    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.entries]

    @property
    def size(self) -> int:
        return sum(arr.size for _, arr in self.entries)

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([np.ravel(arr) for _, arr in self.entries])

    def unflatten(self, vec: np.ndarray) -> "ParamGroup":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector length {vec.shape} != ({self.size},)")
        out, off = [], 0
        for lbl, arr in self.entries:
            out.append((lbl, vec[off:off + arr.size].reshape(arr.shape).copy()))
            off += arr.size
        return ParamGroup(self.name, out)

    def copy(self) -> "ParamGroup":
        return ParamGroup(self.name, [(lbl, arr.copy()) for lbl, arr in self.entries])

    def get(self, label: str) -> np.ndarray:
        for lbl, arr in self.entries:
            if lbl == label:
                return arr
        raise KeyError(label)


def bind(group: ParamGroup) -> dict[str, Node]:
    """Fresh leaf nodes for every entry, keyed by label."""
    return {lbl: Node(arr) for lbl, arr in group.entries}


def group_backward(loss: Node, binding: dict[str, Node], group: ParamGroup,
                   create_graph: bool = False):
    """Gradients in group entry order; shapes mirror the parameters."""
    leaves = [binding[lbl] for lbl, _ in group.entries]
    return backward(loss, leaves, create_graph=create_graph)


def flat_grad(loss: Node, binding: dict[str, Node], group: ParamGroup) -> np.ndarray:
    gs = group_backward(loss, binding, group)
    if not gs:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.ravel(g) for g in gs])


def grad_dot(loss_fn: Callable[[dict[str, Node]], Node], params: ParamGroup,
             v: np.ndarray) -> float:
    """Inner product of the loss gradient at ``params`` with a flat vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.size,):
        raise ValueError(f"vector length {v.shape} != parameter count ({params.size},)")
    binding = bind(params)
    g = flat_grad(loss_fn(binding), binding, params)
    return float(g @ v)


def default_eps(v: np.ndarray, scale: float = 0.01) -> float:
    return scale / float(np.linalg.norm(v))


Binding = dict[str, Node]


def mixed_hvp_fd(loss_fn: Callable[[Binding, Binding], Node],
                 p_group: ParamGroup, q_group: ParamGroup, v: np.ndarray,
                 eps_rule: Callable[[np.ndarray], float] = default_eps) -> np.ndarray:
    """Central-difference estimate of the mixed second-derivative product.

    Computes [grad_P L(P, Q + eps v) - grad_P L(P, Q - eps v)] / (2 eps),
    the product of the mixed Hessian block (rows P, columns Q) with ``v``.
    ``loss_fn`` receives two bindings and returns the scalar loss node.
    A zero ``v`` short-circuits to zeros, the exact product.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (q_group.size,):
        raise ValueError(f"vector length {v.shape} != perturbed group size ({q_group.size},)")
    if not np.any(v):
        return np.zeros(p_group.size, dtype=np.float64)
    eps = eps_rule(v)
    q0 = q_group.flatten()

    def grad_p(qvec):
        pb = bind(p_group)
        qb = bind(q_group.unflatten(qvec))
        return flat_grad(loss_fn(pb, qb), pb, p_group)

    gp = grad_p(q0 + eps * v)
    gm = grad_p(q0 - eps * v)
    return (gp - gm) / (2.0 * eps)


def mixed_hvp_exact(loss_fn: Callable[[Binding, Binding], Node],
                    p_group: ParamGroup, q_group: ParamGroup,
                    v: np.ndarray) -> np.ndarray:
    """Exact mixed Hessian-vector product by differentiating through backward.

    Feasible for small parameter counts; serves as the oracle for the
    central-difference estimate.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (q_group.size,):
        raise ValueError(f"vector length {v.shape} != perturbed group size ({q_group.size},)")
    pb, qb = bind(p_group), bind(q_group)
    loss = loss_fn(pb, qb)
    q_leaves = [qb[lbl] for lbl, _ in q_group.entries]
    gq = backward(loss, q_leaves, create_graph=True)
    s, off = None, 0
    for g in gq:
        vv = constant(v[off:off + g.value.size].reshape(g.value.shape))
        term = dot(g, vv)
        s = term if s is None else add(s, term)
        off += g.value.size
    p_leaves = [pb[lbl] for lbl, _ in p_group.entries]
    gp = backward(s, p_leaves)
    if not gp:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.ravel(g) for g in gp])
