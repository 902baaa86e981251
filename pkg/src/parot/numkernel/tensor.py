"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable op that touches a
tensor with ``requires_grad`` records a node (parents + a backward closure);
:func:`backward` orders the recorded nodes into a :class:`Tape` and replays it
in reverse, accumulating gradients additively.
"""

from contextlib import contextmanager

import numpy as np

from .. import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


_KINK_TRACE = None


@contextmanager
def record_kinks():
    """Collect the branch decisions of every piecewise op run inside the block.

    Two runs with equal traces evaluated the same smooth piece of the function,
    which is what a finite-difference check needs.
    """
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = trace = []
    try:
        yield trace
    finally:
        _KINK_TRACE = prev


def _trace(decision):
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(decision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _node(out, (x,), backward, "sqrt")


def relu(x):
    out = np.maximum(x.data, 0)
    mask = out > 0
    _trace(mask)

    def backward(g):
        return (g * mask,)

    return _node(out, (x,), backward, "relu")


def leaky_relu(x, slope=0.2):
    if slope < 0:
        raise ValueError(f"leaky_relu: slope must be non-negative, got {slope}")
    mask = x.data > 0
    _trace(mask)
    out = np.where(mask, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(mask, g, g * g.dtype.type(slope)),)

    return _node(out, (x,), backward, f"leaky_relu({slope})")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2:
        return linear(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x`` (any number of leading axes)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(out.reshape(lead + (weight.shape[1],)), parents, backward, "linear")


def einsum(spec, a, b):
    """Two-operand einsum.  Every input index must survive in the output or the other operand."""
    a, b = _pair(a, b)
    ins, out_spec = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        lost = set(s) - set(out_spec) - set(other)
        if lost:
            raise ValueError(f"einsum: index {sorted(lost)} of '{s}' cannot be differentiated")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as err:
        raise ValueError(f"einsum '{spec}': shape mismatch {a.shape} vs {b.shape}") from err

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.einsum(f"{out_spec},{sb}->{sa}", g, b.data), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.einsum(f"{out_spec},{sa}->{sb}", g, a.data), b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "einsum")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), backward, "reshape")


def swapaxes(x, a, b):
    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _node(np.swapaxes(x.data, a, b), (x,), backward, "swapaxes")


def getitem(x, key):
    out = x.data[key]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, key, g) if _is_advanced(key) else full.__setitem__(key, g)
        return (full,)

    return _node(out, (x,), backward, "getitem")


def _is_advanced(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def gather(x, idx):
    """Batched row gather: ``x`` (B, N, *f) with ``idx`` (B, *i) gives (B, *i, *f)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather: batch mismatch {x.shape} vs index {idx.shape}")
    b, n = x.shape[:2]
    feat = x.shape[2:]
    flat = (idx + (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))).reshape(-1)
    x2 = x.data.reshape(b * n, -1)
    out = x2[flat].reshape(idx.shape + feat)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(flat.size, -1))
        return (kernels.scatter_add_rows(g2, flat, b * n).reshape(x.shape),)

    return _node(out, (x,), backward, "gather")


# ---------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(count))


def sumsq(x, axis=None, keepdims=False):
    """Squared L2 norm over ``axis``."""
    out = np.square(x.data).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * g * x.data,)

    return _node(np.asarray(out), (x,), backward, "sumsq")


def max_pool(x, axis):
    """Max over ``axis``.  Returns (values, argmax); the gradient flows to the argmax only."""
    ax = axis % x.ndim
    moved = np.moveaxis(x.data, ax, -2) if ax != x.ndim - 1 else x.data[..., None]
    lead = moved.shape[:-2]
    k, c = moved.shape[-2:]
    vals, arg = kernels.maxpool(moved.reshape(-1, k, c))
    out_shape = lead + (c,)
    vals = vals.reshape(out_shape)
    arg = arg.reshape(out_shape)
    if ax == x.ndim - 1:
        vals, arg = vals[..., 0], arg[..., 0]
    _trace(arg)

    def backward(g):
        gg = g[..., None] if ax == x.ndim - 1 else g
        full = kernels.maxpool_backward(gg.reshape(-1, c), arg.reshape(-1, c), k)
        full = full.reshape(lead + (k, c))
        full = full[..., 0] if ax == x.ndim - 1 else np.moveaxis(full, -2, ax)
        return (full,)

    return _node(vals, (x,), backward, "max_pool"), arg


# ---------------------------------------------------------------- vector geometry


def normalize(x, eps=1e-8):
    """Unit-normalise along the last axis; norms below ``eps`` are clamped."""
    norm = np.sqrt(np.square(x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe
    clamped = norm < eps
    _trace(clamped)

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(clamped, g, g - out * proj) / safe
        return (gx,)

    return _node(out, (x,), backward, "normalize")


def cross(a, b):
    """Cross product along the last axis (size 3)."""
    a, b = _pair(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError(f"cross: need trailing size 3, got {a.shape} and {b.shape}")

    def backward(g):
        ga = np.cross(b.data, g) if a.requires_grad else None
        gb = np.cross(g, a.data) if b.requires_grad else None
        return ga, gb

    return _node(np.cross(a.data, b.data), (a, b), backward, "cross")


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` against the last axis of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    flat_lp = logp.reshape(-1, logp.shape[-1])
    flat_lab = labels.reshape(-1)
    n = flat_lab.size
    loss = -flat_lp[np.arange(n), flat_lab].mean()

    def backward(g):
        p = np.exp(flat_lp)
        p[np.arange(n), flat_lab] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "sqrt": sqrt,
    "relu": relu, "leaky_relu": leaky_relu, "matmul": matmul, "linear": linear,
    "einsum": einsum, "reshape": reshape, "swapaxes": swapaxes, "getitem": getitem,
    "concat": concat, "gather": gather, "sum": tsum, "mean": mean, "sumsq": sumsq,
    "max": max_pool, "normalize": normalize, "cross": cross,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def apply(op_kind, *inputs, **attributes):
    """Run the primitive named ``op_kind``; attributes are passed as keywords."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{op_kind}'") from None
    return fn(*inputs, **attributes)


# ---------------------------------------------------------------- tape


class Tape:
    """Reverse-topological record of the ops that produced ``loss``.

    Built by depth-first search from the loss; each recorded op appears once, in
    an order where every op precedes the ops consuming its output.
    """

    def __init__(self, loss):
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def replay(self, retain_grad=False):
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node._backward(g)
            for p, gp in zip(node._parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if gp.dtype != p.dtype:
                    gp = gp.astype(p.dtype)
                # never accumulate in place: backward closures may hand out shared arrays
                p.grad = gp if p.grad is None else p.grad + gp
            if not retain_grad:
                node.grad = None


def backward(loss, retain_grad=False):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Intermediate gradients are released as the tape unwinds unless
    ``retain_grad`` is set.  Returns the tape that was replayed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    if not tape.nodes:
        raise ValueError("backward: empty tape")
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    tape.replay(retain_grad=retain_grad)
    if retain_grad:
        loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    return tape
