"""Dense float64 tensors with reverse-mode differentiation.

Everything downstream (encoders, losses, the trainer) runs on this engine.
A Tensor wraps a numpy float64 buffer; primitives record backward closures
on an implicit graph; backward() walks that graph once in reverse
topological order. 64-bit precision throughout so finite-difference checks
are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

NEG_FILL = -1e9  # additive mask value; true -inf would give NaN through softmax
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeMismatch(ValueError):
    """Operands do not conform to a primitive's signature."""


class GraphError(RuntimeError):
    """Structural autodiff failure: non-scalar root, detached graph, bad check."""


_grad_enabled = True


class no_grad:
    """Disable graph recording inside the context (pure evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array, optionally tracked on the autodiff graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t):
    return t.requires_grad or t._backward is not None


def _result(values, parents, backward_fn):
    out = Tensor(values)
    if _grad_enabled and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` after numpy batch broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >= 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = a.values @ b.values
    except ValueError as e:
        raise ShapeMismatch(f"matmul: batch extents incompatible, {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _result(out, (a, b), bw)


def add(a, b):
    """Elementwise add; the smaller operand may be a trailing-axes suffix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
            pass
        elif a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
            pass
        else:
            raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} are not suffix-compatible")
    out = a.values + b.values

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _result(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: shapes differ, {a.shape} vs {b.shape}")
    out = a.values * b.values

    def bw(g):
        return [(a, g * b.values), (b, g * a.values)]

    return _result(out, (a, b), bw)


def scale(a, s):
    """Multiply by a python float or a scalar-shaped Tensor."""
    a = as_tensor(a)
    if isinstance(s, Tensor):
        if s.shape != ():
            raise ShapeMismatch(f"scale: multiplier must be scalar-shaped, got {s.shape}")
        out = a.values * s.values

        def bw(g):
            return [(a, g * s.values), (s, np.asarray((g * a.values).sum()))]

        return _result(out, (a, s), bw)

    c = float(s)
    out = a.values * c

    def bw(g):
        return [(a, g * c)]

    return _result(out, (a,), bw)


def softmax_last(a):
    a = as_tensor(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [(a, y * (g - inner))]

    return _result(y, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"layer-norm: gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + bias.values

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.values
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _result(out, (x, gain, bias), bw)


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def gelu(a):
    a = as_tensor(a)
    out = 0.5 * a.values * (1.0 + erf(a.values * _INV_SQRT2))

    def bw(g):
        return [(a, g * _gelu_grad(a.values))]

    return _result(out, (a,), bw)


def embedding_lookup(table, ids):
    """Gather rows of `table` along axis 0; backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding-lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(
            f"embedding-lookup: id out of range [0, {table.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]")
    out = table.values[ids]

    def bw(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return [(table, gt)]

    return _result(out, (table,), bw)


def concat_seq(parts, axis=-2):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat-seq: empty input list")
    nd = parts[0].ndim
    ax = axis % nd
    ref = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeMismatch(f"concat-seq: rank mismatch {parts[0].shape} vs {p.shape}")
        other = list(p.shape)
        if [s for i, s in enumerate(other) if i != ax] != [s for i, s in enumerate(ref) if i != ax]:
            raise ShapeMismatch(f"concat-seq: non-axis extents differ, {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.values for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def bw(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        return list(zip(parts, pieces))

    return _result(out, tuple(parts), bw)


def slice_seq(a, start, stop, axis=-2):
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice-seq: range [{start}, {stop}) invalid for extent {n}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))
    out = a.values[idx].copy()

    def bw(g):
        ga = np.zeros_like(a.values)
        ga[idx] = g
        return [(a, ga)]

    return _result(out, (a,), bw)


def mean_pool(a, axis=-2):
    """Mean over one axis, or over all elements when axis is None."""
    a = as_tensor(a)
    if axis is None:
        n = a.values.size
        out = a.values.mean()

        def bw(g):
            return [(a, np.full_like(a.values, float(g) / n))]

        return _result(out, (a,), bw)

    ax = axis % a.ndim
    n = a.shape[ax]
    out = a.values.mean(axis=ax)

    def bw(g):
        return [(a, np.repeat(np.expand_dims(g / n, ax), n, axis=ax))]

    return _result(out, (a,), bw)


def max_reduce(a, axis=-1):
    """Max over one axis; gradient routes to the first argmax."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.argmax(a.values, axis=ax)
    out = np.max(a.values, axis=ax)

    def bw(g):
        ga = np.zeros_like(a.values)
        np.put_along_axis(ga, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return [(a, ga)]

    return _result(out, (a,), bw)


def masked_fill(a, keep):
    """Additive mask: positions where keep is False get NEG_FILL added."""
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    try:
        additive = np.broadcast_to(np.where(keep, 0.0, NEG_FILL), a.shape)
    except ValueError as e:
        raise ShapeMismatch(f"masked-fill: mask {keep.shape} does not broadcast to {a.shape}") from e
    out = a.values + additive

    def bw(g):
        return [(a, g)]

    return _result(out, (a,), bw)


def cross_entropy_from_logits(logits, targets):
    """Per-position CE: lse(logits) - logits[target]; shape = logits.shape[:-1]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeMismatch("cross-entropy-from-logits: targets must be integers")
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(
            f"cross-entropy-from-logits: targets {targets.shape} vs logits {logits.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeMismatch(f"cross-entropy-from-logits: target outside [0, {v})")
    z = logits.values
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).squeeze(-1)
    picked = np.take_along_axis(z, targets[..., None], axis=-1).squeeze(-1)
    out = lse - picked

    def bw(g):
        soft = e / se
        gz = soft * g[..., None]
        np.put_along_axis(
            gz, targets[..., None],
            np.take_along_axis(gz, targets[..., None], axis=-1) - g[..., None],
            axis=-1)
        return [(logits, gz)]

    return _result(out, (logits,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.values))

    def bw(g):
        return [(a, g * out * (1.0 - out))]

    return _result(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise ShapeMismatch("log: input must be strictly positive")
    out = np.log(a.values)

    def bw(g):
        return [(a, g / a.values)]

    return _result(out, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)

    def bw(g):
        return [(a, g * out)]

    return _result(out, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from e

    def bw(g):
        return [(a, g.reshape(a.shape))]

    return _result(out, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"transpose: {axes} is not a permutation for rank {a.ndim}")
    out = np.transpose(a.values, axes)
    inverse = tuple(axes.index(i) for i in range(len(axes)))

    def bw(g):
        return [(a, np.transpose(g, inverse))]

    return _result(out, (a,), bw)


def expand_batch(a, n):
    """Tile a leading batch axis of size n; gradient sums it back out."""
    a = as_tensor(a)
    if n < 1:
        raise ShapeMismatch(f"expand-batch: batch extent must be >= 1, got {n}")
    out = np.broadcast_to(a.values, (n,) + a.shape).copy()

    def bw(g):
        return [(a, g.sum(axis=0))]

    return _result(out, (a,), bw)


def l2_normalize_last(a, eps=1e-12):
    a = as_tensor(a)
    norm = np.sqrt((a.values * a.values).sum(axis=-1, keepdims=True) + eps)
    y = a.values / norm

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [(a, (g - y * inner) / norm)]

    return _result(y, (a,), bw)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "softmax-last-axis": softmax_last,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "embedding-lookup": embedding_lookup,
    "concat-seq": concat_seq,
    "mean-pool": mean_pool,
    "max-reduce": max_reduce,
    "masked-fill": masked_fill,
    "cross-entropy-from-logits": cross_entropy_from_logits,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "mul": mul,
    "reshape": reshape,
    "transpose": transpose,
    "slice-seq": slice_seq,
    "expand-batch": expand_batch,
    "l2-normalize-last-axis": l2_normalize_last,
}


def apply_primitive(op, inputs, **kwargs):
    """Dispatch a primitive by id. Unknown ids are an error."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive id: {op!r}")
    fn = PRIMITIVES[op]
    if op == "concat-seq":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root):
    """Reverse-mode sweep from a scalar root.

    Populates .grad on every requires_grad tensor reached from the root
    (accumulating if already set) and returns {id(tensor): grad array} for
    those tensors. Each recorded node's closure runs exactly once.
    """
    if root.shape != ():
        raise GraphError(f"backward: root must be scalar-shaped, got {root.shape}")
    if root._backward is None and not root.requires_grad:
        raise GraphError("backward: root is detached from any recorded graph")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _tracked_or_interior(p):
                stack.append((p, False))

    flowing = {id(root): np.ones((), dtype=np.float64)}
    leaf_grads = {}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaf_grads[id(node)] = node.grad
        if node._backward is None:
            continue
        for parent, delta in node._backward(g):
            if not _tracked_or_interior(parent):
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + delta
            else:
                flowing[key] = np.asarray(delta, dtype=np.float64)
    return leaf_grads


def _tracked_or_interior(t):
    return t.requires_grad or t._backward is not None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def finite_diff_gradcheck(f, leaves, eps=1e-5):
    """Compare reverse-mode gradients of scalar f() against central differences.

    `leaves` maps name -> Tensor; f must read the current leaf values on every
    call. Returns {name: max over elements of
    |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-8)}.
    Raises GraphError if two evaluations of f disagree bitwise.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_gradcheck: eps must be > 0, got {eps}")
    with no_grad():
        y0 = float(f().values)
        y1 = float(f().values)
    if y0 != y1 or not np.isfinite(y0):
        raise GraphError(
            f"finite_diff_gradcheck: non-deterministic or non-finite function "
            f"({y0!r} vs {y1!r})")

    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.shape != ():
        raise GraphError(f"finite_diff_gradcheck: f must return a scalar, got {out.shape}")
    backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for name, t in leaves.items()
    }

    report = {}
    with no_grad():
        for name, t in leaves.items():
            flat = t.values.reshape(-1)
            gn = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().values)
                flat[i] = orig - eps
                fm = float(f().values)
                flat[i] = orig
                gn[i] = (fp - fm) / (2.0 * eps)
            ga = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
            report[name] = float(np.max(np.abs(ga - gn) / denom)) if flat.size else 0.0
    return report
