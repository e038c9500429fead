"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D float64 matrix; scalars are 1x1.  Graphs are built
eagerly per step and discarded after backward().  Reductions use numpy's
deterministic summation, so repeated runs on the same machine are bitwise
reproducible.
"""
from __future__ import annotations

import itertools

import numpy as np

L2_EPS = 1e-12

_ids = itertools.count()


class ShapeMismatchError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Node:
    """One value in the computation graph.

    `value` is the eagerly computed matrix, `primitive` the tag of the op
    that produced it, `parents` its inputs.  `grad` is populated by
    backward(); nodes off the path to the loss keep a zero grad.
    """

    __slots__ = ("id", "value", "grad", "primitive", "parents", "_vjps")

    def __init__(self, value, primitive="leaf", parents=(), vjps=()):
        self.id = next(_ids)
        self.value = value
        self.grad = np.zeros_like(value)
        self.primitive = primitive
        self.parents = tuple(parents)
        self._vjps = tuple(vjps)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node({self.primitive}, shape={self.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Node):
            return _add(self, other)
        return _shift(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return _scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Node):
            return _add(self, _scale(other, -1.0))
        return _shift(self, -float(other))

    def __rsub__(self, other):
        return _shift(_scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return _mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return _matmul(self, other)

    @property
    def T(self):
        return _transpose(self)

    # -- elementwise / rows --------------------------------------------

    def exp(self):
        v = np.exp(self.value)
        return Node(v, "exp", (self,), ((self, lambda g, v=v: g * v),))

    def log(self):
        if np.any(self.value <= 0.0):
            worst = float(self.value.min())
            raise DomainError(f"log requires positive entries, minimum is {worst}")
        x = self.value
        return Node(np.log(x), "log", (self,), ((self, lambda g, x=x: g / x),))

    def relu(self):
        x = self.value
        return Node(np.maximum(x, 0.0), "relu", (self,),
                    ((self, lambda g, x=x: g * (x > 0.0)),))

    def sum(self, axis=None):
        return _reduce(self, axis, "sum")

    def mean(self, axis=None):
        return _reduce(self, axis, "mean")

    def max(self, axis):
        """Row (axis=1) or column (axis=0) max; ties route to the lowest index."""
        if axis not in (0, 1):
            raise ShapeMismatchError(f"max needs axis 0 or 1, got {axis!r}")
        x = self.value
        idx = np.argmax(x, axis=axis)
        if axis == 1:
            v = x[np.arange(x.shape[0]), idx].reshape(-1, 1)
        else:
            v = x[idx, np.arange(x.shape[1])].reshape(1, -1)

        def vjp(g, idx=idx, shape=x.shape, axis=axis):
            out = np.zeros(shape)
            if axis == 1:
                out[np.arange(shape[0]), idx] = g[:, 0]
            else:
                out[idx, np.arange(shape[1])] = g[0, :]
            return out

        return Node(v, "max", (self,), ((self, vjp),))

    def softmax(self):
        """Row-wise softmax."""
        x = self.value
        e = np.exp(x - x.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)

        def vjp(g, p=p):
            return p * (g - (g * p).sum(axis=1, keepdims=True))

        return Node(p, "softmax", (self,), ((self, vjp),))

    def l2_normalize(self):
        """Row-wise unit normalization; rows with norm below 1e-12 map to zero."""
        x = self.value
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        safe = norms >= L2_EPS
        y = np.where(safe, x / np.where(safe, norms, 1.0), 0.0)

        def vjp(g, y=y, norms=norms, safe=safe):
            out = (g - y * (g * y).sum(axis=1, keepdims=True)) / np.where(safe, norms, 1.0)
            return np.where(safe, out, 0.0)

        return Node(y, "l2_normalize", (self,), ((self, vjp),))

    def layer_norm(self, gain, bias, eps=1e-5):
        """Row-wise layer norm with learned 1xC gain and bias nodes."""
        x = self.value
        if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
            raise ShapeMismatchError(
                f"layer_norm gain/bias must be (1, {x.shape[1]}), "
                f"got {gain.shape} and {bias.shape}")
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        y = xhat * gain.value + bias.value

        def vjp_x(g, xhat=xhat, inv=inv, gamma=gain.value):
            gg = g * gamma
            return inv * (gg - gg.mean(axis=1, keepdims=True)
                          - xhat * (gg * xhat).mean(axis=1, keepdims=True))

        return Node(y, "layer_norm", (self, gain, bias), (
            (self, vjp_x),
            (gain, lambda g, xhat=xhat: (g * xhat).sum(axis=0, keepdims=True)),
            (bias, lambda g: g.sum(axis=0, keepdims=True)),
        ))

    def mask_mul(self, mask) -> "Node":
        """Multiply by a constant 0/1 mask; no gradient flows to the mask."""
        m = _as_value(mask)
        if m.shape != self.shape:
            raise ShapeMismatchError(f"mask shape {m.shape} does not match value {self.shape}")
        return Node(self.value * m, "mask_mul", (self,),
                    ((self, lambda g, m=m: g * m),))

    def gather_rows(self, indices) -> "Node":
        idx = np.asarray(indices, dtype=np.intp).reshape(-1)
        x = self.value

        def vjp(g, idx=idx, shape=x.shape):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return Node(x[idx], "gather_rows", (self,), ((self, vjp),))

    # -- backward -------------------------------------------------------

    def backward(self):
        if self.shape != (1, 1):
            raise ShapeMismatchError(f"backward needs a 1x1 loss, got shape {self.shape}")
        self.grad = np.ones((1, 1))
        for node in reversed(_topo_order(self)):
            for parent, vjp in node._vjps:
                parent.grad = parent.grad + vjp(node.grad)


def leaf(x) -> Node:
    """Wrap an array as a graph leaf."""
    v = _as_value(x)
    if not np.all(np.isfinite(v)):
        raise DomainError("leaf values must be finite")
    return Node(v)


def concat_rows(nodes) -> Node:
    nodes = list(nodes)
    cols = nodes[0].shape[1]
    for n in nodes:
        if n.shape[1] != cols:
            raise ShapeMismatchError(
                f"concat_rows needs equal column counts, got {n.shape[1]} and {cols}")
    value = np.concatenate([n.value for n in nodes], axis=0)
    vjps = []
    start = 0
    for n in nodes:
        stop = start + n.shape[0]
        vjps.append((n, lambda g, a=start, b=stop: g[a:b]))
        start = stop
    return Node(value, "concat_rows", tuple(nodes), tuple(vjps))


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def _add(a, b):
    if a.shape == b.shape:
        return Node(a.value + b.value, "add", (a, b),
                    ((a, lambda g: g), (b, lambda g: g)))
    # one operand may be a broadcastable row (1,C) or column (R,1)
    for x, y in ((a, b), (b, a)):
        r, c = y.shape
        if x.shape == (1, c) and r > 1:
            return Node(x.value + y.value, "add", (a, b), (
                (x, lambda g: g.sum(axis=0, keepdims=True)),
                (y, lambda g: g)))
        if x.shape == (r, 1) and c > 1:
            return Node(x.value + y.value, "add", (a, b), (
                (x, lambda g: g.sum(axis=1, keepdims=True)),
                (y, lambda g: g)))
    raise ShapeMismatchError(f"cannot add shapes {a.shape} and {b.shape}")


def _mul(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return Node(a.value * b.value, "mul", (a, b), (
        (a, lambda g, bv=b.value: g * bv),
        (b, lambda g, av=a.value: g * av)))


def _scale(a, c):
    return Node(a.value * c, "scale", (a,), ((a, lambda g, c=c: g * c),))


def _shift(a, c):
    return Node(a.value + c, "shift", (a,), ((a, lambda g: g),))


def _matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot matmul shapes {a.shape} and {b.shape}")
    return Node(a.value @ b.value, "matmul", (a, b), (
        (a, lambda g, bv=b.value: g @ bv.T),
        (b, lambda g, av=a.value: av.T @ g)))


def _transpose(a):
    return Node(np.ascontiguousarray(a.value.T), "transpose", (a,),
                ((a, lambda g: np.ascontiguousarray(g.T)),))


def _reduce(a, axis, which):
    x = a.value
    r, c = x.shape
    if axis is None:
        size = x.size
        v = np.array([[x.sum()]])
    elif axis == 0:
        size = r
        v = x.sum(axis=0, keepdims=True)
    elif axis == 1:
        size = c
        v = x.sum(axis=1, keepdims=True)
    else:
        raise ShapeMismatchError(f"{which} needs axis None, 0 or 1, got {axis!r}")
    scale = 1.0 / size if which == "mean" else 1.0
    v = v * scale if which == "mean" else v

    def vjp(g, shape=(r, c), axis=axis, scale=scale):
        return np.broadcast_to(g, shape) * scale if axis is not None \
            else np.full(shape, g[0, 0] * scale)

    return Node(v, which, (a,), ((a, vjp),))


def finite_diff_check(build, params, h=1e-6) -> float:
    """Compare analytic gradients of a scalar graph against central differences.

    `build` maps a list of leaf Nodes to a scalar Node and must be
    deterministic.  Returns the max over all parameter entries of
    |analytic - central| / max(1, |central|).  Raises on NaN, naming the
    offending parameter.
    """
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [leaf(p) for p in base]
    out = build(leaves)
    if out.shape != (1, 1):
        raise ShapeMismatchError(f"build must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [lf.grad.copy() for lf in leaves]

    worst = 0.0
    for i, p in enumerate(base):
        flat = p.reshape(-1)
        aflat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = build([leaf(q) for q in base]).item()
            flat[j] = orig - h
            f_minus = build([leaf(q) for q in base]).item()
            flat[j] = orig
            central = (f_plus - f_minus) / (2.0 * h)
            if not (np.isfinite(central) and np.isfinite(aflat[j])):
                raise DomainError(f"NaN gradient at parameter {i}, entry {j}")
            err = abs(aflat[j] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
