"""Dense 2-D tensors with a reverse-mode tape over a fixed set of ops.

Every op takes and returns :class:`Tensor`. When gradient recording is on
and any input requires a gradient, the result keeps references to its
inputs plus a closure mapping the output gradient to input gradients.
:func:`backward` walks that graph once; afterwards the graph is released
and a second call on the same loss raises :class:`StaleTapeError`.
"""

import contextlib

import numpy as np

from .. import _kernels


class DimensionError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


_state = {"enabled": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


def grad_enabled():
    return _state["enabled"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if _state["enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T, ad.T @ g)

    return _result(ad @ bd, (a, b), bw)


def transpose(a):
    def bw(g):
        return (g.T,)

    return _result(a.data.T.copy(), (a,), bw)


def add(a, b):
    """Sum of two tensors; ``b`` may be a single row broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    s = stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def identity(a):
    return a


def sub_from_one(a):
    return _result(1.0 - a.data, (a,), lambda g: (-g,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
    "sub_from_one": sub_from_one,
}

ACTIVATIONS = ("tanh", "sigmoid", "relu", "identity")


def elementwise(op, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*(as_tensor(x) for x in args))


def activate(name, a):
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}")
    return _ELEMENTWISE[name](a)


# --- row-wise normalisation -----------------------------------------------

def softmax_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a):
    s = softmax_np(a.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (a,), bw)


LAYERNORM_EPS = 1e-5


def layernorm(x, gain, bias, eps=LAYERNORM_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise DimensionError(f"layernorm: gain/bias must be (1, {x.cols})")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    d = x.cols

    def bw(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _result(out, (x, gain, bias), bw)


# --- structural ops -------------------------------------------------------

def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts {sorted(rows)}")
    widths = [p.cols for p in parts]
    edges = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts {sorted(cols)}")
    edges = np.cumsum([0] + [p.rows for p in parts])

    def bw(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def gather_rows(a, index):
    """Rows ``a[index]``; repeated indices accumulate in the gradient."""
    idx = np.asarray(index, dtype=np.intp)
    n = a.rows

    def bw(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), bw)


def repeat_rows(a, reps):
    """Each row of ``a`` repeated ``reps`` times consecutively."""
    reps = int(reps)

    def bw(g):
        return (g.reshape(a.rows, reps, a.cols).sum(axis=1),)

    return _result(np.repeat(a.data, reps, axis=0), (a,), bw)


def segment_max(a, segments, n_segments):
    """Column-wise max of the rows of ``a`` grouped by ``segments``.

    Gradient goes to the first row attaining the max in each segment.
    """
    seg = np.asarray(segments, dtype=np.intp)
    out = np.full((n_segments, a.cols), -np.inf)
    np.maximum.at(out, seg, a.data)
    winner = np.full((n_segments, a.cols), -1, dtype=np.intp)
    for row in range(a.rows - 1, -1, -1):
        hit = a.data[row] == out[seg[row]]
        winner[seg[row], hit] = row

    def bw(g):
        da = np.zeros_like(a.data)
        for s in range(n_segments):
            for c in range(a.cols):
                w = winner[s, c]
                if w >= 0:
                    da[w, c] += g[s, c]
        return (da,)

    return _result(out, (a,), bw)


def sum_all(a):
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a):
    n = a.data.size
    shape = a.shape
    return _result(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


BCE_EPS = 1e-12


def bce(prob, target, weight=None):
    """Summed binary cross-entropy of probabilities against 0/1 targets."""
    t = np.asarray(target, dtype=np.float64).reshape(prob.shape)
    w = np.ones_like(t) if weight is None else np.asarray(weight, dtype=np.float64).reshape(prob.shape)
    p = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(w * (t * np.log(p) + (1.0 - t) * np.log(1.0 - p))).sum()

    def bw(g):
        return (g[0, 0] * w * (p - t) / (p * (1.0 - p)),)

    return _result(np.array([[loss]]), (prob,), bw)


def gated_update(a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh):
    """Fused gated hidden-state update (see :mod:`kgfewshot._kernels`)."""
    ins = (a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh)
    h_new, z, r, u = _kernels.gated_forward(*(t.data for t in ins))

    def bw(g):
        da, dh, dub, dwza, dwzh, dbz, dwra, dwrh, dbr, dwua, dwuh = _kernels.gated_backward(
            g, a.data, h.data, z, r, u, wza.data, wzh.data, wra.data, wrh.data, wua.data, wuh.data)
        return (da, dh, dub, dwza, dwzh, dbz, dwra, dwrh, dbr, dwua, dwuh)

    out = _result(h_new, ins, bw)
    return out, z, r


# --- reverse pass ---------------------------------------------------------

def backward(loss):
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got {loss.shape}")
    if loss._consumed:
        raise StaleTapeError("backward already ran on this loss; re-run the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._consumed:
                raise StaleTapeError("part of this graph was already consumed by backward")
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad or gp is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.array(gp, dtype=np.float64)
        node._parents = ()
        node._backward = None
        node._consumed = True
