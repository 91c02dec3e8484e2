"""A small define-by-run reverse-mode autodiff engine on numpy float64 arrays.

Only the primitives the recurrent models need are provided. Broadcasting is
limited to numpy's trailing-axis rules (bias vectors over batches, scalars).
"""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a differentiation graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._done = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    """Wrap an op result; attach a backward closure only if some input is tracked."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    A graph may be traversed once; intermediate buffers are released after.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward on a graph with no tracked tensors")
    if loss._done:
        raise RuntimeError("backward already called on this graph; rebuild it first")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:  # leaf
            if g is not None:
                _accumulate(node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._done = True
    loss._done = True


# -- primitives ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a, b):
    """``a`` of shape (..., k) times a matrix ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % y.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(y, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) > 1:
        raise ShapeError("stack", *[t.shape for t in ts])
    y = np.stack([t.data for t in ts], axis=axis)
    ax = axis % y.ndim
    return _node(y, tuple(ts), lambda g: tuple(np.moveaxis(g, ax, 0)), "stack")


def slice_(x, idx):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    try:
        y = x.data[idx]
    except IndexError:
        raise ShapeError("slice", x.shape) from None
    return _node(np.array(y, copy=True), (x,), bw, "slice")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum_(x):
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mse(pred, target):
    """Mean over all elements of (pred - target)^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return _node(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse")


def layer_norm(x, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), bw, "layer_norm")


def dropout(x, p, rng, training):
    """Inverted dropout: identity in evaluation mode or when p == 0."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def _sigmoid(v):
    # tanh form: no overflow for large |v| and cheaper than a masked exp
    return 0.5 * (1.0 + np.tanh(0.5 * v))


# -- fused recurrent layer ------------------------------------------------------

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_iz", "b_ir", "b_ih", "b_hz", "b_hr", "b_hh")


def gru_sequence(x, p, h0=None):
    """Run one GRU layer over a (B, T, in) sequence, returning (B, T, H).

    ``p`` maps the names in GRU_NAMES to Tensors. The update is

        z = sigmoid(x W_z + b_iz + h U_z + b_hz)
        r = sigmoid(x W_r + b_ir + h U_r + b_hr)
        n = tanh(x W_h + b_ih + (r * h) U_h + b_hh)
        h' = z * n + (1 - z) * h

    Equivalent to scanning ``gru_cell`` but with a hand-written BPTT backward
    so the graph holds one node per layer instead of dozens per timestep.
    """
    x = as_tensor(x)
    params = [as_tensor(p[k]) for k in GRU_NAMES]
    Wz, Wr, Wh, Uz, Ur, Uh, biz, bir, bih, bhz, bhr, bhh = params
    if x.ndim != 3 or x.shape[2] != Wz.shape[0]:
        raise ShapeError("gru_sequence", x.shape, Wz.shape)
    B, T, _ = x.shape
    H = Uz.shape[0]
    h0 = as_tensor(np.zeros((B, H)) if h0 is None else h0)
    if h0.shape != (B, H):
        raise ShapeError("gru_sequence", h0.shape, (B, H))

    W = np.concatenate([Wz.data, Wr.data, Wh.data], axis=1)
    Uzr = np.concatenate([Uz.data, Ur.data], axis=1)
    bzr = np.concatenate([bhz.data, bhr.data])
    xp = x.data @ W + np.concatenate([biz.data, bir.data, bih.data])

    hs = np.empty((B, T + 1, H))
    hs[:, 0] = h0.data
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    h = h0.data
    for t in range(T):
        gzr = _sigmoid(xp[:, t, :2 * H] + h @ Uzr + bzr)
        z, r = gzr[:, :H], gzr[:, H:]
        n = np.tanh(xp[:, t, 2 * H:] + (r * h) @ Uh.data + bhh.data)
        h = n + (1.0 - z) * (h - n)  # == z*n + (1-z)*h
        zs[:, t], rs[:, t], ns[:, t] = z, r, n
        hs[:, t + 1] = h

    def bw(gout):
        dxp = np.empty((B, T, 3 * H))
        dUzr = np.zeros_like(Uzr)
        dUh = np.zeros_like(Uh.data)
        dbzr = np.zeros(2 * H)
        dbhh = np.zeros(H)
        UzrT, UhT = Uzr.T, Uh.data.T
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + gout[:, t]
            z, r, n, hp = zs[:, t], rs[:, t], ns[:, t], hs[:, t]
            dpre_n = dh * z * (1.0 - n * n)
            dz = dh * (n - hp)
            dprev = dh * (1.0 - z)
            rh = r * hp
            dUh += rh.T @ dpre_n
            dbhh += dpre_n.sum(axis=0)
            drh = dpre_n @ UhT
            dprev += drh * r
            dpre_zr = np.concatenate([dz * z * (1.0 - z), drh * hp * r * (1.0 - r)], axis=1)
            dUzr += hp.T @ dpre_zr
            dbzr += dpre_zr.sum(axis=0)
            dprev += dpre_zr @ UzrT
            dxp[:, t, :2 * H] = dpre_zr
            dxp[:, t, 2 * H:] = dpre_n
            dh = dprev
        I = W.shape[0]
        dW = x.data.reshape(-1, I).T @ dxp.reshape(-1, 3 * H)
        dbi = dxp.reshape(-1, 3 * H).sum(axis=0)
        dx = dxp @ W.T if x.requires_grad else None
        return (dx, dh,
                dW[:, :H], dW[:, H:2 * H], dW[:, 2 * H:],
                dUzr[:, :H], dUzr[:, H:], dUh,
                dbi[:H], dbi[H:2 * H], dbi[2 * H:],
                dbzr[:H], dbzr[H:], dbhh)

    return _node(hs[:, 1:].copy(), (x, h0, *params), bw, "gru_sequence")


def gru_cell(x_t, h_prev, p):
    """Single GRU step composed from primitives (reference path)."""
    z = sigmoid(add(add(matmul(x_t, p["W_z"]), p["b_iz"]), add(matmul(h_prev, p["U_z"]), p["b_hz"])))
    r = sigmoid(add(add(matmul(x_t, p["W_r"]), p["b_ir"]), add(matmul(h_prev, p["U_r"]), p["b_hr"])))
    n = tanh(add(add(matmul(x_t, p["W_h"]), p["b_ih"]), add(matmul(mul(r, h_prev), p["U_h"]), p["b_hh"])))
    return add(mul(z, n), mul(sub(1.0, z), h_prev))


# -- finite-difference checking -----------------------------------------------

def numeric_grad(f, t: Tensor, index, eps=1e-5):
    old = t.data[index]
    t.data[index] = old + eps
    fp = float(f().data)
    t.data[index] = old - eps
    fm = float(f().data)
    t.data[index] = old
    return (fp - fm) / (2.0 * eps)


def gradient_check(f, params, eps=1e-5, tol=1e-4, max_entries=None, rng=None, floor=1e-6):
    """Compare analytic and central-difference gradients of scalar ``f()``.

    ``params`` is a dict (or list) of tracked Tensors. Returns a dict with the
    max relative error per parameter block; relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator so that entries with
    vanishing gradients are judged on absolute error. At most ``max_entries``
    randomly chosen entries per block are probed.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": t for i, t in enumerate(params)}
    for t in params.values():
        t.grad = None
    loss = f()
    if loss.requires_grad:
        backward(loss)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, t.shape)
            num = numeric_grad(f, t, idx, eps)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
    return {"max_rel_error": errors, "worst": max(errors.values(), default=0.0),
            "passed": all(e < tol for e in errors.values())}
