"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the encoders and the acoustic backbone need are here.
Every op returns a new ``Tensor``; the graph is the DAG of parent links, and
``Tensor.backward`` walks it once in reverse topological order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numba
import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _mish_parts(x):
    # tanh(softplus(x)) = n(n+2) / (n(n+2) + 2) with n = e^x; saturates long before x = 20
    n = np.exp(np.minimum(x, 20.0))
    q = n * (n + 2.0)
    return q / (q + 2.0), n / (1.0 + n)


def mish(x):
    """x * tanh(softplus(x))."""
    x = as_tensor(x)
    t, sig = _mish_parts(x.data)

    def backward(g):
        return (g * (t + x.data * (1.0 - t * t) * sig),)

    return _make(x.data * t, (x,), backward, "mish")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def glu(a, b):
    """Gated linear unit: a * sigmoid(b)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"glu operands differ in shape: {a.shape} vs {b.shape}")
    s = _sigmoid(b.data)

    def backward(g):
        return g * s, g * a.data * s * (1.0 - s)

    return _make(a.data * s, (a, b), backward, "glu")


# ---------------------------------------------------------------- reductions

def sum_all(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(x.data.mean(axis=axis), (x,), backward, "mean")


def mae(x, y):
    """Mean absolute error over all elements. Subgradient at x == y is 0."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mae operands differ in shape: {x.shape} vs {y.shape}")
    n = x.data.size
    if n == 0:
        raise ShapeError("mae of empty tensors")
    d = x.data - y.data
    val = np.abs(d).sum() / n

    def backward(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return _make(np.asarray(val), (x, y), backward, "mae")


# ---------------------------------------------------------------- linear algebra

def matmul(x, w):
    """x (..., n) @ w (n, m)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {x.shape} @ {w.shape}")

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if w.requires_grad else None
        return gx, gw

    return _make(x.data @ w.data, (x, w), backward, "matmul")


def linear(x, w, b=None):
    """Affine map over the last axis."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _im2col(x, k):
    p = (k - 1) // 2
    t = x.shape[-2]
    c = x.shape[-1]
    cols = np.zeros(x.shape[:-1] + (k, c))
    for j in range(k):
        lo, hi = max(0, p - j), min(t, t + p - j)
        if hi > lo:
            cols[..., lo:hi, j, :] = x[..., lo + j - p:hi + j - p, :]
    return cols.reshape(*x.shape[:-1], k * c)


def conv1d(x, kernel, residual=False, bias=None):
    """Same-length 1-D convolution over the time axis.

    x is (..., T, C_in) and kernel is (k, C_in, C_out) with odd k; zero padding
    keeps T. With ``residual`` the input is added to the output.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, cin, cout = kernel.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel width must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    if residual and cin != cout:
        raise ShapeError(f"residual conv1d needs equal channels, got {cin} -> {cout}")
    t = x.shape[-2]
    cols = _im2col(x.data, k)
    kmat = kernel.data.reshape(k * cin, cout)
    out = cols @ kmat
    if residual:
        out = out + x.data

    def backward(g):
        gk = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if not x.requires_grad:
            return None, gk
        gcols = (g @ kmat.T).reshape(*x.shape[:-1], k, cin)
        p = (k - 1) // 2
        gxp = np.zeros(x.shape[:-2] + (t + 2 * p, cin))
        for j in range(k):
            gxp[..., j:j + t, :] += gcols[..., j, :]
        gx = gxp[..., p:p + t, :]
        if residual:
            gx = gx + g
        return gx, gk

    y = _make(out, (x, kernel), backward, "conv1d")
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalization

def normalize(x, eps=1e-5):
    """Standardize over the last axis: (x - mean) / sqrt(var + eps)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc / sigma

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return _make(y, (x,), backward, "normalize")


def l2_normalize(x):
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot L2-normalize a zero vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------- indexing

def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x, idx, axis=0):
    """np.take with a scatter-add backward; used for lookups and windowing."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.data.ndim

    def backward(g):
        gx = np.zeros((x.shape[axis],) + x.shape[:axis] + x.shape[axis + 1:])
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(gx, idx, gm)
        return (np.moveaxis(gx, 0, axis),)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward, "take")


# ---------------------------------------------------------------- parameters

class Params:
    """Ordered registry of named trainable tensors."""

    def __init__(self):
        self._items = OrderedDict()

    def add(self, name, value):
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        self._items[name] = t
        return t

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self, prefix=""):
        return [n for n in self._items if n.startswith(prefix)]

    def scope(self, prefix):
        return Scope(self, prefix)

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def grads(self):
        return {n: t.grad for n, t in self._items.items()}

    def arrays(self):
        return OrderedDict((n, t.data) for n, t in self._items.items())

    def load_arrays(self, arrays, strict=True):
        for name, arr in arrays.items():
            if name not in self._items:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            cur = self._items[name]
            if cur.shape != arr.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != expected {cur.shape}")
            cur.data = np.array(arr, dtype=DTYPE)
        if strict:
            missing = [n for n in self._items if n not in arrays]
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")


class Scope:
    """Prefix view into a Params registry ("teacher." / "student.")."""

    def __init__(self, params, prefix):
        self.params = params
        self.prefix = prefix.rstrip(".") + "."

    def __getitem__(self, name):
        return self.params[self.prefix + name]

    def __contains__(self, name):
        return self.prefix + name in self.params

    def add(self, name, value):
        return self.params.add(self.prefix + name, value)


# ---------------------------------------------------------------- optimizer

@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, out, beta1, beta2, step_size, inv_bc2, eps):
    # single pass; the moment buffers are updated in place
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        out[i] = p[i] - step_size * m[i] / (np.sqrt(v[i]) * inv_bc2 + eps)


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Parameters whose gradient is ``None`` are skipped entirely (no moment
    decay, no step count), so untouched weights stay bit-identical.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                continue
            self.update(name, p, p.grad)

    def update(self, name, p, g):
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
            self.t[name] = 0
        t = self.t[name] = self.t[name] + 1
        out = np.empty_like(p.data)
        _adam_kernel(p.data.reshape(-1), np.ascontiguousarray(g, dtype=DTYPE).reshape(-1),
                     m.reshape(-1), self.v[name].reshape(-1), out.reshape(-1),
                     self.beta1, self.beta2, self.lr / (1 - self.beta1 ** t),
                     1.0 / np.sqrt(1 - self.beta2 ** t), self.eps)
        p.data = out

    def state_arrays(self):
        out = OrderedDict()
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.t.{name}"] = np.array([self.t[name]], dtype=DTYPE)
        return out

    def load_state_arrays(self, arrays):
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                self.m[key[7:]] = np.array(arr)
            elif key.startswith("adam.v."):
                self.v[key[7:]] = np.array(arr)
            elif key.startswith("adam.t."):
                self.t[key[7:]] = int(arr[0])


def adam_step(params, grads, state=None, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
    """Functional wrapper: apply one Adam update from an explicit grads dict."""
    opt = state if state is not None else Adam(lr, beta1, beta2, eps)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            opt.update(name, p, np.asarray(g, dtype=DTYPE))
    return params, opt


# ---------------------------------------------------------------- verification

def grad_check(f, x, h=1e-6):
    """Max componentwise relative error between reverse-mode and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += h
        xm = base.copy()
        xm.flat[i] -= h
        numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1


def save_checkpoint(path, arrays):
    """Write name -> float64 array pairs in the AVCK binary layout."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, OrderedDict()
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError(f"{path}: truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record ({exc})") from None
    return out
