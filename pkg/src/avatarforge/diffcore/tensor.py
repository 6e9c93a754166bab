"""Reverse-mode autodiff on numpy arrays.

Float32 is the working precision; tensors keep whatever float dtype they are
built with so oracle code can run the same graph in float64. Every op output
is checked for NaN/Inf and the offending primitive is named. VJPs are written
in terms of tensor ops, so gradients are themselves graph nodes and
second-order quantities (gradients of gradients, e.g. SDF normals inside a
loss) come out of the same machinery.
"""

from __future__ import annotations

import itertools

import numpy as np


class NonFiniteError(RuntimeError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Malformed use of the autodiff graph."""


_grad_enabled = True
_nan_guard = True
_tid_counter = itertools.count()


class no_grad:
    """Context manager: ops inside do not record the graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def set_nan_guard(enabled: bool) -> None:
    global _nan_guard
    _nan_guard = bool(enabled)


def _check_finite(data: np.ndarray, op: str) -> None:
    # sum with a float64 accumulator is one pass and is non-finite iff the
    # array contains NaN or +-Inf
    if _nan_guard and data.size and not np.isfinite(data.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._tid = next(_tid_counter)
        _check_finite(arr, "leaf")

    @staticmethod
    def _result(data: np.ndarray, parents, vjp, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._tid = next(_tid_counter)
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties --

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None, create_graph: bool = False) -> None:
        """Accumulate gradients into every reachable leaf with requires_grad."""
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = Tensor(np.ones_like(self.data))
        leaves, gmap, _ = _sweep(self, _as_tensor(grad, self.dtype), create_graph)
        for node in leaves:
            g = gmap[node._tid]
            node.grad = g if node.grad is None else Tensor(node.grad.data + g.data)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _sweep(root: Tensor, seed: Tensor, create_graph: bool, capture=frozenset()):
    """Reverse sweep from root. Returns (leaves, leaf grad map, captured map).

    Node ids increase in creation order, which is a valid topological order,
    so the sweep walks reachable nodes by decreasing id; gradient accumulation
    order is therefore fixed by graph declaration order. Nodes in `capture`
    have their accumulated gradient recorded and act as sweep boundaries
    (partial-derivative semantics).
    """
    if seed.data.shape != root.data.shape:
        raise GraphError("seed gradient shape mismatch")
    reachable = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._tid in reachable:
            continue
        reachable[node._tid] = node
        if node._vjp is not None and node._tid not in capture:
            stack.extend(p for p in node._parents if p.requires_grad)

    gmap = {root._tid: seed}
    leaves = []
    captured = {}
    ctx = _nullctx() if create_graph else no_grad()
    with ctx:
        for tid in sorted(reachable, reverse=True):
            node = reachable[tid]
            g = gmap.pop(tid, None)
            if g is None:
                continue
            if tid in capture:
                captured[tid] = g
                continue
            if node._vjp is None:
                leaves.append(node)
                gmap[tid] = g
                continue
            parts = node._vjp(g)
            for parent, part in zip(node._parents, parts):
                if part is None or not parent.requires_grad:
                    continue
                prev = gmap.get(parent._tid)
                gmap[parent._tid] = part if prev is None else add(prev, part)
    return leaves, gmap, captured


def grad(output: Tensor, wrt, seed=None, create_graph: bool = False):
    """Gradient of `output` w.r.t. the tensors in `wrt` (list or single one).

    Does not touch .grad. `wrt` entries are treated as independent variables:
    the sweep records their accumulated gradient and does not continue past
    them. With create_graph=True the returned tensors stay connected to the
    graph, so they can be differentiated again.
    """
    if not output.requires_grad:
        raise GraphError("grad() of a tensor that does not require grad")
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if seed is None:
        seed = Tensor(np.ones_like(output.data))
    capture = frozenset(w._tid for w in wrt_list)
    _, _, captured = _sweep(output, _as_tensor(seed, output.dtype), create_graph, capture)
    out = [captured.get(w._tid) for w in wrt_list]
    return out[0] if single else out


# -- helpers --


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce gradient g down to `shape` after numpy broadcasting."""
    if g.data.shape == tuple(shape):
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.data.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


def constant(value, like: Tensor = None) -> Tensor:
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


# -- elementwise arithmetic --


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return Tensor._result(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return Tensor._result(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return Tensor._result(-a.data, (a,), vjp, "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GraphError("matmul expects 2-D operands")
    out = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Tensor._result(out, (a, b), vjp, "matmul")


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b (bias broadcast over rows)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    out = x.data @ w.data + b.data

    def vjp(g):
        return matmul(g, transpose(w)), matmul(transpose(x), g), reduce_sum(g, axis=0)

    return Tensor._result(out, (x, w, b), vjp, "linear")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        # cached array when first-order only; rebuilt graph when higher-order
        if _grad_enabled:
            return (mul(g, exp(a)),)
        return (Tensor(g.data * out_data),)

    return Tensor._result(out_data, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (div(g, a),)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), vjp, "log")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(invalid="ignore"):
        out = a.data**p

    def vjp(g):
        return (mul(g, mul(constant(p, a), power(a, p - 1.0))),)

    return Tensor._result(out, (a,), vjp, "power")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def vjp(g):
        if _grad_enabled:
            return (div(g, mul(constant(2.0, a), sqrt(a))),)
        return (Tensor(g.data / (2.0 * out_data)),)

    return Tensor._result(out_data, (a,), vjp, "sqrt")


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def vjp(g):
        return (mul(g, Tensor(sign)),)

    return Tensor._result(np.abs(a.data), (a,), vjp, "abs")


def maximum(a, b) -> Tensor:
    # ties send the full gradient to a
    a, b = _as_tensor(a), _as_tensor(b)
    mask = (a.data >= b.data).astype(a.data.dtype)

    def vjp(g):
        return (
            _unbroadcast(mul(g, Tensor(mask)), a.shape),
            _unbroadcast(mul(g, Tensor(1.0 - mask)), b.shape),
        )

    return Tensor._result(np.maximum(a.data, b.data), (a, b), vjp, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mask = (a.data <= b.data).astype(a.data.dtype)

    def vjp(g):
        return (
            _unbroadcast(mul(g, Tensor(mask)), a.shape),
            _unbroadcast(mul(g, Tensor(1.0 - mask)), b.shape),
        )

    return Tensor._result(np.minimum(a.data, b.data), (a, b), vjp, "minimum")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def vjp(g):
        return (mul(g, Tensor(inside)),)

    return Tensor._result(np.clip(a.data, lo, hi), (a,), vjp, "clamp")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    mask = cond.astype(a.data.dtype)

    def vjp(g):
        return (
            _unbroadcast(mul(g, Tensor(mask)), a.shape),
            _unbroadcast(mul(g, Tensor(1.0 - mask)), b.shape),
        )

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), vjp, "where")


# -- activations --


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)

    def vjp(g):
        return (mul(g, Tensor(factor)),)

    return Tensor._result(a.data * factor, (a,), vjp, "leaky_relu")


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def softplus(a, beta: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    z = beta * a.data
    # stable form: softplus(x) = max(x,0) + log1p(exp(-|x|))
    out = (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta

    def vjp(g):
        if _grad_enabled:
            return (mul(g, sigmoid(mul(constant(beta, a), a))),)
        zz = beta * a.data
        ee = np.exp(-np.abs(zz))
        sig = np.where(zz >= 0, 1.0, ee) / (1.0 + ee)
        return (Tensor(g.data * sig.astype(g.data.dtype)),)

    return Tensor._result(out.astype(a.data.dtype), (a,), vjp, "softplus")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data
    e = np.exp(-np.abs(z))
    out_data = (np.where(z >= 0, 1.0, e) / (1.0 + e)).astype(z.dtype)

    def vjp(g):
        if _grad_enabled:
            s = sigmoid(a)
            return (mul(g, mul(s, sub(constant(1.0, a), s))),)
        return (Tensor(g.data * out_data * (1.0 - out_data)),)

    return Tensor._result(out_data, (a,), vjp, "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        if _grad_enabled:
            t = tanh(a)
            return (mul(g, sub(constant(1.0, a), mul(t, t))),)
        return (Tensor(g.data * (1.0 - out_data * out_data)),)

    return Tensor._result(out_data, (a,), vjp, "tanh")


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (mul(g, cos(a)),)

    return Tensor._result(np.sin(a.data), (a,), vjp, "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (neg(mul(g, sin(a))),)

    return Tensor._result(np.cos(a.data), (a,), vjp, "cos")


# -- shape ops --


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.data.shape

    def vjp(g):
        return (reshape(g, old),)

    return Tensor._result(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return Tensor._result(np.transpose(a.data, axes), (a,), vjp, "transpose")


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        parts = []
        for i in range(len(sizes)):
            key = [slice(None)] * g.data.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            parts.append(getitem(g, tuple(key)))
        return tuple(parts)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concatenate")


def getitem(a, key) -> Tensor:
    """Slice / integer-array indexing with scatter-add backward."""
    a = _as_tensor(a)
    out = a.data[key]
    if out.ndim == 0:
        out = out.reshape(())
    shape = a.data.shape

    def vjp(g):
        return (_scatter(g, key, shape),)

    return Tensor._result(out, (a,), vjp, "slice")


def _is_basic_key(key) -> bool:
    if isinstance(key, tuple):
        return all(isinstance(k, (slice, int)) or k is Ellipsis for k in key)
    return isinstance(key, (slice, int)) or key is Ellipsis


def _scatter(g: Tensor, key, shape) -> Tensor:
    def fwd(gd: np.ndarray) -> np.ndarray:
        buf = np.zeros(shape, dtype=gd.dtype)
        if _is_basic_key(key):
            buf[key] = gd
        else:
            np.add.at(buf, key, gd)
        return buf

    def vjp(gg):
        return (getitem(gg, key),)

    return Tensor._result(fwd(g.data), (g,), vjp, "scatter")


def take(a, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by integer index.

    Backward scatters with np.bincount per column, far faster than add.at for
    the large row-gathers used by the interpolators.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        return (_bincount_scatter(g, idx, a.data.shape),)

    return Tensor._result(out, (a,), vjp, "take")


def _bincount_scatter(g: Tensor, idx: np.ndarray, shape) -> Tensor:
    flat_idx = idx.reshape(-1)
    gd = g.data.reshape(len(flat_idx), -1)
    cols = gd.shape[1]
    buf = np.empty((shape[0], cols), dtype=gd.dtype)
    for c in range(cols):
        buf[:, c] = np.bincount(flat_idx, weights=gd[:, c], minlength=shape[0])
    buf = buf.reshape(shape)

    def vjp(gg):
        return (reshape(take(gg, idx), g.data.shape),)

    return Tensor._result(buf, (g,), vjp, "scatter")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            kd_shape = list(shape)
            for ax in _norm_axes(axis, len(shape)):
                kd_shape[ax] = 1
            gd = reshape(g, tuple(kd_shape))
        elif axis is None:
            gd = reshape(g, (1,) * len(shape)) if shape else g
        return (broadcast_to(gd, shape),)

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = int(np.prod([a.data.shape[ax] for ax in _norm_axes(axis, a.data.ndim)]))
    return mul(reduce_sum(a, axis, keepdims), constant(1.0 / n, a))


def _norm_axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.data.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return Tensor._result(np.broadcast_to(a.data, shape), (a,), vjp, "broadcast")


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return Tensor._result(np.cumsum(a.data, axis=axis), (a,), vjp, "cumsum")


def flip(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (flip(g, axis),)

    return Tensor._result(np.flip(a.data, axis=axis), (a,), vjp, "flip")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return concatenate([reshape(t, _expanded(t, axis)) for t in tensors], axis=axis)


def _expanded(t: Tensor, axis: int):
    shape = list(t.data.shape)
    if axis < 0:
        axis = len(shape) + axis + 1
    shape.insert(axis, 1)
    return tuple(shape)


# -- structured primitives --


def positional_encoding(x, octaves: int, include_input: bool = True) -> Tensor:
    """Sine/cosine encoding with frequencies 2^k * pi, k = 0..octaves-1.

    Fused: one graph node instead of ~4*octaves elementwise ops.
    """
    x = _as_tensor(x)
    d = x.data.shape[-1]
    freqs = ((2.0 ** np.arange(octaves)) * np.pi).astype(x.data.dtype)
    ang = x.data[..., None, :] * freqs[:, None]  # (..., octaves, d)
    sin_a = np.sin(ang)
    cos_a = np.cos(ang)
    parts = ([x.data] if include_input else []) + [
        band for k in range(octaves) for band in (sin_a[..., k, :], cos_a[..., k, :])
    ]
    out = np.concatenate(parts, axis=-1)

    def vjp(g):
        if not _grad_enabled:
            gd = g.data
            off = 0
            acc = np.zeros_like(x.data)
            if include_input:
                acc += gd[..., :d]
                off = d
            for k in range(octaves):
                gs = gd[..., off : off + d]
                gc = gd[..., off + d : off + 2 * d]
                acc += freqs[k] * (gs * cos_a[..., k, :] - gc * sin_a[..., k, :])
                off += 2 * d
            return (Tensor(acc),)
        # graph path for higher-order use: adjoint built from ops, g kept live
        nd = g.data.ndim
        key = lambda a, b: tuple([slice(None)] * (nd - 1) + [slice(a, b)])
        off = 0
        acc = None
        if include_input:
            acc = getitem(g, key(0, d))
            off = d
        for k in range(octaves):
            f = constant(float(freqs[k]), x)
            gs = getitem(g, key(off, off + d))
            gc = getitem(g, key(off + d, off + 2 * d))
            term = mul(f, sub(mul(gs, cos(mul(x, f))), mul(gc, sin(mul(x, f)))))
            acc = term if acc is None else add(acc, term)
            off += 2 * d
        return (acc,)

    return Tensor._result(out, (x,), vjp, "positional_encoding")


def weighted_blend(w, table) -> Tensor:
    """Per-row convex blend: out[n,c] = sum_k w[n,k] * table[n,k,c].

    Fused einsum; linear in both arguments so gradients are exact.
    """
    w, table = _as_tensor(w), _as_tensor(table)
    out = np.einsum("nk,nkc->nc", w.data, table.data)

    def vjp(g):
        if _grad_enabled:
            gw = weighted_blend(g, transpose(table, (0, 2, 1)))
            n, k = w.data.shape
            c = table.data.shape[2]
            gt = mul(reshape(w, (n, k, 1)), reshape(g, (n, 1, c)))
            return gw, gt
        gw = np.einsum("nc,nkc->nk", g.data, table.data)
        gt = w.data[:, :, None] * g.data[:, None, :]
        return Tensor(gw), Tensor(gt)

    return Tensor._result(out, (w, table), vjp, "weighted_blend")


def grid_sample3d(grid, points) -> Tensor:
    """Trilinear interpolation of grid (D,H,W,C) at points (N,3) given in grid
    index coordinates, clamp-to-edge. Differentiable in grid and points."""
    grid = _as_tensor(grid)
    points = _as_tensor(points)
    D, H, W, C = grid.data.shape

    p = concatenate(
        [
            clamp(getitem(points, (slice(None), slice(i, i + 1))), 0.0, float(e - 1))
            for i, e in enumerate((D, H, W))
        ],
        axis=1,
    )
    base = np.floor(p.data).astype(np.int64)
    base[:, 0] = np.clip(base[:, 0], 0, max(D - 2, 0))
    base[:, 1] = np.clip(base[:, 1], 0, max(H - 2, 0))
    base[:, 2] = np.clip(base[:, 2], 0, max(W - 2, 0))
    frac = sub(p, Tensor(base.astype(p.data.dtype)))

    flat = reshape(grid, (D * H * W, C))
    fd = getitem(frac, (slice(None), slice(0, 1)))
    fh = getitem(frac, (slice(None), slice(1, 2)))
    fw = getitem(frac, (slice(None), slice(2, 3)))
    one = constant(1.0, points)
    out = None
    for dd in (0, 1):
        for dh in (0, 1):
            for dw in (0, 1):
                idx = (base[:, 0] + dd) * H * W + (base[:, 1] + dh) * W + (base[:, 2] + dw)
                wgt = mul(mul(fd if dd else sub(one, fd), fh if dh else sub(one, fh)), fw if dw else sub(one, fw))
                term = mul(take(flat, idx), wgt)
                out = term if out is None else add(out, term)
    return out


def image_sample(image, uv) -> Tensor:
    """Bilinear sample of image (H,W,C) at uv (N,2) in [0,1]^2, clamp-to-edge.

    Texel centers sit at ((j+0.5)/W, (i+0.5)/H); u maps to columns, v to rows.
    Differentiable in both image and uv.
    """
    image = _as_tensor(image)
    uv = _as_tensor(uv)
    H, W, C = image.data.shape

    u = mul(getitem(uv, (slice(None), slice(0, 1))), constant(float(W), uv))
    v = mul(getitem(uv, (slice(None), slice(1, 2))), constant(float(H), uv))
    x = clamp(sub(u, constant(0.5, uv)), 0.0, float(W - 1))
    y = clamp(sub(v, constant(0.5, uv)), 0.0, float(H - 1))
    x0 = np.clip(np.floor(x.data[:, 0]).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y.data[:, 0]).astype(np.int64), 0, max(H - 2, 0))
    fx = sub(x, Tensor(x0[:, None].astype(x.data.dtype)))
    fy = sub(y, Tensor(y0[:, None].astype(y.data.dtype)))

    flat = reshape(image, (H * W, C))
    one = constant(1.0, uv)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    w00 = mul(sub(one, fx), sub(one, fy))
    w10 = mul(fx, sub(one, fy))
    w01 = mul(sub(one, fx), fy)
    w11 = mul(fx, fy)
    return add(
        add(mul(take(flat, y0 * W + x0), w00), mul(take(flat, y0 * W + x1), w10)),
        add(mul(take(flat, y1 * W + x0), w01), mul(take(flat, y1 * W + x1), w11)),
    )


# -- small conveniences used across modules --


def dot(a, b, keepdims: bool = True) -> Tensor:
    return reduce_sum(mul(a, b), axis=-1, keepdims=keepdims)


def norm(a, axis: int = -1, keepdims: bool = True, eps: float = 0.0) -> Tensor:
    sq = reduce_sum(mul(a, a), axis=axis, keepdims=keepdims)
    if eps:
        sq = add(sq, constant(eps, _as_tensor(a)))
    return sqrt(sq)


def normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return div(a, norm(a, axis=axis, keepdims=True, eps=eps))
