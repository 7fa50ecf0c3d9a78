"""Reverse-mode autodiff over dense numpy arrays.

Forward and backward run in float32 by default; tensors built from float64
data stay float64, which is how the finite-difference oracle re-runs the
same graph at higher precision. No global state: the graph lives in parent
links on the result tensors, so distinct graphs are independent and safe to
use from different threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonScalarLossError",
    "UnsupportedOpError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "log",
    "exp",
    "sigmoid",
    "clamp",
    "relu",
    "minimum",
    "maximum",
    "tsum",
    "tmean",
    "matmul",
    "reshape",
    "stack",
    "broadcast_to",
    "softmax",
    "conv2d",
    "grid_sample",
    "resize_bilinear",
    "gradient",
    "finite_diff_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class NonScalarLossError(ValueError):
    """Backward was requested from a tensor that is not a scalar."""


class UnsupportedOpError(ValueError):
    """An operation outside the registered differentiable primitives."""


class Tensor:
    """Dense float array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        GradTape(self).run(self)

    # operator sugar -------------------------------------------------
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

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class GradTape:
    """One reverse traversal of a recorded graph.

    Holds the topological order and the cotangent accumulators keyed by
    tensor identity. Each recorded op's vjp runs exactly once.
    """

    def __init__(self, root: Tensor):
        order = []
        seen = set()
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
        self._order = order
        self.grads: dict[int, np.ndarray] = {}

    def run(self, root: Tensor, seed_grad=None):
        self.grads[id(root)] = (
            np.ones_like(root.data) if seed_grad is None else np.asarray(seed_grad)
        )
        for node in reversed(self._order):
            g = self.grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for p, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    acc = self.grads.get(id(p))
                    self.grads[id(p)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def _node(data, parents, vjp) -> Tensor:
    """Wrap an op result; record it only when some parent is traced."""
    t = Tensor(data)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    return t


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _coerce(b, a.data.dtype)
    if isinstance(b, Tensor):
        return _coerce(a, b.data.dtype), b
    return Tensor(a), Tensor(b)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------
# elementwise primitives
# --------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _coerce(a, np.float32)

    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp)


def power(a, k) -> Tensor:
    """Elementwise a**k for a scalar exponent k."""
    if isinstance(k, Tensor):
        raise UnsupportedOpError("power supports scalar exponents only")
    a = _coerce(a, np.float32)
    k = float(k)

    def vjp(g):
        if k == 0.0:
            return (np.zeros_like(a.data),)
        return (g * k * a.data ** (k - 1.0),)

    return _node(a.data ** k, (a,), vjp)


def log(a) -> Tensor:
    a = _coerce(a, np.float32)

    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), vjp)


def exp(a) -> Tensor:
    a = _coerce(a, np.float32)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _coerce(a, np.float32)
    # tanh form is stable for large |x|
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the bounds."""
    a = _coerce(a, np.float32)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def vjp(g):
        return (g * inside,)

    return _node(out, (a,), vjp)


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ~take_a, b.shape) if b.requires_grad else None,
        )

    return _node(np.minimum(a.data, b.data), (a, b), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ~take_a, b.shape) if b.requires_grad else None,
        )

    return _node(np.maximum(a.data, b.data), (a, b), vjp)


# --------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a, np.float32)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a, np.float32)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedOpError("matmul supports 2-D operands only")

    def vjp(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _node(a.data @ b.data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _coerce(a, np.float32)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), vjp)


def _getitem(a: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if not isinstance(p, (int, slice, type(Ellipsis))):
            raise UnsupportedOpError(
                "gradient through advanced indexing is not supported"
            )

    def vjp(g):
        z = np.zeros_like(a.data)
        z[idx] = g
        return (z,)

    return _node(a.data[idx], (a,), vjp)


def stack(tensors, axis=0) -> Tensor:
    ts = [_coerce(t, np.float32) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(
            np.take(g, i, axis=axis) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _node(out, tuple(ts), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a, np.float32)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def softmax(a, axis=-1) -> Tensor:
    """Softmax along an axis, composed from primitives.

    Subtracting the detached max is exact: softmax is shift invariant, so
    the constant shift contributes zero gradient.
    """
    a = _coerce(a, np.float32)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# --------------------------------------------------------------------
# structured primitives: convolution, bilinear sampling, resize
# --------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix plus output dims."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x (N,C,H,W), w (F,C,kh,kw), optional bias (F,)."""
    x = _coerce(x, np.float32)
    w = _coerce(w, x.data.dtype)
    if x.ndim != 4 or w.ndim != 4:
        raise UnsupportedOpError("conv2d expects x (N,C,H,W) and w (F,C,kh,kw)")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: x has {c}, w expects {cw}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = cols @ w.data.reshape(f, -1).T
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = _coerce(b, x.data.dtype)
        out = out + b.data.reshape(1, f, 1, 1)
        parents.append(b)
    # keep the patch matrix only when the weight gradient is needed
    cols_kept = cols if w.requires_grad else None

    def vjp(g):
        gy = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = None
        if w.requires_grad:
            gw = (gy.T @ cols_kept).reshape(f, c, kh, kw)
        gx = None
        if x.requires_grad:
            gx = _conv2d_input_grad(g, w.data, (n, c, h, wd), stride, padding)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _node(out, tuple(parents), vjp)


def _conv2d_input_grad(gy, w, x_shape, stride, padding):
    """Gradient w.r.t. conv input via a stride-1 full correlation."""
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    # dilate by stride, then pad to full-correlation size
    hd, wdd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    dil = np.zeros((n, f, hd, wdd), dtype=gy.dtype)
    dil[:, :, ::stride, ::stride] = gy
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    pad_full = np.pad(dil, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    cols, hh, ww = _im2col(pad_full, kh, kw, 1, 0)
    core = cols @ w_t.reshape(c, -1).T
    core = core.reshape(n, hh, ww, c).transpose(0, 3, 1, 2)
    gx_p = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    gx_p[:, :, :hh, :ww] = core  # rows past the last window get zero grad
    if padding:
        return gx_p[:, :, padding:-padding, padding:-padding]
    return gx_p


def _grid_shapes(src: Tensor, gx: Tensor):
    if src.ndim not in (3, 4):
        raise UnsupportedOpError("grid_sample src must be (C,H,W) or (N,C,H,W)")
    if gx.ndim not in (2, 3):
        raise UnsupportedOpError("grid_sample grid must be (Ho,Wo) or (N,Ho,Wo)")


def grid_sample(src, gx, gy) -> Tensor:
    """Bilinear sampling of src at continuous pixel coordinates (gx, gy).

    Coordinates index pixel centers: (0,0) is the first pixel, (W-1,H-1)
    the last. Samples with no valid neighbor return 0 and receive zero
    gradient; partially out-of-bounds samples roll off bilinearly.

    Shapes: src (C,H,W) or (N,C,H,W); gx/gy (Ho,Wo) or (N,Ho,Wo). A 3-D
    src with a batched grid is shared across the batch.
    """
    src = _coerce(src, np.float32)
    gx = _coerce(gx, np.float32)
    gy = _coerce(gy, gx.data.dtype)
    _grid_shapes(src, gx)
    if gx.shape != gy.shape:
        raise ValueError("gx and gy must have identical shapes")

    batched_grid = gx.ndim == 3
    batched_src = src.ndim == 4
    if batched_src and not batched_grid:
        raise UnsupportedOpError("batched src requires a batched grid")
    if batched_src and src.shape[0] != gx.shape[0]:
        raise ValueError("batch size mismatch between src and grid")

    c = src.shape[-3]
    h, w = src.shape[-2], src.shape[-1]
    gxd = gx.data
    gyd = gy.data

    x0 = np.floor(gxd)
    y0 = np.floor(gyd)
    fx = gxd - x0
    fy = gyd - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    corners = []  # (weight, valid, lin_index) per bilinear neighbor
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx_
        yi = y0 + dy_
        wt = (fx if dx_ else 1.0 - fx) * (fy if dy_ else 1.0 - fy)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        corners.append((wt * valid, valid, lin))

    src_flat = src.data.reshape(src.shape[:-2] + (h * w,))

    def gather(lin):
        if batched_src:
            n = src.shape[0]
            return np.take_along_axis(
                src_flat, lin.reshape(n, 1, -1), axis=2
            ).reshape((n, c) + lin.shape[1:])
        if batched_grid:
            vals = src_flat[:, lin.reshape(-1)]  # (C, N*Ho*Wo)
            n = lin.shape[0]
            return vals.reshape((c, n) + lin.shape[1:]).swapaxes(0, 1)
        return src_flat[:, lin.reshape(-1)].reshape((c,) + lin.shape)

    vals = [gather(lin) for _, _, lin in corners]
    # weights broadcast over the channel axis
    if batched_grid:
        wts = [wt[:, None, :, :] for wt, _, _ in corners]
    else:
        wts = [wt[None, :, :] for wt, _, _ in corners]
    out = sum(v * wt for v, wt in zip(vals, wts))

    grad_coords = gx.requires_grad or gy.requires_grad

    def vjp(g):
        g_src = None
        if src.requires_grad:
            size = int(np.prod(src.shape))
            acc = np.zeros(size, dtype=np.float64)
            chan = np.arange(c, dtype=np.int64).reshape(
                (1, c, 1) if batched_grid else (c, 1)
            )
            for wt, _, lin in corners:
                if batched_grid:
                    lin_b = lin.reshape(lin.shape[0], 1, -1)
                    if batched_src:
                        n = src.shape[0]
                        base = (
                            np.arange(n, dtype=np.int64).reshape(n, 1, 1) * c + chan
                        ) * (h * w)
                    else:
                        base = chan * (h * w)
                    idx = (base + lin_b).reshape(-1)
                    contrib = (g * wt[:, None, :, :]).reshape(-1)
                else:
                    idx = (chan * (h * w) + lin.reshape(1, -1)).reshape(-1)
                    contrib = (g * wt[None, :, :]).reshape(-1)
                acc += np.bincount(idx, weights=contrib, minlength=size)
            g_src = acc.reshape(src.shape).astype(src.data.dtype)
        g_gx = g_gy = None
        if grad_coords:
            v00, v10, v01, v11 = vals
            ax = 1 if batched_grid else 0
            fy_b = fy[:, None] if batched_grid else fy[None]
            fx_b = fx[:, None] if batched_grid else fx[None]
            dx_val = (1.0 - fy_b) * (v10 - v00) + fy_b * (v11 - v01)
            dy_val = (1.0 - fx_b) * (v01 - v00) + fx_b * (v11 - v10)
            if gx.requires_grad:
                g_gx = (g * dx_val).sum(axis=ax).astype(gx.data.dtype)
            if gy.requires_grad:
                g_gy = (g * dy_val).sum(axis=ax).astype(gy.data.dtype)
        return (g_src, g_gx, g_gy)

    return _node(out, (src, gx, gy), vjp)


def resize_bilinear(src, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (C,H,W) or (N,C,H,W) with half-pixel alignment."""
    src = _coerce(src, np.float32)
    h, w = src.shape[-2], src.shape[-1]
    jj = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ii = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    gx = np.broadcast_to(jj[None, :], (out_h, out_w)).astype(np.float32)
    gy = np.broadcast_to(ii[:, None], (out_h, out_w)).astype(np.float32)
    if src.ndim == 4:
        n = src.shape[0]
        gx = np.broadcast_to(gx, (n, out_h, out_w))
        gy = np.broadcast_to(gy, (n, out_h, out_w))
    return grid_sample(src, Tensor(gx.copy()), Tensor(gy.copy()))


# --------------------------------------------------------------------
# gradient entry points
# --------------------------------------------------------------------

def gradient(loss_fn, params: Tensor) -> Tensor:
    """d loss_fn(params) / d params, same shape as params."""
    if not isinstance(params, Tensor):
        params = Tensor(params)
    params.requires_grad = True
    params.grad = None
    loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise NonScalarLossError("loss_fn must return a Tensor scalar")
    loss.backward()
    if params.grad is None:
        return Tensor(np.zeros_like(params.data))
    return Tensor(params.grad)


def finite_diff_check(
    loss_fn,
    params: Tensor,
    step: float = 1e-4,
    n_coords: int = 100,
    seed: int = 0,
) -> float:
    """Worst relative error between the analytic gradient and central
    differences at n_coords seeded coordinates. Runs in float64 so the
    numeric side is trustworthy; the relative-error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(params.data, dtype=np.float64)
    if n_coords > base.size:
        raise ValueError("n_coords exceeds the number of parameters")
    analytic = gradient(loss_fn, Tensor(base.copy(), requires_grad=True)).data

    rng = np.random.default_rng(seed)
    coords = rng.choice(base.size, size=n_coords, replace=False)

    def eval_at(flat):
        out = loss_fn(Tensor(flat.reshape(base.shape)))
        return float(out.data)

    worst = 0.0
    flat = base.reshape(-1)
    for idx in coords:
        bump = np.zeros_like(flat)
        bump[idx] = step
        numeric = (eval_at(flat + bump) - eval_at(flat - bump)) / (2.0 * step)
        a = float(analytic.reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
