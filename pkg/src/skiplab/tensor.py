"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is 64-bit: the invariant suite asserts near-machine-precision
identities, so speed takes a back seat to exactness.  The gradient tape is
built per forward pass and freed by ``backward``; a graph can be consumed
only once.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (values still computed)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy float64 array plus an optional gradient and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._spent = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / other)
        raise TypeError("tensor division only supports python scalars")

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad tensor.

        The root must be scalar.  The tape is freed afterwards; a second
        backward through any part of it raises ContractError.
        """
        if self.shape != ():
            raise ContractError("backward requires a scalar root")
        if not self.requires_grad:
            raise ContractError("root does not require grad; nothing to do")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._spent:
                raise ContractError("graph already consumed by a previous backward")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._spent = True
                node._backward = None
                node._parents = ()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data, parents, backward_builder):
    """Create an op output; record the tape node only when it matters."""
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_builder()
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural primitives ----------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def build():
        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return bwd

    return _make(data, (a, b), build)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def build():
        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        return bwd

    return _make(data, (a, b), build)


def neg(a):
    a = _as_tensor(a)

    def build():
        def bwd(g):
            _accumulate(a, -g)

        return bwd

    return _make(-a.data, (a,), build)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data

    def build():
        def bwd(g):
            _accumulate(a, _unbroadcast(g * bd, a.shape))
            _accumulate(b, _unbroadcast(g * ad, b.shape))

        return bwd

    return _make(data, (a, b), build)


def mul_scalar(a, c):
    a = _as_tensor(a)
    c = float(c)

    def build():
        def bwd(g):
            _accumulate(a, g * c)

        return bwd

    return _make(a.data * c, (a,), build)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def build():
        def bwd(g):
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)

        return bwd

    return _make(ad @ bd, (a, b), build)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def build():
        def bwd(g):
            _accumulate(a, g.reshape(old))

        return bwd

    return _make(a.data.reshape(shape), (a,), build)


def concat_channels(parts):
    """Concatenate along axis 1 (the channel axis)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def build():
        def bwd(g):
            off = 0
            for p, c in zip(parts, sizes):
                _accumulate(p, g[:, off : off + c])
                off += c

        return bwd

    return _make(data, tuple(parts), build)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape

    def build():
        def bwd(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(gg, shape).copy())

        return bwd

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), build)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= shape[i]

    def build():
        def bwd(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g / count, shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(gg / count, shape).copy())

        return bwd

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), build)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def build():
        def bwd(g):
            _accumulate(a, g * data)

        return bwd

    return _make(data, (a,), build)


def log(a):
    a = _as_tensor(a)
    ad = a.data

    def build():
        def bwd(g):
            _accumulate(a, g / ad)

        return bwd

    return _make(np.log(ad), (a,), build)


def sigmoid(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def build():
        def bwd(g):
            _accumulate(a, g * s * (1.0 - s))

        return bwd

    return _make(s, (a,), build)


def silu(a):
    """x * sigmoid(x); silu(0) = 0."""
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def build():
        ad = a.data

        def bwd(g):
            _accumulate(a, g * (s + ad * s * (1.0 - s)))

        return bwd

    return _make(data, (a,), build)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def build():
        def bwd(g):
            _accumulate(a, g * mask)

        return bwd

    return _make(a.data * mask, (a,), build)


def logsumexp(a, axis):
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = np.exp(a.data - m)
    s = z.sum(axis=axis, keepdims=True)
    data = (m + np.log(s)).squeeze(axis=axis)

    def build():
        soft = z / s

        def bwd(g):
            _accumulate(a, np.expand_dims(g, axis) * soft)

        return bwd

    return _make(data, (a,), build)


# -- spatial primitives ------------------------------------------------------


def _conv_patches(x, kh, kw, stride, padding):
    """Patch matrix (B*OH*OW, kh*kw*C) gathered from a channels-last view.

    The innermost axis runs over (kw, C), which is contiguous in the padded
    channels-last buffer, so the gather copies long runs.
    """
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((b, hp, wp, c), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, oh, ow, kh, kw * c),
        strides=(sb, sh * stride, sw * stride, sh, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b * oh * ow, kh * kw * c), oh, ow


def _conv_scatter(dpatch, x_shape, kh, kw, stride, padding, oh, ow):
    """Adjoint of _conv_patches: scatter-add patch gradients back to the input."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxt = np.zeros((b, hp, wp, c), dtype=np.float64)
    dp = dpatch.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxt[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dp[:, :, :, i, j, :]
    if padding:
        dxt = dxt[:, padding : hp - padding, padding : wp - padding, :]
    return np.ascontiguousarray(dxt.transpose(0, 3, 1, 2))


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over (B, C, H, W) with kernel (O, C, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    bsz = x.shape[0]
    co, ci, kh, kw = w.shape
    if bsz == 0:
        h, wdt = x.shape[2], x.shape[3]
        oh = (h + 2 * padding - kh) // stride + 1
        ow = (wdt + 2 * padding - kw) // stride + 1
        return Tensor(np.zeros((0, co, oh, ow)))
    patches, oh, ow = _conv_patches(x.data, kh, kw, stride, padding)
    wq = w.data.transpose(0, 2, 3, 1).reshape(co, kh * kw * ci)
    out2 = patches @ wq.T
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out2 = out2 + b.data
        parents.append(b)
    out = np.ascontiguousarray(out2.reshape(bsz, oh, ow, co).transpose(0, 3, 1, 2))
    x_shape = x.shape

    def build():
        def bwd(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, co)
            if w.requires_grad:
                dwq = g2.T @ patches
                _accumulate(
                    w, dwq.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
                )
            if x.requires_grad:
                dpatch = g2 @ wq
                _accumulate(x, _conv_scatter(dpatch, x_shape, kh, kw, stride, padding, oh, ow))
            if b is not None and b.requires_grad:
                _accumulate(b, g2.sum(axis=0))

        return bwd

    return _make(out, tuple(parents), build)


def avg_pool2d(x, k=2):
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    data = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def build():
        def bwd(g):
            gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            _accumulate(x, gg)

        return bwd

    return _make(data, (x,), build)


def upsample_nearest(x, factor=2):
    x = _as_tensor(x)
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    b, c, h, w = x.shape

    def build():
        def bwd(g):
            gg = g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))
            _accumulate(x, gg)

        return bwd

    return _make(data, (x,), build)


# -- group normalization ------------------------------------------------------

GROUP_NORM_EPS = 1e-5


def group_norm(x, weight, bias, num_groups=None, partition=None, eps=GROUP_NORM_EPS):
    """Per-group channel normalization with affine parameters.

    Normalizes by max(std, eps), which keeps the map exactly invariant to a
    positive scale applied uniformly within a group while still guarding the
    zero-variance case.  ``partition`` overrides the contiguous grouping with
    an explicit list of equal-size channel-index arrays.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    c = x.shape[1]
    if partition is not None:
        sizes = {len(g) for g in partition}
        if len(sizes) != 1:
            raise ShapeError("group_norm: partition groups must have equal sizes")
        perm = np.concatenate([np.asarray(g) for g in partition])
        if len(perm) != c or len(np.unique(perm)) != c:
            raise ShapeError("group_norm: partition must cover each channel exactly once")
        n_groups = len(partition)
        if np.array_equal(perm, np.arange(c)):
            perm = None  # contiguous partition: identical code path as num_groups
            inv_perm = None
        else:
            inv_perm = np.argsort(perm)
    else:
        if num_groups is None:
            raise ShapeError("group_norm: need num_groups or partition")
        n_groups = num_groups
        if c % n_groups:
            raise ShapeError(f"group_norm: {c} channels not divisible by {n_groups} groups")
        perm = None
        inv_perm = None
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError("group_norm: affine parameters must have one entry per channel")

    b_sz = x.shape[0]
    spatial = x.shape[2:]
    # grouped working copy (B, G, R); a view when the grouping is contiguous
    data = x.data if perm is None else np.ascontiguousarray(x.data[:, perm])
    xg = data.reshape(b_sz, n_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xcg = xg - mu
    std = np.sqrt(np.mean(xcg * xcg, axis=2, keepdims=True))
    s = np.maximum(std, eps)
    # channel order after the permutation, used to spread group stats per channel
    group_of = np.repeat(np.arange(n_groups), c // n_groups)
    w_perm = weight.data if perm is None else weight.data[perm]
    b_perm = bias.data if perm is None else bias.data[perm]
    coef = w_perm[None, :] / s[:, group_of, 0]  # (B, C)
    cshape = (b_sz, c) + (1,) * len(spatial)
    out_p = xcg.reshape(b_sz, c, *spatial) * coef.reshape(cshape) + b_perm.reshape(
        (1, c) + (1,) * len(spatial)
    )
    out = out_p if inv_perm is None else np.ascontiguousarray(out_p[:, inv_perm])

    def build():
        floor = std <= eps

        def bwd(g):
            gp = g if perm is None else np.ascontiguousarray(g[:, perm])
            ycg = xcg.reshape(b_sz, n_groups, -1) / s
            if weight.requires_grad or bias.requires_grad:
                red = (0,) + tuple(range(2, g.ndim))
                if weight.requires_grad:
                    yq = ycg.reshape(b_sz, c, *spatial)
                    dw_p = (gp * yq).sum(axis=red)
                    _accumulate(weight, dw_p if perm is None else _unpermute(dw_p, perm))
                if bias.requires_grad:
                    db_p = gp.sum(axis=red)
                    _accumulate(bias, db_p if perm is None else _unpermute(db_p, perm))
            if x.requires_grad:
                gyg = (gp * w_perm.reshape((1, c) + (1,) * len(spatial))).reshape(
                    b_sz, n_groups, -1
                )
                m1 = gyg.mean(axis=2, keepdims=True)
                m2 = (gyg * ycg).mean(axis=2, keepdims=True)
                dxg = (gyg - m1 - np.where(floor, 0.0, ycg * m2)) / s
                dx = dxg.reshape(b_sz, c, *spatial)
                if inv_perm is not None:
                    dx = np.ascontiguousarray(dx[:, inv_perm])
                _accumulate(x, dx)

        return bwd

    return _make(out, (x, weight, bias), build)


def _unpermute(vec, perm):
    out = np.empty_like(vec)
    out[perm] = vec
    return out
