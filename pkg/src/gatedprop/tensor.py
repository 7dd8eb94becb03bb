"""Dense tensors with reverse-mode automatic differentiation.

The operation set is intentionally small: exactly what the propagation
engine needs. Data is stored row-major in numpy arrays (float32 by
default, float64 for gradient checking). Forward calls record a dynamic
graph of closures; ``backward()`` walks it once in reverse topological
order and then releases it, so each recorded graph is consumed by one
backward pass. Gradients accumulate across separate backward calls until
``zero_grad``.

No broadcasting beyond the few patterns used here (per-channel bias,
per-row reductions). No views: every op produces a fresh contiguous
buffer, which keeps aliasing out of the gradient rules.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # copy: g may be shared
        else:
            self.grad += g

    # -- graph ---------------------------------------------------------

    def backward(self, free_graph=True):
        """Backpropagate from a scalar, accumulating into ``grad`` buffers.

        The recorded graph below this node is released afterwards (unless
        ``free_graph=False``), so a second backward needs a fresh forward.
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if free_graph:
                if node._parents:
                    node.grad = None  # intermediate: buffer no longer needed
                node._parents = ()
                node._backward = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return total(self)


def _result(data, parents, backward):
    """Wrap an op result; records the closure only when grad is live."""
    out = Tensor(data)
    live = _grad_enabled and any(p.requires_grad for p in parents)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"dtype mismatch: {dt} vs {t.data.dtype}")
    return dt


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accumulate(g * s)

    return _result(a.data * a.data.dtype.type(s), (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * logistic(x); the gating nonlinearity."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _result(out, (a,), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a per-channel vector over the last axis."""
    _check_same_dtype(a, b)
    if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {a.shape} vs {b.shape}")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _result(a.data + b.data, (a, b), bwd)


# -- shape plumbing ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape).copy(), (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")

    def bwd(g):
        a._accumulate(np.ascontiguousarray(g.T))

    return _result(np.ascontiguousarray(a.data.T), (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    base = tensors[0].data.shape
    for t in tensors[1:]:
        ts = t.data.shape
        if len(ts) != len(base) or any(ts[i] != base[i] for i in range(len(base)) if i != axis):
            raise DimensionError(f"concat axis={axis}: {base} vs {ts}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, o0, o1 in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(o0, o1)
            t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel (last) axis of two token matrices."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("concat_channels expects matrices")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_channels: leading dims {a.shape[0]} vs {b.shape[0]}")
    return concat([a, b], axis=1)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("slice_cols expects a matrix")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        a._accumulate(full)

    return _result(a.data[:, j0:j1].copy(), (a,), bwd)


def _scatter_rows(buf: np.ndarray, idx: np.ndarray, updates: np.ndarray):
    """buf[idx[i]] += updates[i] for repeated indices; bincount is far
    faster than np.add.at for this access pattern."""
    m, c = buf.shape
    flat = (idx[:, None] * c + np.arange(c, dtype=np.intp)).ravel()
    buf += np.bincount(flat, weights=updates.ravel(), minlength=m * c) \
        .reshape(m, c).astype(buf.dtype, copy=False)


def gather_rows(a: Tensor, index) -> Tensor:
    """Pick rows by integer index; backward scatter-adds."""
    if a.data.ndim != 2:
        raise DimensionError("gather_rows expects a matrix")
    idx = np.asarray(index, dtype=np.intp).ravel()

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        _scatter_rows(a.grad, idx, g)

    return _result(a.data[idx], (a,), bwd)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bwd)


# -- reductions and normalizers ---------------------------------------


def total(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(np.full_like(a.data, g.reshape(())))

    return _result(a.data.sum(), (a,), bwd)


def softmax_rows(a: Tensor, valid=None) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction.

    ``valid`` is an optional boolean mask of the same shape; masked-out
    entries get weight exactly 0 and are excluded from the normalization
    (they also receive no gradient). Every row must keep at least one
    valid entry.
    """
    if a.data.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    x = a.data
    if valid is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != x.shape:
            raise DimensionError(f"softmax mask shape {valid.shape} vs {x.shape}")
        if not valid.any(axis=1).all():
            raise ContractError("softmax_rows: a row has no valid entries")
        neg = np.where(valid, x, -np.inf)
        m = neg.max(axis=1, keepdims=True)
        e = np.where(valid, np.exp(x - m), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        a._accumulate(y * (g - dot))

    return _result(y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the channel axis, then rescale and shift."""
    _check_same_dtype(a, gain, bias)
    if a.data.ndim != 2 or gain.data.ndim != 1 or gain.shape[0] != a.shape[1] or bias.shape != gain.shape:
        raise DimensionError(f"layer_norm: {a.shape}, gain {gain.shape}, bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        gain._accumulate((g * xhat).sum(axis=0))
        bias._accumulate(g.sum(axis=0))
        gh = g * gain.data
        a._accumulate(inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True)))

    return _result(xhat * gain.data + bias.data, (a, gain, bias), bwd)


def cross_entropy_rows(logits: Tensor, targets, active_cols=None) -> Tensor:
    """Mean cross-entropy of integer targets over rows of a logit matrix.

    ``active_cols`` optionally restricts the distribution to a boolean
    subset of columns (inactive object slots contribute neither
    probability mass nor gradient). Returns a scalar.
    """
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy_rows expects a matrix")
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (logits.shape[0],):
        raise DimensionError(f"targets shape {t.shape} vs {logits.shape[0]} rows")
    x = logits.data
    n, k = x.shape
    if active_cols is not None:
        act = np.asarray(active_cols, dtype=bool)
        if act.shape != (k,):
            raise DimensionError("active_cols must match the column count")
        if not act[t].all():
            raise ContractError("cross_entropy_rows: target in inactive column")
        masked = np.where(act[None, :], x, -np.inf)
    else:
        act = None
        masked = x
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    nll = (m.squeeze(1) + np.log(z.squeeze(1))) - x[np.arange(n), t]
    out = nll.mean()

    def bwd(g):
        gg = g.reshape(()) / n
        d = p.copy()
        d[np.arange(n), t] -= 1.0
        if act is not None:
            d[:, ~act] = 0.0
        logits._accumulate(d * gg)

    return _result(out, (logits,), bwd)


# -- spatial ops -------------------------------------------------------


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 2D correlation with same-size zero padding, no bias.

    x: [H, W, C]; kernel: [ks, ks, C] with odd ks.
    """
    from .errors import ConfigError

    _check_same_dtype(x, kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise DimensionError("depthwise_conv2d expects [H,W,C] input and [ks,ks,C] kernel")
    ks = kernel.shape[0]
    if kernel.shape[1] != ks or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"kernel {kernel.shape} does not match input {x.shape}")
    if ks % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {ks}")
    h, w, c = x.shape
    pad = (ks - 1) // 2
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
    xp[pad:pad + h, pad:pad + w] = x.data
    out = np.zeros_like(x.data)
    kd = kernel.data
    for ky in range(ks):
        for kx in range(ks):
            out += xp[ky:ky + h, kx:kx + w] * kd[ky, kx]

    def bwd(g):
        gker = np.empty_like(kd)
        dxp = np.zeros_like(xp)
        for ky in range(ks):
            for kx in range(ks):
                patch = xp[ky:ky + h, kx:kx + w]
                gker[ky, kx] = (g * patch).sum(axis=(0, 1))
                dxp[ky:ky + h, kx:kx + w] += g * kd[ky, kx]
        kernel._accumulate(gker)
        x._accumulate(dxp[pad:pad + h, pad:pad + w])

    return _result(out, (x, kernel), bwd)


def im2col(x: Tensor, ks: int, stride: int = 1) -> Tensor:
    """Unfold [H,W,C] into rows of ks*ks*C patch values ("same" padding).

    Output rows scan the stride grid in row-major order, so a conv is
    ``matmul(im2col(x, ks, s), w)`` with w of shape [ks*ks*C, C_out].
    """
    if x.data.ndim != 3:
        raise DimensionError("im2col expects [H,W,C]")
    if ks % 2 == 0:
        from .errors import ConfigError

        raise ConfigError(f"conv kernel size must be odd, got {ks}")
    h, w, c = x.shape
    if h % stride or w % stride:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    pad = (ks - 1) // 2
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
    xp[pad:pad + h, pad:pad + w] = x.data
    cols = np.empty((ho, wo, ks, ks, c), dtype=x.data.dtype)
    for ky in range(ks):
        for kx in range(ks):
            cols[:, :, ky, kx] = xp[ky:ky + h:stride, kx:kx + w:stride]

    def bwd(g):
        gc = g.reshape(ho, wo, ks, ks, c)
        dxp = np.zeros_like(xp)
        for ky in range(ks):
            for kx in range(ks):
                dxp[ky:ky + h:stride, kx:kx + w:stride] += gc[:, :, ky, kx]
        x._accumulate(dxp[pad:pad + h, pad:pad + w])

    return _result(cols.reshape(ho * wo, ks * ks * c), (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of both spatial axes of [H,W,C]."""
    if x.data.ndim != 3:
        raise DimensionError("upsample2x expects [H,W,C]")
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bwd(g):
        x._accumulate(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _result(out, (x,), bwd)


# -- windowed attention kernels ----------------------------------------

_WINDOW_CHUNK = 512  # query rows per chunk; bounds gather scratch memory


def window_scores_heads(q: Tensor, k: Tensor, grid, heads: int) -> Tensor:
    """Head-split window matching scores via one shared shift loop.

    q, k: [n, C] over the (h, w) grid of ``grid=(h, w, lam)``. Returns
    [n*heads, lam*lam] with row blocks ordered position-major (all heads
    of position p are consecutive). Out-of-window entries are zero.
    """
    _check_same_dtype(q, k)
    gh, gw, lam = grid
    n, c = q.shape
    if k.shape != q.shape or gh * gw != n or c % heads:
        raise DimensionError(f"window_scores_heads: q {q.shape} k {k.shape} grid {grid} heads {heads}")
    dk = c // heads
    w = lam * lam
    from .ops import window_index  # same enumeration as the offsets below

    if n <= _DENSE_WINDOW_LIMIT:
        idx, val = window_index(gh, gw, lam)
        qh = np.ascontiguousarray(q.data.reshape(n, heads, dk).transpose(1, 0, 2))
        kh = np.ascontiguousarray(k.data.reshape(n, heads, dk).transpose(1, 0, 2))
        out = np.empty((n, heads, w), dtype=q.data.dtype)
        for hh in range(heads):
            out[:, hh, :] = np.take_along_axis(qh[hh] @ kh[hh].T, idx, axis=1)
        out[~val[:, None, :].repeat(heads, axis=1)] = 0.0

        def bwd_dense(g):
            g3 = g.reshape(n, heads, w)
            if q.grad is None:
                q.grad = np.zeros_like(q.data)
            if k.grad is None:
                k.grad = np.zeros_like(k.data)
            dq = q.grad.reshape(n, heads, dk)
            dkk = k.grad.reshape(n, heads, dk)
            for hh in range(heads):
                gd = _densify_rows(np.where(val, g3[:, hh, :], 0.0), idx, val, n)
                dq[:, hh, :] += gd @ kh[hh]
                dkk[:, hh, :] += gd.T @ qh[hh]

        return _result(out.reshape(n * heads, w), (q, k), bwd_dense)

    q4 = q.data.reshape(gh, gw, heads, dk)
    k4 = k.data.reshape(gh, gw, heads, dk)
    out = np.zeros((gh, gw, heads, w), dtype=q.data.dtype)
    for j, (dy, dx) in enumerate(_offsets(lam)):
        a, b = _shift_slices(gh, gw, dy, dx)
        out[a[0], a[1], :, j] = (q4[a] * k4[b]).sum(axis=-1)

    def bwd(g):
        g4 = g.reshape(gh, gw, heads, w)
        if q.grad is None:
            q.grad = np.zeros_like(q.data)
        if k.grad is None:
            k.grad = np.zeros_like(k.data)
        dq4 = q.grad.reshape(gh, gw, heads, dk)
        dk4 = k.grad.reshape(gh, gw, heads, dk)
        for j, (dy, dx) in enumerate(_offsets(lam)):
            a, b = _shift_slices(gh, gw, dy, dx)
            gj = g4[a[0], a[1], :, j][..., None]
            dq4[a] += gj * k4[b]
            dk4[b] += gj * q4[a]

    return _result(out.reshape(n * heads, w), (q, k), bwd)


def window_mix_heads(attn: Tensor, v: Tensor, grid, heads: int) -> Tensor:
    """Head-split window value mixing matching window_scores_heads layout.

    attn: [n*heads, lam*lam] (zero at invalid positions); v: [n, C_v].
    Returns [n, C_v] with per-head channel blocks mixed by their own rows.
    """
    _check_same_dtype(attn, v)
    gh, gw, lam = grid
    n, cv = v.shape
    w = lam * lam
    if attn.shape != (n * heads, w) or gh * gw != n or cv % heads:
        raise DimensionError(f"window_mix_heads: attn {attn.shape} v {v.shape} grid {grid}")
    dv = cv // heads
    from .ops import window_index

    if n <= _DENSE_WINDOW_LIMIT:
        idx, val = window_index(gh, gw, lam)
        a3 = attn.data.reshape(n, heads, w)
        vh = np.ascontiguousarray(v.data.reshape(n, heads, dv).transpose(1, 0, 2))
        dense = [_densify_rows(np.where(val, a3[:, hh, :], 0.0), idx, val, n)
                 for hh in range(heads)]
        out = np.empty((n, heads, dv), dtype=v.data.dtype)
        for hh in range(heads):
            out[:, hh, :] = dense[hh] @ vh[hh]

        def bwd_dense(g):
            g3 = g.reshape(n, heads, dv)
            if attn.grad is None:
                attn.grad = np.zeros_like(attn.data)
            if v.grad is None:
                v.grad = np.zeros_like(v.data)
            da = attn.grad.reshape(n, heads, w)
            dvv = v.grad.reshape(n, heads, dv)
            for hh in range(heads):
                gh_ = np.ascontiguousarray(g3[:, hh, :])
                da[:, hh, :] += np.where(val, np.take_along_axis(gh_ @ vh[hh].T, idx, axis=1), 0.0)
                dvv[:, hh, :] += dense[hh].T @ gh_

        return _result(out.reshape(n, cv), (attn, v), bwd_dense)

    a4 = attn.data.reshape(gh, gw, heads, w)
    v4 = v.data.reshape(gh, gw, heads, dv)
    out = np.zeros((gh, gw, heads, dv), dtype=v.data.dtype)
    for j, (dy, dx) in enumerate(_offsets(lam)):
        a, b = _shift_slices(gh, gw, dy, dx)
        out[a] += a4[a[0], a[1], :, j][..., None] * v4[b]

    def bwd(g):
        g4 = g.reshape(gh, gw, heads, dv)
        if attn.grad is None:
            attn.grad = np.zeros_like(attn.data)
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        da4 = attn.grad.reshape(gh, gw, heads, w)
        dv4 = v.grad.reshape(gh, gw, heads, dv)
        for j, (dy, dx) in enumerate(_offsets(lam)):
            a, b = _shift_slices(gh, gw, dy, dx)
            da4[a[0], a[1], :, j] += (g4[a] * v4[b]).sum(axis=-1)
            dv4[b] += a4[a[0], a[1], :, j][..., None] * g4[a]

    return _result(out.reshape(n, cv), (attn, v), bwd)


# below this many grid cells, windowed attention densifies into a masked
# [n, n] matrix and rides BLAS; above it, shift-slice arithmetic avoids
# the quadratic buffer
_DENSE_WINDOW_LIMIT = 2048


def _densify_rows(rows, idx, val, n):
    """Spread windowed per-row values into dense [rows, n] columns; invalid
    entries are parked in a dump column so valid zeros survive."""
    m, w = idx.shape
    ext = np.zeros((m, n + 1), dtype=rows.dtype)
    np.put_along_axis(ext, np.where(val, idx, n), np.where(val, rows, 0.0), axis=1)
    return ext[:, :n]


def _offsets(lam):
    r = lam // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shift_slices(h, w, dy, dx):
    """Overlap of the grid with itself shifted by (dy, dx): source region A
    (queries) and target region B = A + (dy, dx) (keys)."""
    ay0, ay1 = max(0, -dy), min(h, h - dy)
    ax0, ax1 = max(0, -dx), min(w, w - dx)
    return (slice(ay0, ay1), slice(ax0, ax1)), (slice(ay0 + dy, ay1 + dy), slice(ax0 + dx, ax1 + dx))


def gather_dot(q: Tensor, keys: Tensor, index, valid, grid=None) -> Tensor:
    """Per-row dot products against per-row key windows.

    out[p, j] = q[p] . keys[index[p, j]]; entries with valid[p, j]=False
    are forced to zero (callers mask them out of the softmax anyway).
    ``grid=(h, w, lam)`` declares the index to be the centered lam x lam
    window enumeration over one h x w grid, switching to shift-based
    slice arithmetic (no gathers) in both directions.
    """
    _check_same_dtype(q, keys)
    if q.data.ndim != 2 or keys.data.ndim != 2 or q.shape[1] != keys.shape[1]:
        raise DimensionError(f"gather_dot: q {q.shape} keys {keys.shape}")
    idx = np.asarray(index, dtype=np.intp)
    val = np.asarray(valid, dtype=bool)
    if idx.shape != val.shape or idx.shape[0] != q.shape[0]:
        raise DimensionError("gather_dot: index/valid shape mismatch")
    n, w = idx.shape
    kd = keys.data
    qd = q.data

    if grid is not None:
        gh, gw, lam = grid
        if gh * gw != n or n != kd.shape[0] or lam * lam != w:
            raise DimensionError(f"gather_dot: grid {grid} does not match {idx.shape}")
        c = qd.shape[1]

        if n <= _DENSE_WINDOW_LIMIT:
            out = np.take_along_axis(qd @ kd.T, idx, axis=1)
            out[~val] = 0.0

            def bwd_dense(g):
                gd = _densify_rows(np.where(val, g, 0.0), idx, val, n)
                if q.grad is None:
                    q.grad = np.zeros_like(qd)
                if keys.grad is None:
                    keys.grad = np.zeros_like(kd)
                q.grad += gd @ kd
                keys.grad += gd.T @ qd

            return _result(out, (q, keys), bwd_dense)

        q3 = qd.reshape(gh, gw, c)
        k3 = kd.reshape(gh, gw, c)
        out3 = np.zeros((gh, gw, w), dtype=qd.dtype)
        for j, (dy, dx) in enumerate(_offsets(lam)):
            a, b = _shift_slices(gh, gw, dy, dx)
            out3[a[0], a[1], j] = np.einsum("ywc,ywc->yw", q3[a], k3[b])

        def bwd3(g):
            g3 = g.reshape(gh, gw, w)
            if q.grad is None:
                q.grad = np.zeros_like(qd)
            if keys.grad is None:
                keys.grad = np.zeros_like(kd)
            dq3 = q.grad.reshape(gh, gw, c)
            dk3 = keys.grad.reshape(gh, gw, c)
            for j, (dy, dx) in enumerate(_offsets(lam)):
                a, b = _shift_slices(gh, gw, dy, dx)
                gj = g3[a[0], a[1], j][..., None]
                dq3[a] += gj * k3[b]
                dk3[b] += gj * q3[a]

        out = out3.reshape(n, w)
        out[~val] = 0.0
        return _result(out, (q, keys), bwd3)

    out = np.zeros((n, w), dtype=q.data.dtype)
    for s in range(0, n, _WINDOW_CHUNK):
        e = min(s + _WINDOW_CHUNK, n)
        kw = kd[idx[s:e]]  # [chunk, w, C]
        out[s:e] = np.einsum("pc,pjc->pj", qd[s:e], kw)
    out[~val] = 0.0

    def bwd(g):
        g = np.where(val, g, 0.0)
        if q.grad is None:
            q.grad = np.zeros_like(qd)
        if keys.grad is None:
            keys.grad = np.zeros_like(kd)
        for s in range(0, n, _WINDOW_CHUNK):
            e = min(s + _WINDOW_CHUNK, n)
            q.grad[s:e] += np.einsum("pj,pjc->pc", g[s:e], kd[idx[s:e]])
            _scatter_rows(keys.grad, idx[s:e].ravel(),
                          (g[s:e, :, None] * qd[s:e, None, :]).reshape(-1, qd.shape[1]))

    return _result(out, (q, keys), bwd)


def gather_mix(attn: Tensor, values: Tensor, index, valid, grid=None) -> Tensor:
    """Window-weighted sums of per-row value windows.

    out[p] = sum_j attn[p, j] * values[index[p, j]]. Invalid positions
    must carry zero attention (the masked softmax guarantees this).
    ``grid`` as in gather_dot.
    """
    _check_same_dtype(attn, values)
    if attn.data.ndim != 2 or values.data.ndim != 2:
        raise DimensionError("gather_mix expects matrices")
    idx = np.asarray(index, dtype=np.intp)
    val = np.asarray(valid, dtype=bool)
    if idx.shape != attn.shape or val.shape != attn.shape:
        raise DimensionError("gather_mix: index/valid shape mismatch")
    n, w = idx.shape
    c = values.shape[1]
    ad = np.where(val, attn.data, 0.0)
    vd = values.data

    if grid is not None:
        gh, gw, lam = grid
        if gh * gw != n or n != vd.shape[0] or lam * lam != w:
            raise DimensionError(f"gather_mix: grid {grid} does not match {idx.shape}")

        if n <= _DENSE_WINDOW_LIMIT:
            dense = _densify_rows(ad, idx, val, n)
            out = dense @ vd

            def bwd_dense(g):
                if attn.grad is None:
                    attn.grad = np.zeros_like(attn.data)
                if values.grad is None:
                    values.grad = np.zeros_like(vd)
                attn.grad += np.where(val, np.take_along_axis(g @ vd.T, idx, axis=1), 0.0)
                values.grad += dense.T @ g

            return _result(out, (attn, values), bwd_dense)

        a3 = ad.reshape(gh, gw, w)
        v3 = vd.reshape(gh, gw, c)
        out3 = np.zeros((gh, gw, c), dtype=vd.dtype)
        for j, (dy, dx) in enumerate(_offsets(lam)):
            a, b = _shift_slices(gh, gw, dy, dx)
            out3[a] += a3[a[0], a[1], j][..., None] * v3[b]

        def bwd3(g):
            g3 = g.reshape(gh, gw, c)
            if attn.grad is None:
                attn.grad = np.zeros_like(attn.data)
            if values.grad is None:
                values.grad = np.zeros_like(vd)
            da3 = attn.grad.reshape(gh, gw, w)
            dv3 = values.grad.reshape(gh, gw, c)
            for j, (dy, dx) in enumerate(_offsets(lam)):
                # the overlap region is exactly the valid set for offset j
                a, b = _shift_slices(gh, gw, dy, dx)
                da3[a[0], a[1], j] += np.einsum("ywc,ywc->yw", g3[a], v3[b])
                dv3[b] += a3[a[0], a[1], j][..., None] * g3[a]

        return _result(out3.reshape(n, c), (attn, values), bwd3)

    out = np.empty((n, c), dtype=vd.dtype)
    for s in range(0, n, _WINDOW_CHUNK):
        e = min(s + _WINDOW_CHUNK, n)
        vw = vd[idx[s:e]]  # [chunk, w, C]
        out[s:e] = np.einsum("pj,pjc->pc", ad[s:e], vw)

    def bwd(g):
        if attn.grad is None:
            attn.grad = np.zeros_like(attn.data)
        if values.grad is None:
            values.grad = np.zeros_like(vd)
        for s in range(0, n, _WINDOW_CHUNK):
            e = min(s + _WINDOW_CHUNK, n)
            attn.grad[s:e] += np.where(val[s:e],
                                       np.einsum("pc,pjc->pj", g[s:e], vd[idx[s:e]]), 0.0)
            _scatter_rows(values.grad, idx[s:e].ravel(),
                          (ad[s:e, :, None] * g[s:e, None, :]).reshape(-1, c))

    return _result(out, (attn, values), bwd)
