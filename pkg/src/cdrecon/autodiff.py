"""Reverse-mode automatic differentiation over dense numpy arrays.

The runtime is a Wengert-list tape: every differentiable op appends one
backward closure to the active :class:`Tape`, and ``Tape.backward`` replays
the closures in exact reverse execution order.  Tensors created while no tape
is active are detached; their gradients are never written.

Precision is a package-level switch: test mode runs float64 (required for
finite-difference gradient checks), run mode float32.
"""

from __future__ import annotations

import numpy as np

from cdrecon.errors import CheckFailedError, InvalidArgumentError

_DTYPE = np.float64
_TAPE_STACK: list["Tape"] = []


def set_precision(mode: str) -> None:
    """Select the floating dtype for newly created tensors: 'test' (f64) or 'run' (f32)."""
    global _DTYPE
    if mode == "test":
        _DTYPE = np.float64
    elif mode == "run":
        _DTYPE = np.float32
    else:
        raise InvalidArgumentError(f"unknown precision mode {mode!r}")


def default_dtype():
    return _DTYPE


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops; backward visits them in reverse order."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def backward(self, output: "Tensor") -> None:
        if output.data.size != 1:
            raise InvalidArgumentError("backward requires a scalar output")
        output.grad = np.ones_like(output.data)
        for fn in reversed(self._records):
            fn()


class Tensor:
    """A dense n-d array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make_output(data, inputs, vjps):
    """Wrap raw output data; register one backward closure if a tape is live."""
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:

        def backward():
            g = out.grad
            if g is None:
                return
            for t, vjp in zip(inputs, vjps):
                if t.requires_grad:
                    gt = vjp(g)
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gt

        tape.record(backward)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    return _make_output(-a.data, (a,), (lambda g: -g,))


def scale(a, s: float) -> Tensor:
    return _make_output(a.data * s, (a,), (lambda g: g * s,))


def relu(a) -> Tensor:
    mask = a.data > 0
    return _make_output(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a) -> Tensor:
    # stable two-branch logistic
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make_output(out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return _make_output(out, (a,), (lambda g: g * (1.0 - out * out),))


def absolute(a) -> Tensor:
    sgn = np.sign(a.data)
    return _make_output(np.abs(a.data), (a,), (lambda g: g * sgn,))


def clamp(a, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _make_output(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,))


def log_tsdf(a) -> Tensor:
    """Signed base-2 log transform sgn(x) * log2(1 + |x|); maps [-1, 1] onto itself."""
    x = a.data
    out = np.sign(x) * np.log2(1.0 + np.abs(x))
    deriv = 1.0 / ((1.0 + np.abs(x)) * np.log(2.0))
    return _make_output(out, (a,), (lambda g: g * deriv,))


# ---------------------------------------------------------------------------
# reductions / shaping


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make_output(np.asarray(out), (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a) -> Tensor:
    """Max over all elements; gradient routes to the first argmax element."""
    idx = int(np.argmax(a.data))
    out = a.data.reshape(-1)[idx]

    def vjp(g):
        gd = np.zeros_like(a.data)
        gd.reshape(-1)[idx] = g
        return gd

    return _make_output(np.asarray(out), (a,), (vjp,))


def reshape(a, shape) -> Tensor:
    old = a.data.shape
    return _make_output(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _make_output(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make_output(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def softmax(a, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return p * (g - dot)

    return _make_output(p, (a,), (vjp,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InvalidArgumentError("matmul expects 2-d operands")
    out = a.data @ b.data
    return _make_output(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """Row-wise affine map: (N, Cin) @ (Cin, Cout) + b."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# 2-d image ops (channel-first layout: (C, H, W))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution of a (Cin, H, W) map with a (Cout, Cin, kh, kw) kernel."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise InvalidArgumentError("conv2d expects (Cin,H,W) input and (Cout,Cin,kh,kw) kernel")
    cin, h, wd = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin != cin_k:
        raise InvalidArgumentError(f"conv2d channel mismatch: input {cin} vs kernel {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError("conv2d kernel spatial dims must be odd")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise InvalidArgumentError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col: one strided slice per kernel tap
    cols = np.empty((cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (w2 @ cols2).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(cout, 1, 1)

    def vjp_x(g):
        g2 = g.reshape(cout, ho * wo)
        dcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        return dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp

    def vjp_w(g):
        g2 = g.reshape(cout, ho * wo)
        return (g2 @ cols2.T).reshape(w.data.shape)

    inputs = [x, w]
    vjps = [vjp_x, vjp_w]
    if b is not None:
        inputs.append(b)
        vjps.append(lambda g: g.sum(axis=(1, 2)))
    return _make_output(out, tuple(inputs), tuple(vjps))


def avg_pool2d(x) -> Tensor:
    """2x2 stride-2 average pooling of a (C, H, W) map; H and W must be even."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError("avg_pool2d requires even spatial dims")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25

    return _make_output(out, (x,), (vjp,))


def upsample2d_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of a (C, H, W) map by an integer factor."""
    c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def vjp(g):
        return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    return _make_output(out, (x,), (vjp,))


def gather_pixels(feat, iy, ix) -> Tensor:
    """Integer pixel gather from a (C, H, W) map at rows iy, cols ix -> (N, C)."""
    c, h, w = feat.data.shape
    lin = np.asarray(iy, dtype=np.int64) * w + np.asarray(ix, dtype=np.int64)
    flat = feat.data.reshape(c, h * w)
    out = flat[:, lin].T.copy()

    def vjp(g):
        dflat = np.zeros((h * w, c), dtype=feat.data.dtype)
        np.add.at(dflat, lin, g)
        return dflat.T.reshape(c, h, w)

    return _make_output(out, (feat,), (vjp,))


def bilinear_sample2d(feat, px, py):
    """Bilinear sample a (C, H, W) map at continuous cell coords -> ((N, C), valid).

    Coordinates are in cell units where (0, 0) is the center of the top-left
    cell. Corners falling outside the map contribute zero. The boolean `valid`
    marks samples whose footprint lies fully inside the map.
    """
    c, h, w = feat.data.shape
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    flat = feat.data.reshape(c, h * w)
    n = px.shape[0]
    out = np.zeros((n, c), dtype=feat.data.dtype)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx = x0 + dx
            cy = y0 + dy
            wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            lin = np.where(ok, cy * w + cx, 0)
            out += np.where(ok, wt, 0.0)[:, None] * flat[:, lin].T
            corners.append((lin, np.where(ok, wt, 0.0)))
    valid = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)

    def vjp(g):
        dflat = np.zeros((h * w, c), dtype=feat.data.dtype)
        for lin, wt in corners:
            np.add.at(dflat, lin, g * wt[:, None])
        return dflat.T.reshape(c, h, w)

    return _make_output(out, (feat,), (vjp,)), valid


def gather_rows(x, idx, n_out: int | None = None) -> Tensor:
    """Row gather from (N, C); idx entries of -1 yield zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    present = idx >= 0
    safe = np.where(present, idx, 0)
    out = x.data[safe] * present[:, None]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, safe[present], g[present])
        return dx

    return _make_output(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer labels (N,)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    if n == 0:
        return constant(0.0)
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    out = (lse - x[np.arange(n), labels]).mean()
    p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return d * (g / n)

    return _make_output(np.asarray(out), (logits,), (vjp,))


def bce_with_logits(logits, targets, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on raw logits with an optional positive-class weight."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    n = x.size
    if n == 0:
        return constant(0.0)
    sp_pos = np.logaddexp(0.0, -x)  # softplus(-x) = -log sigmoid(x)
    sp_neg = np.logaddexp(0.0, x)
    out = (pos_weight * y * sp_pos + (1.0 - y) * sp_neg).mean()
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))

    def vjp(g):
        return (pos_weight * y * (sig - 1.0) + (1.0 - y) * sig) * (g / n)

    return _make_output(np.asarray(out), (logits,), (vjp,))


def masked_mean_abs(pred, target, mask=None) -> Tensor:
    """Mean absolute error, optionally restricted to mask==True entries."""
    t = _as_tensor(target)
    d = absolute(sub(pred, t))
    if mask is None:
        return tmean(d)
    m = np.asarray(mask, dtype=d.data.dtype)
    n = float(m.sum())
    if n == 0:
        return constant(0.0)
    return scale(tsum(mul(d, constant(m))), 1.0 / n)


# ---------------------------------------------------------------------------
# gradient checking and optimization


def grad_check(fn, params: dict, eps: float = 1e-4, max_per_param: int | None = None, seed: int = 0) -> float:
    """Compare tape gradients of a scalar-valued closure against central differences.

    `fn` must rebuild the graph from `params` on every call. Returns the max
    over checked parameter elements of |fd - g| / max(|g|, 1e-8). Requires
    64-bit mode. `max_per_param` caps the number of elements probed per
    parameter (seeded subsample); default probes every element.
    """
    if _DTYPE != np.float64:
        raise CheckFailedError("grad_check requires test (64-bit) precision mode")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    if not np.isfinite(loss.data).all():
        raise CheckFailedError("non-finite loss in grad_check")
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise CheckFailedError(f"non-finite gradient for {name}")
        analytic[name] = g.copy()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = rng.choice(flat.size, size=max_per_param, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(fd - ga[i]) / max(abs(ga[i]), 1e-8)
            worst = max(worst, rel)
    return worst


class Adam:
    """Adam optimizer over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
