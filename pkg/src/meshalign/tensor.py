"""Dense float64 arrays on a reverse-mode differentiation tape.

The engine is deliberately small: a Var wraps a C-contiguous float64
numpy array plus an optional backward closure.  Nodes receive strictly
increasing ids at creation time, so sweeping reachable nodes in
decreasing id order is a valid topological order and visits each node
exactly once.  Kernels are vectorised with numpy; there is no
broadcasting between arrays except the explicit scalar / size-1 cases.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

__all__ = [
    "Var",
    "ShapeError",
    "TapeError",
    "NonFiniteError",
    "no_grad",
    "set_nan_checks",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "relu",
    "sqrt",
    "reshape",
    "permute",
    "broadcast_to",
    "concat",
    "matmul",
    "linear",
    "reduce_sum",
    "reduce_mean",
    "conv2d",
    "maxpool2d",
    "pad_bottom_right",
    "pad_concat",
    "grid_sample",
    "solve",
    "backward",
    "first_nonfinite",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar root, repeated backward)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


_ids = itertools.count()
_grad_enabled = True
_nan_checks = False


def set_nan_checks(enabled: bool) -> None:
    """Toggle per-op finiteness validation (off by default; slows kernels)."""
    global _nan_checks
    _nan_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Suppress tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Var:
    """A float64 array tracked on the tape.

    grad, when populated by backward(), always has the same shape as
    value.  Leaf Vars keep their grad across backward calls (gradients
    accumulate), which is what batched training relies on.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "_id", "_parents",
                 "_backward", "_done_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = _as_array(value)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._id = next(_ids)
        self._parents = ()
        self._backward = None
        self._done_backward = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(np.full(self.shape, float(other))), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def constant(value) -> Var:
    return Var(value, requires_grad=False, op="const")


def _wrap(other) -> Var:
    return other if isinstance(other, Var) else constant(other)


def _node(value: np.ndarray, parents, backward_fn, op: str) -> Var:
    if _nan_checks and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by op {op!r}")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Var(value, requires_grad=track, op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(p: Var, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.zeros_like(p.value)
    p.grad += g


def backward(root: Var) -> None:
    """Reverse sweep from a scalar root, populating grad on every
    requires_grad node reachable through the tape.

    Repeating backward on the same root is an error; leaves accumulate
    across distinct roots (clear grads between optimisation steps).
    """
    if root.value.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.value.shape}")
    if root._done_backward:
        raise TapeError("backward already ran from this root; gradients were not reset")
    root._done_backward = True
    if not root.requires_grad:
        return
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen[n._id] = n
        stack.extend(p for p in n._parents if p.requires_grad and p._id not in seen)
    _accum(root, np.ones_like(root.value))
    for n in sorted(seen.values(), key=lambda v: -v._id):
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)


def first_nonfinite(root: Var) -> Var | None:
    """Earliest-created node (by tape id) with non-finite values, or None."""
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen[n._id] = n
        stack.extend(p for p in n._parents if p._id not in seen)
    bad = [n for n in seen.values() if not np.all(np.isfinite(n.value))]
    return min(bad, key=lambda v: v._id) if bad else None


# ---------------------------------------------------------------------------
# elementwise ops


def _pair(a: Var, b, fwd, grad_a, grad_b, op: str) -> Var:
    """Binary elementwise op: b may be a python scalar, a size-1 Var, or a
    Var of identical shape."""
    if not isinstance(b, Var) and np.ndim(b) == 0:
        bval = float(b)
        out = fwd(a.value, bval)

        def back(g, a=a, bval=bval, out=out):
            _accum(a, grad_a(g, a.value, bval, out))

        return _node(out, (a,), back, op)
    b = _wrap(b)
    scalar_b = b.value.size == 1 and b.value.shape != a.value.shape
    if not scalar_b and a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")
    bval = b.value if not scalar_b else b.value.reshape(())
    out = fwd(a.value, bval)

    def back(g, a=a, b=b, bval=bval, out=out, scalar_b=scalar_b):
        _accum(a, grad_a(g, a.value, bval, out))
        gb = grad_b(g, a.value, bval, out)
        if scalar_b:
            gb = np.sum(gb).reshape(b.value.shape)
        _accum(b, gb)

    return _node(out, (a, b), back, op)


def add(a: Var, b) -> Var:
    return _pair(a, b, lambda x, y: x + y,
                 lambda g, x, y, o: g,
                 lambda g, x, y, o: g, "add")


def sub(a: Var, b) -> Var:
    return _pair(a, b, lambda x, y: x - y,
                 lambda g, x, y, o: g,
                 lambda g, x, y, o: -g, "sub")


def mul(a: Var, b) -> Var:
    return _pair(a, b, lambda x, y: x * y,
                 lambda g, x, y, o: g * y,
                 lambda g, x, y, o: g * x, "mul")


def div(a: Var, b) -> Var:
    return _pair(a, b, lambda x, y: x / y,
                 lambda g, x, y, o: g / y,
                 lambda g, x, y, o: -g * x / (y * y), "div")


def neg(a: Var) -> Var:
    def back(g, a=a):
        _accum(a, -g)

    return _node(-a.value, (a,), back, "neg")


def abs_(a: Var) -> Var:
    out = np.abs(a.value)

    def back(g, a=a):
        _accum(a, g * np.sign(a.value))  # sign(0) == 0: subgradient at the kink

    return _node(out, (a,), back, "abs")


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)

    def back(g, a=a):
        _accum(a, g * (a.value > 0.0))

    return _node(out, (a,), back, "relu")


def sqrt(a: Var) -> Var:
    if np.any(a.value < 0.0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.value)

    def back(g, a=a, out=out):
        _accum(a, g / (2.0 * out))

    return _node(out, (a,), back, "sqrt")


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.value.shape} as {shape}")
    out = a.value.reshape(shape)

    def back(g, a=a):
        _accum(a, g.reshape(a.value.shape))

    return _node(out, (a,), back, "reshape")


def permute(a: Var, axes) -> Var:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.value.ndim} axes")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.value, axes))

    def back(g, a=a, inv=inv):
        _accum(a, np.ascontiguousarray(np.transpose(g, inv)))

    return _node(out, (a,), back, "permute")


def broadcast_to(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def back(g, a=a, shape=shape):
        src = a.value.shape
        g2 = g
        extra = len(shape) - len(src)
        if extra:
            g2 = g2.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g2.shape[i] != 1)
        if axes:
            g2 = g2.sum(axis=axes, keepdims=True)
        _accum(a, g2.reshape(src))

    return _node(out, (a,), back, "broadcast_to")


def take(a: Var, idx) -> Var:
    """Numpy-style indexing; backward scatter-adds (duplicates accumulate)."""
    out = np.array(a.value[idx])

    def back(g, a=a, idx=idx):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(out, (a,), back, "take")


def concat(vs, axis: int = 0) -> Var:
    vs = [_wrap(v) for v in vs]
    if not vs:
        raise ShapeError("concat of empty list")
    try:
        out = np.concatenate([v.value for v in vs], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [v.value.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def back(g, vs=vs, splits=splits, axis=axis):
        for v, piece in zip(vs, np.split(g, splits, axis=axis)):
            _accum(v, piece)

    return _node(out, tuple(vs), back, "concat")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def reduce_sum(a: Var, axis=None) -> Var:
    out = a.value.sum(axis=axis)

    def back(g, a=a, axis=axis):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return _node(out, (a,), back, "sum")


def reduce_mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    out = a.value.mean(axis=axis)

    def back(g, a=a, axis=axis, n=n):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.value.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.value.shape).copy())

    return _node(out, (a,), back, "mean")


def matmul(a: Var, b: Var) -> Var:
    b = _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def back(g, a=a, b=b):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _node(out, (a, b), back, "matmul")


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """w[out,in] @ x[in] (+ b[out]) for 1-D x."""
    if x.value.ndim != 1:
        raise ShapeError("linear expects a flat input vector")
    y = reshape(matmul(w, reshape(x, (x.value.size, 1))), (w.value.shape[0],))
    return add(y, b) if b is not None else y


def solve(a: Var, b: Var) -> Var:
    """x with a @ x == b for square a and b of shape (n, 1).

    Backward: gb = a^-T g, ga = -gb x^T (standard linear-solve adjoint).
    """
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeError("solve expects a square matrix")
    if b.value.shape != (a.value.shape[0], 1):
        raise ShapeError("solve expects b of shape (n, 1)")
    x = np.linalg.solve(a.value, b.value)

    def back(g, a=a, b=b, x=x):
        gb = np.linalg.solve(a.value.T, g)
        _accum(b, gb)
        _accum(a, -gb @ x.T)

    return _node(x, (a, b), back, "solve")


# ---------------------------------------------------------------------------
# spatial kernels (single image, channel-first)


def conv2d(x: Var, w: Var, b: Var | None, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation of x[c_in,h,w] with w[c_out,c_in,kh,kw].

    Lowered to one matmul over an im2col view; the backward pass reuses
    the column matrix for the weight gradient and scatters columns back
    for the input gradient.
    """
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeError("conv2d expects x[c,h,w] and w[co,ci,kh,kw]")
    c_in, h, wd = x.value.shape
    c_out, c_in_w, kh, kw = w.value.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d: input channels {c_in} != weight channels {c_in_w}")
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, wd + 2 * p
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // s + 1
    ow = (wp - kw) // s + 1

    xp = x.value if p == 0 else np.pad(x.value, ((0, 0), (p, p), (p, p)))
    sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c_in, kh, kw, oh, ow), strides=(sc, sh, sw, sh * s, sw * s))
    cols = np.ascontiguousarray(view.reshape(c_in * kh * kw, -1))

    w2 = w.value.reshape(c_out, -1)
    out = w2 @ cols
    if b is not None:
        if b.value.shape != (c_out,):
            raise ShapeError("conv2d: bias must be (c_out,)")
        out = out + b.value[:, None]
    out = out.reshape(c_out, oh, ow)

    def back(g, x=x, w=w, b=b, cols=cols, w2=w2,
             dims=(c_in, h, wd, kh, kw, s, p, oh, ow)):
        c_in, h, wd, kh, kw, s, p, oh, ow = dims
        g2 = g.reshape(g.shape[0], -1)
        _accum(w, (g2 @ cols.T).reshape(w.value.shape))
        if b is not None:
            _accum(b, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c_in, kh, kw, oh, ow)
            gxp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * oh:s, j:j + s * ow:s] += gcols[:, i, j]
            _accum(x, gxp[:, p:p + h, p:p + wd] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back, "conv2d")


def maxpool2d(x: Var, window: int = 2, stride: int = 2) -> Var:
    """2x2/stride-2 max pooling; odd extents are padded bottom/right with
    -inf.  Gradient goes to the window argmax only, ties to the first
    element in row-major window order."""
    if window != 2 or stride != 2:
        raise ShapeError("maxpool2d supports window=2, stride=2 only")
    if x.value.ndim != 3 or x.value.size == 0:
        raise ShapeError("maxpool2d expects a nonempty x[c,h,w]")
    c, h, w = x.value.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    xp = x.value
    if h % 2 or w % 2:
        xp = np.pad(x.value, ((0, 0), (0, oh * 2 - h), (0, ow * 2 - w)),
                    constant_values=-np.inf)
    win = xp.reshape(c, oh, 2, ow, 2).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, 4)
    arg = win.argmax(axis=3)  # first occurrence wins: row-major tie rule
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def back(g, x=x, arg=arg, dims=(c, h, w, oh, ow)):
        c, h, w, oh, ow = dims
        rows = 2 * np.arange(oh)[None, :, None] + arg // 2
        cols = 2 * np.arange(ow)[None, None, :] + arg % 2
        gxp = np.zeros((c, oh * 2, ow * 2))
        gxp[np.arange(c)[:, None, None], rows, cols] = g
        _accum(x, gxp[:, :h, :w] if (h % 2 or w % 2) else gxp)

    return _node(np.ascontiguousarray(out), (x,), back, "maxpool2d")


def pad_bottom_right(x: Var, target_h: int, target_w: int) -> Var:
    """Zero-pad x[c,h,w] on the bottom/right up to the target extents."""
    if x.value.ndim != 3:
        raise ShapeError("pad_bottom_right expects x[c,h,w]")
    c, h, w = x.value.shape
    if target_h < h or target_w < w:
        raise ShapeError(f"pad target ({target_h},{target_w}) smaller than input ({h},{w})")
    if (target_h, target_w) == (h, w):
        return x
    out = np.zeros((c, target_h, target_w))
    out[:, :h, :w] = x.value

    def back(g, x=x, h=h, w=w):
        _accum(x, np.ascontiguousarray(g[:, :h, :w]))

    return _node(out, (x,), back, "pad")


def pad_concat(xs, target_h: int, target_w: int) -> Var:
    """Pad each map to (target_h, target_w) then stack along channels."""
    return concat([pad_bottom_right(x, target_h, target_w) for x in xs], axis=0)


def grid_sample(img: Var, grid: Var) -> Var:
    """Bilinear sampling of img[c,h,w] at grid[h',w',2] absolute (x, y)
    pixel coordinates; out-of-bounds neighbours contribute zero.

    Differentiable in both arguments.  The grid gradient is undefined on
    the measure-zero set of integer coordinates (floor kinks); the
    sub-gradient of the right-continuous branch is used there.
    """
    if grid.value.ndim != 3 or grid.value.shape[-1] != 2:
        raise ShapeError("grid must have shape (h', w', 2)")
    c, h, w = img.value.shape
    gh, gw, _ = grid.value.shape
    gx = grid.value[..., 0].ravel()
    gy = grid.value[..., 1].ravel()
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0

    flat = img.value.reshape(c, -1)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            val = flat[:, idx] * valid  # (c, n)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            corners.append((val, wgt, idx, valid))
    out = np.zeros((c, gx.size))
    for val, wgt, _, _ in corners:
        out += val * wgt
    out = out.reshape(c, gh, gw)

    def back(g, img=img, grid=grid, corners=corners,
             fx=fx, fy=fy, dims=(c, h, w, gh, gw)):
        c, h, w, gh, gw = dims
        g2 = g.reshape(c, -1)
        if img.requires_grad:
            gimg = np.zeros((c, h * w))
            for val, wgt, idx, valid in corners:
                contrib = g2 * (wgt * valid)
                np.add.at(gimg.T, idx[valid], contrib[:, valid].T)
            _accum(img, gimg.reshape(c, h, w))
        if grid.requires_grad:
            (v00, _, _, _), (v01, _, _, _), (v10, _, _, _), (v11, _, _, _) = corners
            dgx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * g2
            dgy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * g2
            gg = np.stack([dgx.sum(axis=0), dgy.sum(axis=0)], axis=-1)
            _accum(grid, gg.reshape(gh, gw, 2))

    return _node(out, (img, grid), back, "grid_sample")
