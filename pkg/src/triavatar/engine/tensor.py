"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately small: matmul, 3x3 convolution (via unfold/fold),
bilinear resampling, element-wise arithmetic and activations, reductions,
cumulative sums, and the gather/scatter primitives the tri-plane sampler and
the ray compositor need. Everything else in the project is composed from
these.

Gradient rules are written in terms of tensor ops. During a normal
``backward`` call the rules run with graph recording disabled, so they cost
plain numpy. With ``create_graph=True`` the produced gradients are themselves
graph nodes and can be differentiated again; this is supported exactly for
the ops the discriminator uses (the R1 penalty needs one
grad-of-grad pass) and refused with an explicit error elsewhere.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "astensor",
    "no_grad",
    "is_grad_enabled",
    "set_finite_checks",
    "backward",
    "add",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "flip",
    "broadcast_to",
    "concat",
    "relu",
    "leaky_relu",
    "softplus",
    "sigmoid",
    "exp",
    "tsum",
    "tmean",
    "cumsum",
    "unfold",
    "fold",
    "conv2d",
    "upsample2x",
    "bilerp2d",
    "take",
    "scatter_rows",
]

_grad_enabled = True
_finite_checks = False


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Validate every op output for NaN/Inf (slow; used by tests)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(data: np.ndarray, where: str) -> None:
    if _finite_checks and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_graph_ok", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.grad: Optional[Tensor] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None
        self._graph_ok = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, astensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(astensor(other)))

    def __rsub__(self, other):
        return add(astensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, astensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, astensor(other))

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, astensor(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable,
    op: str,
    graph_ok: bool = True,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._graph_ok = graph_ok
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._graph_ok = True
    return out


def _sum_to_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reverse numpy broadcasting: reduce g down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, need):
        ga = _sum_to_shape(g, a.shape) if need[0] else None
        gb = _sum_to_shape(g, b.shape) if need[1] else None
        return ga, gb

    return _from_op(a.data + b.data, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    def vjp(g, need):
        return (mul(g, astensor(-1.0)),)

    return _from_op(-a.data, (a,), vjp, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, need):
        ga = _sum_to_shape(mul(g, b), a.shape) if need[0] else None
        gb = _sum_to_shape(mul(g, a), b.shape) if need[1] else None
        return ga, gb

    return _from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, need):
        ga = _sum_to_shape(div(g, b), a.shape) if need[0] else None
        gb = None
        if need[1]:
            gb = _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _from_op(a.data / b.data, (a, b), vjp, "div")


def power(a: Tensor, p: float) -> Tensor:
    # exponent is a constant, not a differentiable input
    p = float(p)

    def vjp(g, need):
        base = Tensor(a.data ** (p - 1.0))
        return (mul(g, mul(astensor(p), base)),)

    return _from_op(a.data ** p, (a,), vjp, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def vjp(g, need):
        ga = matmul(g, transpose(b, (1, 0))) if need[0] else None
        gb = matmul(transpose(a, (1, 0)), g) if need[1] else None
        return ga, gb

    return _from_op(a.data @ b.data, (a, b), vjp, "matmul")


# -- shape ops ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def vjp(g, need):
        return (reshape(g, old),)

    return _from_op(np.reshape(a.data, shape), (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inv),)

    return _from_op(np.transpose(a.data, axes), (a,), vjp, "transpose")


def flip(a: Tensor, axis: int) -> Tensor:
    def vjp(g, need):
        return (flip(g, axis),)

    return _from_op(np.flip(a.data, axis).copy(), (a,), vjp, "flip")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def vjp(g, need):
        return (_sum_to_shape(g, old),)

    return _from_op(np.broadcast_to(a.data, shape).copy(), (a,), vjp, "broadcast_to")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, need):
        outs = []
        for i, p in enumerate(parts):
            if not need[i]:
                outs.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(getitem(g, tuple(key)))
        return tuple(outs)

    return _from_op(np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat", graph_ok=False)


def getitem(a: Tensor, key) -> Tensor:
    def vjp(g, need):
        buf = np.zeros(a.shape)
        buf[key] = g.data
        return (Tensor(buf),)

    return _from_op(a.data[key].copy() if isinstance(a.data[key], np.ndarray) else np.asarray(a.data[key]), (a,), vjp, "getitem", graph_ok=False)


# -- activations --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)

    def vjp(g, need):
        return (mul(g, Tensor(mask)),)

    return _from_op(a.data * mask, (a,), vjp, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope)

    def vjp(g, need):
        return (mul(g, Tensor(mask)),)

    return _from_op(a.data * mask, (a,), vjp, "leaky_relu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def vjp(g, need):
        s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
        return (mul(g, Tensor(s)),)

    return _from_op(out, (a,), vjp, "softplus")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out_t = Tensor(out)

    def vjp(g, need):
        return (mul(g, Tensor(out * (1.0 - out))),)

    return _from_op(out, (a,), vjp, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    saved = Tensor(out)

    def vjp(g, need):
        return (mul(g, saved),)

    return _from_op(out, (a,), vjp, "exp")


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g, need):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _from_op(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis % a.ndim]
    else:
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), astensor(1.0 / n))


def cumsum(a: Tensor, axis: int) -> Tensor:
    def vjp(g, need):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _from_op(np.cumsum(a.data, axis=axis), (a,), vjp, "cumsum")


# -- convolution primitives ---------------------------------------------


def _unfold_np(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, k, k]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.transpose(win, (0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def _fold_np(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    g6 = cols.reshape(n, c, k, k, ho, wo)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            buf[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += g6[:, :, ky, kx]
    return buf[:, :, pad : pad + h, pad : pad + w]


def unfold(x: Tensor, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """im2col: [N,C,H,W] -> [N, C*k*k, Ho*Wo]."""
    shape = x.shape

    def vjp(g, need):
        return (fold(g, shape, k=k, stride=stride, pad=pad),)

    return _from_op(_unfold_np(x.data, k, stride, pad), (x,), vjp, "unfold")


def fold(cols: Tensor, x_shape, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """Adjoint of unfold: scatter-add patch columns back to [N,C,H,W]."""
    x_shape = tuple(x_shape)

    def vjp(g, need):
        return (unfold(g, k=k, stride=stride, pad=pad),)

    return _from_op(_fold_np(cols.data, x_shape, k, stride, pad), (cols,), vjp, "fold")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 convolution, stride 1 or 2, composed from unfold + matmul."""
    n, c, h, w_in = x.shape
    kk, ck, k1, k2 = w.shape
    if ck != c or k1 != k2:
        raise ValueError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * pad - k1) // stride + 1
    wo = (w_in + 2 * pad - k1) // stride + 1
    cols = unfold(x, k=k1, stride=stride, pad=pad)  # [N, C*k*k, L]
    cols2 = reshape(transpose(cols, (1, 0, 2)), (c * k1 * k2, n * ho * wo))
    w2 = reshape(w, (kk, c * k1 * k2))
    out = matmul(w2, cols2)  # [K, N*L]
    out = transpose(reshape(out, (kk, n, ho * wo)), (1, 0, 2))
    out = reshape(out, (n, kk, ho, wo))
    if b is not None:
        out = add(out, reshape(b, (1, kk, 1, 1)))
    return out


# -- resampling / gather ------------------------------------------------


def take(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Integer gather along one axis; scatter-add adjoint."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g, need):
        gm = np.moveaxis(g.data, axis, 0)
        buf = np.zeros((x.shape[axis],) + gm.shape[1:])
        np.add.at(buf, idx, gm)
        return (Tensor(np.moveaxis(buf, 0, axis)),)

    return _from_op(np.take(x.data, idx, axis=axis), (x,), vjp, "take", graph_ok=False)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of [N,C,H,W] with half-pixel alignment."""
    out = x
    for axis in (2, 3):
        n_in = out.shape[axis]
        coords = (np.arange(2 * n_in) + 0.5) / 2.0 - 0.5
        i0 = np.clip(np.floor(coords), 0, n_in - 1).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = np.clip(coords - i0, 0.0, 1.0)
        fshape = [1, 1, 1, 1]
        fshape[axis] = 2 * n_in
        ft = Tensor(f.reshape(fshape))
        out = add(mul(take(out, i0, axis), add(astensor(1.0), neg(ft))), mul(take(out, i1, axis), ft))
    return out


def bilerp2d(grid: Tensor, uv, batch_idx: Optional[np.ndarray] = None) -> Tensor:
    """Bilinear lookup on a batch of feature grids.

    grid: [B, C, P, P]; uv: [M, 2] continuous texel coordinates (uv[:, 0]
    indexes the last axis, uv[:, 1] the second-to-last; the center of texel
    (0,0) is at coordinate (0,0)); batch_idx: [M] grid index per point
    (defaults to grid 0). Out-of-range coordinates clamp to the edge.
    Returns [M, C]; differentiable in the grid and, away from texel
    boundaries and clamps, in uv.
    """
    b, c, p, pw = grid.shape
    uv_is_tensor = isinstance(uv, Tensor)
    uv_arr = uv.data if uv_is_tensor else np.asarray(uv, dtype=np.float64)
    m = uv_arr.shape[0]
    if batch_idx is None:
        bidx = np.zeros(m, dtype=np.int64)
    else:
        bidx = np.asarray(batch_idx, dtype=np.int64)

    u = np.clip(uv_arr[:, 0], 0.0, pw - 1.0)
    v = np.clip(uv_arr[:, 1], 0.0, p - 1.0)
    x0 = np.clip(np.floor(u), 0, pw - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, p - 2).astype(np.int64)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]

    flat_idx = y0 * pw + x0  # [M]
    # channels-last layout keeps each gathered row contiguous
    flat = np.ascontiguousarray(np.transpose(grid.data.reshape(b, c, p * pw), (0, 2, 1)))

    def gather(offset):
        return flat[bidx, flat_idx + offset]  # [M, C]

    g00, g10, g01, g11 = gather(0), gather(1), gather(pw), gather(pw + 1)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    out_data = g00 * w00 + g10 * w10 + g01 * w01 + g11 * w11

    parents = [grid]
    if uv_is_tensor:
        parents.append(uv)

    def vjp(g, need):
        gd = g.data  # [M, C]
        grads = []
        if need[0]:
            buf = np.zeros(b * p * pw * c)
            base = (bidx * (p * pw)) * c  # [M]
            for offset, wgt in ((0, w00), (1, w10), (pw, w01), (pw + 1, w11)):
                idx = (base + (flat_idx + offset) * c)[:, None] + np.arange(c)[None, :]
                buf += np.bincount(idx.ravel(), weights=(gd * wgt).ravel(), minlength=buf.size)
            grads.append(Tensor(np.transpose(buf.reshape(b, p * pw, c), (0, 2, 1)).reshape(grid.shape)))
        else:
            grads.append(None)
        if uv_is_tensor:
            if need[1]:
                dval_du = (g10 - g00) * (1 - fy) + (g11 - g01) * fy
                dval_dv = (g01 - g00) * (1 - fx) + (g11 - g10) * fx
                du = (gd * dval_du).sum(axis=1)
                dv = (gd * dval_dv).sum(axis=1)
                interior_u = (uv_arr[:, 0] > 0.0) & (uv_arr[:, 0] < pw - 1.0)
                interior_v = (uv_arr[:, 1] > 0.0) & (uv_arr[:, 1] < p - 1.0)
                guv = np.stack([du * interior_u, dv * interior_v], axis=-1)
                grads.append(Tensor(guv))
            else:
                grads.append(None)
        return tuple(grads)

    return _from_op(out_data, parents, vjp, "bilerp2d", graph_ok=False)


def scatter_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Overwrite base[idx] with values; idx rows must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    out[idx] = values.data

    def vjp(g, need):
        gb = None
        if need[0]:
            keep = g.data.copy()
            keep[idx] = 0.0
            gb = Tensor(keep)
        gv = Tensor(g.data[idx].copy()) if need[1] else None
        return gb, gv

    return _from_op(out, (base, values), vjp, "scatter_rows", graph_ok=False)


# -- backward -----------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class Grads:
    """Gradient table returned by backward, keyed by tensor identity."""

    def __init__(self, table: dict[int, Tensor]):
        self._table = table

    def get(self, t: Tensor) -> Optional[Tensor]:
        return self._table.get(id(t))

    def __getitem__(self, t: Tensor) -> Tensor:
        """Gradient of the output w.r.t. t; zeros if t never reached the output."""
        g = self._table.get(id(t))
        if g is None:
            return Tensor(np.zeros(t.shape))
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


def backward(output: Tensor, create_graph: bool = False) -> Grads:
    """Reverse-mode sweep from a scalar output.

    Returns the gradients of every reached leaf with requires_grad; query the
    result with the leaf tensors themselves (unreached parameters read as
    zeros). The graph is not mutated and stays reusable. With
    ``create_graph=True`` the sweep records onto the tape so the returned
    gradients can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not require grad (no parameters reached it)")

    order = _toposort(output)
    pending: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
    leaves: dict[int, Tensor] = {}

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                leaves[id(node)] = g
                continue
            if create_graph and not node._graph_ok:
                raise RuntimeError(
                    "create_graph backward hit a first-order-only op; "
                    "double backward is supported for the discriminator op subset only"
                )
            need = tuple(p.requires_grad for p in node._parents)
            parent_grads = node._vjp(g, need)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                if prev is None:
                    pending[id(parent)] = pg
                elif create_graph:
                    pending[id(parent)] = add(prev, pg)
                else:
                    pending[id(parent)] = Tensor(prev.data + pg.data)

    return Grads(leaves)
