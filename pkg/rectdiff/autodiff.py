"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations used by the denoiser, the rectifier, the attribute probe
and the training losses are implemented. Broadcasting is explicit: elementwise
ops accept equal shapes or a Python scalar, and ``expand`` is the one op that
broadcasts.

Gradient semantics: ``backward`` *accumulates* into ``leaf.grad``. Call
``zero_grad`` on the parameter list before every optimizer step.
"""
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import AutodiffError, ShapeError

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A float64 array that can take part in gradient taping."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return add(neg(self), other)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    # no tape for pure inference
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


class Tape:
    """Ordered record of the taped operations reachable from a root tensor.

    ``nodes`` is a topological order (inputs before outputs); replaying it in
    reverse visits every operation exactly once.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def operations(self) -> List[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        upstream: Dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                upstream[key] = upstream[key] + pg if key in upstream else pg


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor that requires grad")
    Tape.record(loss).replay(loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError.mismatch(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_same("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),), "relu")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array that broadcasts into ``a``'s shape."""
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError.mismatch("mul_const", a.shape, c.shape)
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x·σ(x)."""
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


nonlinearity = silu


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError.mismatch("reshape", a.shape, shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules); backward sums the copies."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError.mismatch("expand", a.shape, shape)
    lead = len(shape) - a.data.ndim

    def _bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)
    return _result(out, (a,), _bw, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError.mismatch("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis < 0:
        raise ShapeError("stack: axis must be non-negative")
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over equal leading dims."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError.mismatch("matmul", a.shape, b.shape)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb
    return _result(np.matmul(a.data, b.data), (a, b), _bw, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` (C,) along axis 1 of ``x``."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError.mismatch("add_bias", x.shape, b.shape)
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (B, in) @ w (in, out) [+ b (out,)]."""
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# convolution and U-Net blocks
# ---------------------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(B, C * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    B, C = padded_shape[:2]
    cols = cols.reshape(B, C, kh, kw, ho, wo)
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,kh,kw).

    ``w`` may also carry a leading batch axis (B,Cout,Cin,kh,kw): each sample
    is then convolved with its own kernel. Shared kernels are broadcast to the
    batched layout so both forms run the same per-sample products.
    """
    if x.data.ndim != 4 or w.data.ndim not in (4, 5):
        raise ShapeError.mismatch("conv2d", x.shape, w.shape)
    per_sample = w.data.ndim == 5
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape[-4:]
    if wcin != cin or (per_sample and w.shape[0] != B):
        raise ShapeError.mismatch("conv2d", x.shape, w.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    ho, wo = _conv_out(H, kh, stride, pad), _conv_out(W, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {(kh, kw)} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    k = cin * kh * kw
    w2 = w.data.reshape((B, cout, k) if per_sample else (cout, k))
    wb = np.ascontiguousarray(w2 if per_sample else np.broadcast_to(w2, (B, cout, k)))
    out = np.matmul(wb, cols).reshape(B, cout, ho, wo)

    def _bw(g):
        g2 = g.reshape(B, cout, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1))
            gw = (gw if per_sample else gw.sum(axis=0)).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wb.transpose(0, 2, 1), g2)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw
    return _result(out, (x, w), _bw, "conv2d")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization without the affine part."""
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    xr = x.data.reshape(B, groups, -1)
    n = xr.shape[-1]
    mu = xr.mean(axis=-1, keepdims=True)
    centered = xr - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _bw(g):
        gr = g.reshape(B, groups, n)
        gsum = gr.sum(axis=-1, keepdims=True)
        gxsum = (gr * xhat).sum(axis=-1, keepdims=True)
        gx = inv_std / n * (n * gr - gsum - xhat * gxsum)
        return (gx.reshape(x.shape),)
    return _result(xhat.reshape(x.shape), (x,), _bw, "group_norm")


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    scale_map = expand(reshape(gamma, (1, -1) + (1,) * (x.data.ndim - 2)), x.shape)
    return add_bias(mul(x, scale_map), beta)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),),
                   "upsample_nearest")


def downsample_avg(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"downsample_avg: extents {(H, W)} not divisible by {factor}")
    out = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def _bw(g):
        return (g.repeat(factor, axis=2).repeat(factor, axis=3) / (factor * factor),)
    return _result(out, (x,), _bw, "downsample_avg")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``leaf.data``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
