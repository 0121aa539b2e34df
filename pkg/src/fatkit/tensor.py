"""Dense tensors with reverse-mode differentiation.

A small numpy-backed autograd engine: every operation records its parents
and a backward rule, `Tensor.backward()` walks the graph once in reverse
topological order and accumulates gradients into the leaves. Data is kept
in float64 so the finite-difference test suite can run at tight tolerances.

Also houses the Adam optimizer and the binary checkpoint format shared by
all trained models.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "ParameterError",
    "FormatError",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "relu",
    "tanh",
    "softplus",
    "softmax",
    "instance_norm",
    "conv2d",
    "deconv2d",
    "avg_pool2d",
    "grid_sample",
    "bilinear_sample",
    "tensor_sum",
    "tensor_mean",
    "l1_loss",
    "mse_loss",
    "xlogx",
    "pairwise_sqdist",
    "linear_solve",
    "AdamState",
    "adam_step",
    "zero_grads",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """An operation argument is outside its documented domain."""


class GraphError(RuntimeError):
    """The autograd graph contract was violated (e.g. non-scalar backward)."""


class FormatError(ValueError):
    """A serialized file does not match its documented byte layout."""


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    Tensors are immutable after creation apart from `grad` (and in-place
    optimizer updates on leaves). Interior nodes of a computation carry the
    closures needed for the backward pass; calling `backward()` on a scalar
    result accumulates d(result)/d(leaf) into every `requires_grad` leaf.
    Repeated backward calls accumulate; `zero_grad()` resets.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # -- graph management ---------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, no graph: gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate leaf gradients of d(self)/d(leaf).

        `self` must hold a single element. Each graph node is visited exactly
        once, in reverse topological order; gradients reaching a leaf add into
        its `grad` buffer, so consecutive calls accumulate.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
        topo = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pg if held is None else held + pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return _add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return _add(-self, other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("division only supports float divisors")
        return _mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = self.data[key]

        def back(g, key=key, shape=self.data.shape):
            buf = np.zeros(shape)
            buf[key] += g
            return (buf,)

        return _from_op(np.array(out, copy=True), (self,), back, "getitem")

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _toposort(root: Tensor):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- elementwise and reductions --------------------------------------------


def _add(a: Tensor, other) -> Tensor:
    if not isinstance(other, Tensor):
        s = float(other)
        return _from_op(a.data + s, (a,), lambda g: (g,), "adds")
    if a.shape != other.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} and {other.shape}")
    return _from_op(a.data + other.data, (a, other), lambda g: (g, g), "add")


def _mul(a: Tensor, other) -> Tensor:
    if not isinstance(other, Tensor):
        s = float(other)
        return _from_op(a.data * s, (a,), lambda g: (g * s,), "scale")
    if a.shape != other.shape:
        raise ShapeError(f"mul needs matching shapes, got {a.shape} and {other.shape}")
    ad, bd = a.data, other.data
    return _from_op(ad * bd, (a, other), lambda g: (g * bd, g * ad), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-safe form."""
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _from_op(y, (x,), lambda g: (g * sig,), "softplus")


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*log(x) with the continuous extension 0 at x=0.

    Gradient is defined as 0 where x vanishes, matching the limit that
    arises when x is a squared distance of a point to itself.
    """
    d = x.data
    pos = d > 1e-300
    safe = np.where(pos, d, 1.0)
    y = np.where(pos, safe * np.log(safe), 0.0)

    def back(g):
        return (g * np.where(pos, np.log(safe) + 1.0, 0.0),)

    return _from_op(y, (x,), back, "xlogx")


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _from_op(y, (x,), back, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 needs matching shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    y = np.mean(np.abs(diff))
    sgn = np.sign(diff) / diff.size

    def back(g):
        return (g * sgn, -g * sgn)

    return _from_op(y, (a, b), back, "l1")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference; scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse needs matching shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    y = np.mean(diff * diff)
    coeff = 2.0 * diff / diff.size

    def back(g):
        return (g * coeff, -g * coeff)

    return _from_op(y, (a, b), back, "mse")


# -- shape plumbing ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts, axis=0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(data, tuple(parts), back, "concat")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, plain (M,K)@(K,N) or batched (B,M,K)@(B,K,N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs 2D or 3D pairs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _from_op(ad @ bd, (a, b), back, "matmul")


def linear_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve a @ x = b for x; differentiable w.r.t. both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve needs (n,n) and (n,m), got {a.shape} and {b.shape}")
    x = np.linalg.solve(a.data, b.data)
    at = a.data.T

    def back(g):
        gb = np.linalg.solve(at, g)
        return (-gb @ x.T, gb)

    return _from_op(x, (a, b), back, "solve")


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between row sets: out[i,j] = |a_i - b_j|^2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist needs matching row widths, got {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    y = np.einsum("ijk,ijk->ij", diff, diff)

    def back(g):
        ga = 2.0 * np.einsum("ij,ijk->ik", g, diff)
        gb = -2.0 * np.einsum("ij,ijk->jk", g, diff)
        return (ga, gb)

    return _from_op(y, (a, b), back, "sqdist")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along `axis` sum to 1."""
    y = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=axis, keepdims=True)

    def back(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _from_op(y, (x,), back, "softmax")


# -- spatial operators -------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int):
    """(C,H,W) -> rows of receptive fields, one row per output position."""
    c, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    _, ho, wo, _, _ = win.shape
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, xshape, k: int, stride: int) -> np.ndarray:
    """Adjoint of `_im2col`: scatter receptive-field rows back onto the image."""
    c, h, w = xshape
    pad = (k - 1) // 2
    ho = -(-h // stride)
    wo = -(-w // stride)
    blocks = cols.reshape(ho, wo, c, k, k)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            xp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                blocks[:, :, :, di, dj].transpose(2, 0, 1)
            )
    return xp[:, pad : pad + h, pad : pad + w]


def _check_conv_args(x, w, b, stride):
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if x.ndim != 3 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv expects (C,H,W), (O,I,k,k), (O,), got {x.shape}, {w.shape}, {b.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ParameterError(f"kernel must be square with odd extent, got {w.shape[2:]}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with same padding; output is ceil(H/stride) per side.

    x: (C_in,H,W), w: (C_out,C_in,k,k), b: (C_out,).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_conv_args(x.data, w.data, b.data, stride)
    co, ci, k, _ = w.shape
    if x.shape[0] != ci or b.shape[0] != co:
        raise ShapeError(f"conv channels disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(f"input {x.shape[1:]} smaller than kernel {k}")
    cols, ho, wo = _im2col(x.data, k, stride)
    wmat = w.data.reshape(co, ci * k * k)
    out = (wmat @ cols.T + b.data[:, None]).reshape(co, ho, wo)
    xshape = x.shape

    def back(g):
        gmat = g.reshape(co, ho * wo)
        gw = (gmat @ cols).reshape(w.shape)
        gb = gmat.sum(axis=1)
        gx = _col2im(gmat.T @ wmat, xshape, k, stride)
        return (gx, gw, gb)

    return _from_op(out, (x, w, b), back, "conv2d")


def deconv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: the adjoint of `conv2d` under the shared kernel.

    x: (C_a,h,w), w: (C_a,C_b,k,k), b: (C_b,); output (C_b, stride*h, stride*w),
    so <conv2d(u; w), x> == <u, deconv2d(x; w)> holds exactly (bias aside).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_conv_args(x.data, w.data, b.data, stride)
    if stride not in (1, 2):
        raise ParameterError(f"deconv stride must be 1 or 2, got {stride}")
    ca, cb, k, _ = w.shape
    if x.shape[0] != ca or b.shape[0] != cb:
        raise ShapeError(f"deconv channels disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    h, wid = x.shape[1], x.shape[2]
    oshape = (cb, stride * h, stride * wid)
    wmat = w.data.reshape(ca, cb * k * k)
    xmat = x.data.reshape(ca, h * wid).T
    out = _col2im(xmat @ wmat, oshape, k, stride) + b.data[:, None, None]

    def back(g):
        gcols, _, _ = _im2col(g, k, stride)
        gx = (wmat @ gcols.T).reshape(x.shape)
        gw = (xmat.T @ gcols).reshape(w.shape)
        gb = g.sum(axis=(1, 2))
        return (gx, gw, gb)

    return _from_op(out, (x, w, b), back, "deconv2d")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per channel over the spatial extent."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects (C,H,W), got {x.shape}")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def back(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gym = (g * y).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _from_op(y, (x,), back, "instance_norm")


def avg_pool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping stride x stride mean pooling; extents must divide."""
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"pool stride {stride} must divide spatial extents {h}x{w}")
    ho, wo = h // stride, w // stride
    y = x.data.reshape(c, ho, stride, wo, stride).mean(axis=(2, 4))
    inv = 1.0 / (stride * stride)

    def back(g):
        up = np.repeat(np.repeat(g, stride, axis=1), stride, axis=2)
        return (up * inv,)

    return _from_op(y, (x,), back, "avg_pool")


def _sample_coords(grid: np.ndarray, h: int, w: int):
    """Normalized [-1,1] grid coordinates -> fractional pixel indices."""
    px = (grid[..., 0] + 1.0) * (w / 2.0) - 0.5
    py = (grid[..., 1] + 1.0) * (h / 2.0) - 0.5
    return px, py


def bilinear_sample(image: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Plain-array bilinear lookup with border clamping.

    image: (C,H,W); grid: (h',w',2) with (x,y) in [-1,1] addressing pixel
    centers. The differentiable `grid_sample` routes through this kernel, so
    both paths agree bit for bit.
    """
    c, h, w = image.shape
    px, py = _sample_coords(grid, h, w)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    v00 = image[:, y0i, x0i]
    v01 = image[:, y0i, x1i]
    v10 = image[:, y1i, x0i]
    v11 = image[:, y1i, x1i]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of (C,H,W) at an (h',w',2) normalized grid.

    Out-of-range coordinates clamp to the border. Differentiable in both the
    image and the grid; where both interpolation neighbours clamp to the same
    border pixel the grid gradient is exactly zero.
    """
    x, grid = _as_tensor(x), _as_tensor(grid)
    if x.ndim != 3 or grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects (C,H,W) and (h,w,2), got {x.shape}, {grid.shape}")
    c, h, w = x.shape
    px, py = _sample_coords(grid.data, h, w)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    img = x.data
    v00 = img[:, y0i, x0i]
    v01 = img[:, y0i, x1i]
    v10 = img[:, y1i, x0i]
    v11 = img[:, y1i, x1i]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy

    def back(g):
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        gx = np.zeros_like(img)
        ch = np.arange(c)[:, None, None]
        np.add.at(gx, (ch, y0i[None], x0i[None]), g * w00[None])
        np.add.at(gx, (ch, y0i[None], x1i[None]), g * w01[None])
        np.add.at(gx, (ch, y1i[None], x0i[None]), g * w10[None])
        np.add.at(gx, (ch, y1i[None], x1i[None]), g * w11[None])
        dpx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * g
        dpy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * g
        ggrid = np.empty(grid.shape)
        ggrid[..., 0] = dpx.sum(axis=0) * (w / 2.0)
        ggrid[..., 1] = dpy.sum(axis=0) * (h / 2.0)
        return (gx, ggrid)

    return _from_op(out, (x, grid), back, "grid_sample")


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus step counter for a parameter list."""

    def __init__(self, params, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, lr: float):
    """One bias-corrected Adam update; parameters without grads stay put."""
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g is None:
            g = 0.0
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params):
    for p in params:
        p.grad = None


# -- checkpoint format ---------------------------------------------------------

_MAGIC = b"FATW"
_VERSION = 1


def save_tensors(path, named: dict):
    """Write name->tensor pairs in the binary checkpoint layout.

    Layout: magic "FATW", version u16, count u32, then per tensor
    name-length u16 + UTF-8 name, rank u8, dims u32 little-endian,
    data as float32 little-endian. Round trips bit-exactly.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(named)))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict:
    """Read a checkpoint back as name -> float32 array, preserving order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic at byte 0: {blob[:4]!r}")
    if len(blob) < 10:
        raise FormatError(f"truncated checkpoint header at byte {len(blob)}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    offset = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise FormatError(f"malformed checkpoint record at byte {offset}: {exc}") from exc
    if offset != len(blob):
        raise FormatError(f"trailing bytes after checkpoint payload at byte {offset}")
    return out
