"""Dense numpy-backed tensors with a small reverse-mode tape.

Every op builds a new :class:`Tensor` that remembers its parents and a
backward rule. ``Tensor.backward`` replays the rules in reverse
topological order, which is the tape for that graph.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision inside the block (gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_elementwise(self, other)
        return mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul")


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul_elementwise")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def l2_normalize_rows(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each row by ``max(norm, epsilon)``."""
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"l2_normalize_rows expects a non-empty matrix, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    clipped = norms > epsilon
    denom = np.where(clipped, norms, epsilon).astype(x.dtype)
    y = x.data / denom

    def backward(g):
        # below epsilon the denominator is a constant
        radial = np.sum(y * g, axis=1, keepdims=True)
        return (np.where(clipped, g - y * radial, g) / denom,)

    return _result(y, (x,), backward, "l2_normalize_rows")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer ``x @ weight + bias`` with weight of shape (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), backward, "affine")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean")


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing with a scatter-back backward rule."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), backward, "take")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 0."""
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise DimensionError(f"concat_rows: trailing shapes {p.shape[1:]} and {tail} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward, "concat_rows")


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)"""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.

    Ties go to the first element in row-major scan order of each window.
    """
    if x.ndim != 4:
        raise DimensionError(f"max_pool2x2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2x2: input {x.shape} too small")
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))  # scan order inside a window
    taps = [x.data[:, :, dy:2 * ho:2, dx:2 * wo:2] for dy, dx in offsets]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))

    def backward(g):
        full = np.zeros_like(x.data)
        free = np.ones(out.shape, dtype=bool)
        for (dy, dx), tap in zip(offsets, taps):
            hit = (tap == out) & free
            free &= ~hit
            full[:, :, dy:2 * ho:2, dx:2 * wo:2] = g * hit
        return (full,)

    return _result(out, (x,), backward, "max_pool2x2")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded NCHW input -> (c * kh * kw, n * ho * wo) patch matrix, rows ordered (c, kh, kw)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = window.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (f, c, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and FCHW kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernel has {kc} input channels, input has {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    patches = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = wmat @ patches
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def input_grad(g: np.ndarray) -> np.ndarray:
        if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
            # full correlation of g with the flipped, channel-swapped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * kh * kw)
            gx = flipped @ _im2col(gp, kh, kw, 1, h, w)
            return np.ascontiguousarray(gx.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        gpatch = (wmat.T @ g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gpatch[:, i, j].transpose(1, 0, 2, 3)
        return gxp[:, :, padding:padding + h, padding:padding + w]

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gx = input_grad(g) if x.requires_grad else None
        grads = [gx, (gmat @ patches.T).reshape(kernel.shape)]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# classification head


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-softmax of ``logits``."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated in float64)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
