"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to parent gradients.  ``backward``
walks the graph in reverse topological order and accumulates into
``.grad`` of every tensor that requires it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_check_finite = False


def set_anomaly_mode(enabled: bool) -> None:
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    global _check_finite
    _check_finite = bool(enabled)


@contextlib.contextmanager
def anomaly_mode():
    prev = _check_finite
    set_anomaly_mode(True)
    try:
        yield
    finally:
        set_anomaly_mode(prev)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar; the heavy lifting lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other: float):
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls (reset them with ``zero_grad``);
    intermediate buffers are released afterwards, so a second call on the
    same loss raises.
    """
    if loss._consumed:
        raise RuntimeError("backward() already ran on this graph; rebuild the forward pass")
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node._op != "leaf":
                raise RuntimeError("graph segment was already released by an earlier backward()")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[index]`` along axis 0; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.intp)
    src = a.shape

    def fn(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), fn, "take_rows")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop, ...]`` along ``axis``."""
    axis = axis % a.ndim
    index = (slice(None),) * axis + (slice(start, stop),)
    src = a.shape

    def fn(g):
        out = np.zeros(src, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), fn, "narrow")


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    if len(inputs) == 1:
        return inputs[0]
    sizes = [t.shape[axis] for t in inputs]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in inputs], axis=axis), inputs, fn, "concat")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    if len(ref) != 4:
        raise ShapeError(f"concat_channels expects 4-D inputs, got {ref}")
    for i, t in enumerate(inputs):
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: input {i} has shape {t.shape}, expected (B,*,H,W) = {ref}")
    return concat(inputs, axis=1)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

class _OpCounter:
    def __init__(self):
        self.mult_adds = 0
        self.conv_calls = 0


_counters: list[_OpCounter] = []


@contextlib.contextmanager
def count_ops():
    """Tally multiply-adds of every conv executed inside the block."""
    c = _OpCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold NCHW patches into rows of shape (B*Ho*Wo, C*kh*kw)."""
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if kh == 1 and kw == 1 and padding == 0:
        sub = x[:, :, ::stride, ::stride]
        return sub.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C), Ho, Wo
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
           stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto the input grid."""
    B, C, H, W = shape
    if kh == 1 and kw == 1 and padding == 0:
        out = np.zeros(shape, dtype=DTYPE)
        out[:, :, ::stride, ::stride] = cols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
        return out
    blocks = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += blocks[:, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


class ConvParams:
    """Weights, bias and geometry of one convolution.

    ``calls`` counts forward evaluations; the sharing tests rely on it.
    """

    ALLOWED_KERNELS = (1, 3)

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, name: str = "conv"):
        if weight.ndim != 4:
            raise ShapeError(f"conv weight must be (out, in, kh, kw), got {weight.shape}")
        cout, _, kh, kw = weight.shape
        if kh not in self.ALLOWED_KERNELS or kw not in self.ALLOWED_KERNELS:
            raise ShapeError(f"kernel {kh}x{kw} not supported; build larger fields from cascaded 3x3")
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        if stride < 1 or padding < 0:
            raise ValueError(f"invalid stride={stride} / padding={padding}")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.name = name
        self.calls = 0

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
             padding: int | None = None, name: str = "conv") -> "ConvParams":
        """He-uniform fan-in initialisation, zero bias, 'same' padding by default."""
        fan_in = in_ch * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias"),
                   stride=stride, padding=k // 2 if padding is None else padding, name=name)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k = self.kernel
        return conv_output_size(h, k, self.stride, self.padding), conv_output_size(w, k, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation with bias via im2col + a single matmul."""
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv2d '{params.name}': input shape {x.shape} incompatible with weight shape {params.weight.shape}"
        )
    w, b = params.weight, params.bias
    cout, cin, kh, kw = w.shape
    s, p = params.stride, params.padding
    xshape = x.shape
    cols, Ho, Wo = im2col(x.data, kh, kw, s, p)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    out += b.data
    B = xshape[0]
    result = np.ascontiguousarray(out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2))
    params.calls += 1
    for c in _counters:
        c.mult_adds += B * Ho * Wo * cout * cin * kh * kw
        c.conv_calls += 1

    def fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = col2im(gmat @ wmat, xshape, kh, kw, s, p, Ho, Wo)
        return gx, gw, gb

    return _make(result, (x, w, b), fn, "conv2d")


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling with floor division; ties route the gradient to the first index."""
    stride = window if stride is None else stride
    B, C, H, W = x.shape
    if window > H or window > W:
        raise ShapeError(f"pool window {window} larger than spatial extent {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    xshape = x.shape

    def fn(g):
        gx = np.zeros(xshape, dtype=DTYPE)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.where(arg == idx, g, 0.0)
        return (gx,)

    return _make(out, (x,), fn, "max_pool2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-softmax of the target class, max-subtracted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target class out of range [0, {c})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    total = -logp[rows, targets].sum()
    if reduction == "mean":
        scale = 1.0 / max(n, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g * scale),)

    return _make(np.asarray(total * scale), (logits,), fn, "softmax_xent")


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Summed Huber loss with unit transition; normalisation is the caller's job."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != target_data.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {target_data.shape}")
    d = pred.data - target_data
    ad = np.abs(d)
    small = ad < 1.0
    val = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    dgrad = np.where(small, d, np.sign(d))
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def fn(g):
        gp = dgrad * g
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _make(np.asarray(val), parents, fn, "smooth_l1")
