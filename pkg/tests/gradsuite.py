"""Randomised finite-difference sweep over every primitive and every inception module kind.

Each case builder takes an RNG and returns ``(build, leaves)`` for
:func:`conftest.check_gradients`.
"""
import numpy as np

from conftest import check_gradients
from mdfn.inception import InceptionModule, InceptionSpec
from mdfn.tensor import (ConvParams, Tensor, add, concat, concat_channels, conv2d, matmul, max_pool2d, mul, narrow,
                         relu, reshape, smooth_l1, softmax_cross_entropy, take_rows, tensor_sum, transpose)

SHAPES_PER_OP = 20


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, shape):
    # keep |x| >= 0.05 so the kink of relu/abs is never straddled by +-eps
    x = rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def case_add(rng):
    s = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    a, b = _leaf(rng, s), _leaf(rng, s[-1:])
    return lambda: add(a, b), [a, b]


def case_mul(rng):
    s = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    a, b = _leaf(rng, s), _leaf(rng, s)
    return lambda: mul(a, b), [a, b]


def case_matmul(rng):
    n, k, m = rng.integers(1, 6, size=3)
    a, b = _leaf(rng, (n, k)), _leaf(rng, (k, m))
    return lambda: matmul(a, b), [a, b]


def case_sum(rng):
    a = _leaf(rng, tuple(rng.integers(1, 5, size=3)))
    return lambda: tensor_sum(a), [a]


def case_reshape_transpose(rng):
    s = tuple(int(v) for v in rng.integers(1, 4, size=3))
    a = _leaf(rng, s)
    perm = tuple(rng.permutation(3))
    return lambda: transpose(reshape(a, (s[0], s[1] * s[2])).reshape(*s), perm), [a]


def case_take_rows(rng):
    n, c = rng.integers(2, 7), rng.integers(1, 4)
    a = _leaf(rng, (n, c))
    idx = rng.integers(0, n, size=rng.integers(1, 2 * n))
    return lambda: take_rows(a, idx), [a]


def case_narrow_concat(rng):
    s = [int(v) for v in rng.integers(2, 5, size=3)]
    axis = int(rng.integers(0, 3))
    a, b = _leaf(rng, s), _leaf(rng, s)
    start = int(rng.integers(0, s[axis] - 1))
    return lambda: narrow(concat([a, b], axis), axis, start, s[axis] + 1), [a, b]


def case_concat_channels(rng):
    B, H, W = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    xs = [_leaf(rng, (B, int(c), H, W)) for c in rng.integers(1, 4, size=rng.integers(1, 4))]
    return lambda: concat_channels(xs), xs


def case_relu(rng):
    a = _away_from_zero(rng, tuple(rng.integers(1, 5, size=2)))
    return lambda: relu(a), [a]


def case_conv2d(rng):
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    h = int(rng.integers(k, 7))
    x = _leaf(rng, (int(rng.integers(1, 3)), int(cin), h, h))
    conv = ConvParams.init(int(cin), int(cout), k, rng, stride=stride, padding=pad)
    conv.bias.data[:] = rng.standard_normal(int(cout))
    return lambda: conv2d(x, conv), [x, conv.weight, conv.bias]


def case_max_pool(rng):
    window = int(rng.integers(2, 4))
    stride = int(rng.integers(1, window + 1))
    h = int(rng.integers(window, 8))
    # distinct values with gaps far larger than eps: no argmax flips under perturbation
    n = 2 * 2 * h * h
    vals = rng.permutation(n).astype(float) * 0.01
    x = Tensor(vals.reshape(2, 2, h, h), requires_grad=True)
    return lambda: max_pool2d(x, window, stride), [x]


def case_softmax_xent(rng):
    n, c = rng.integers(1, 6), rng.integers(2, 6)
    z = _leaf(rng, (n, c))
    t = rng.integers(0, c, size=n)
    red = str(rng.choice(["mean", "sum"]))
    return lambda: softmax_cross_entropy(z, t, reduction=red), [z]


def case_smooth_l1(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    target = rng.standard_normal(shape)
    # offsets kept away from the |d| = 1 transition and from d = 0
    d = rng.uniform(0.05, 2.5, size=shape)
    d = np.where(np.abs(d - 1.0) < 0.05, d + 0.2, d) * rng.choice([-1.0, 1.0], size=shape)
    p = Tensor(target + d, requires_grad=True)
    return lambda: smooth_l1(p, target), [p]


PRIMITIVES = {
    "add": case_add, "mul": case_mul, "matmul": case_matmul, "sum": case_sum,
    "reshape_transpose": case_reshape_transpose, "take_rows": case_take_rows, "narrow_concat": case_narrow_concat,
    "concat_channels": case_concat_channels, "relu": case_relu, "conv2d": case_conv2d, "max_pool2d": case_max_pool,
    "softmax_cross_entropy": case_softmax_xent, "smooth_l1": case_smooth_l1,
}


def module_case(kind: str):
    def case(rng):
        cin = int(rng.integers(2, 5))
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        stride = int(rng.integers(1, 3))
        h = int(rng.integers(3, 6)) * stride
        spec = InceptionSpec(kind, cin, bottleneck_channels=b, branch_channels=c, stride=stride)
        mod = InceptionModule(spec, rng)
        for conv in mod.convs():
            # small positive bias keeps pre-activations off the relu kink
            conv.bias.data[:] = rng.uniform(0.05, 0.2, size=conv.bias.shape)
        x = Tensor(rng.permutation(2 * cin * h * h).reshape(2, cin, h, h) * 0.01 - 0.5, requires_grad=True)
        return lambda: mod(x), [x] + mod.parameters()
    return case


MODULES = {f"{k}_inception": module_case(k) for k in ("basic", "square", "cubic")}


def sweep(case, seed: int, n: int = SHAPES_PER_OP) -> float:
    """Worst relative error of ``case`` over ``n`` random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        build, leaves = case(rng)
        worst = max(worst, check_gradients(build, leaves, rng))
    return worst
