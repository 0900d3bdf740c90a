"""Multi-scale inception units for deep feature maps.

Three kinds are provided:

* ``basic``  - four independent branches (1x1, 3x3, 3x3x2, 3x3x3) after a
  shared 1x1 bottleneck.
* ``square`` - (f + 1)^2 expansion: ``f(f(x)), 2 x f(x), x``.
* ``cubic``  - (g + 1)^3 expansion: ``g(g(g(x))), 3 x g(g(x)), 3 x g(x), x``.

In the power modules the integer coefficients become channel multiplicities:
the activation of a shared stage is concatenated that many times, so each
3x3 stage is stored and evaluated once no matter how many output blocks it
feeds.  The passthrough term ``x`` is the 1x1-bottlenecked input.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from math import comb

import numpy as np

from .tensor import ConvParams, Tensor, concat_channels, count_ops, max_pool2d, relu

KINDS = ("basic", "square", "cubic")
_ORDER = {"square": 2, "cubic": 3}


def binomial_multiplicities(order: int) -> tuple[int, ...]:
    """Pascal row for (f + 1)^order, highest power first: 2 -> (1, 2, 1)."""
    return tuple(comb(order, i) for i in range(order + 1))


@dataclass
class InceptionSpec:
    """Declarative description of one inception unit.

    ``bottleneck_channels`` defaults to ``in_channels // 2`` and
    ``branch_channels`` to the bottleneck width, so every 3x3 stage is an
    equal-width C->C map.  ``multiplicities`` overrides the binomial row,
    highest power first, passthrough last.
    """

    kind: str
    in_channels: int
    bottleneck_channels: int | None = None
    branch_channels: int | None = None
    stride: int = 1
    cascade_relu: bool = True
    multiplicities: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown inception kind {self.kind!r}; expected one of {KINDS}")
        if self.in_channels < 1 or self.stride < 1:
            raise ValueError("in_channels and stride must be positive")
        if self.bottleneck_channels is None:
            self.bottleneck_channels = max(1, self.in_channels // 2)
        if self.kind == "basic":
            if self.multiplicities is not None:
                raise ValueError("basic modules have fixed single-use branches")
            if self.branch_channels is None:
                self.branch_channels = self.bottleneck_channels
        else:
            order = _ORDER[self.kind]
            if self.multiplicities is None:
                self.multiplicities = binomial_multiplicities(order)
            self.multiplicities = tuple(int(m) for m in self.multiplicities)
            if len(self.multiplicities) != order + 1 or min(self.multiplicities) < 1:
                raise ValueError(f"{self.kind} needs {order + 1} positive multiplicities, got {self.multiplicities}")
            if self.branch_channels is None:
                self.branch_channels = self.bottleneck_channels

    @property
    def order(self) -> int:
        return _ORDER.get(self.kind, 3)

    @property
    def passthrough_channels(self) -> int:
        return self.bottleneck_channels * self.multiplicities[-1] if self.kind != "basic" else 0

    @property
    def out_channels(self) -> int:
        if self.kind == "basic":
            return 4 * self.branch_channels
        return sum(self.multiplicities[:-1]) * self.branch_channels + self.passthrough_channels

    def block_layout(self) -> list[dict]:
        """Output channel blocks in concatenation order."""
        c = self.branch_channels
        if self.kind == "basic":
            return [{"branch": f"3x3x{d}" if d else "1x1", "depth": d, "multiplicity": 1, "channels": c}
                    for d in range(4)]
        blocks = []
        for power, mult in zip(range(self.order, 0, -1), self.multiplicities):
            blocks.append({"branch": f"stage{power}", "depth": power, "multiplicity": mult, "channels": mult * c})
        blocks.append({"branch": "passthrough", "depth": 0, "multiplicity": self.multiplicities[-1],
                       "channels": self.passthrough_channels})
        return blocks


@dataclass
class SharedBranchSet:
    """The convolutions of a square/cubic module.

    ``stage1`` feeds both its own output blocks and ``stage2``; ``stage2``
    likewise feeds ``stage3`` (absent for square modules).
    """

    bottleneck: ConvParams
    stage1: ConvParams
    stage2: ConvParams
    stage3: ConvParams | None = None

    def stages(self) -> list[ConvParams]:
        return [s for s in (self.stage1, self.stage2, self.stage3) if s is not None]


class InceptionModule:
    """Executable inception unit built from an :class:`InceptionSpec`."""

    def __init__(self, spec: InceptionSpec, rng: np.random.Generator, name: str = "inception"):
        self.spec = spec
        self.name = name
        b, c, cin = spec.bottleneck_channels, spec.branch_channels, spec.in_channels
        self.bottleneck = ConvParams.init(cin, b, 1, rng, name=f"{name}.bottleneck")
        if spec.kind == "basic":
            self.branch_1x1 = ConvParams.init(b, c, 1, rng, name=f"{name}.b1x1")
            self.branch_chains: list[list[ConvParams]] = []
            for depth in (1, 2, 3):
                chain = [ConvParams.init(b if i == 0 else c, c, 3, rng, name=f"{name}.b3x3x{depth}.{i}")
                         for i in range(depth)]
                self.branch_chains.append(chain)
            self.branches = None
        else:
            stages = [ConvParams.init(b if i == 0 else c, c, 3, rng, name=f"{name}.stage{i + 1}")
                      for i in range(spec.order)]
            self.branches = SharedBranchSet(self.bottleneck, *stages)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def convs(self) -> list[ConvParams]:
        if self.branches is None:
            return [self.bottleneck, self.branch_1x1] + [cv for ch in self.branch_chains for cv in ch]
        return [self.bottleneck] + self.branches.stages()

    def parameters(self) -> list[Tensor]:
        return [p for cv in self.convs() for p in cv.parameters()]

    def param_count(self) -> int:
        return sum(cv.param_count() for cv in self.convs())

    def _stage(self, conv: ConvParams, x: Tensor, last: bool) -> Tensor:
        y = conv(x)
        return relu(y) if (self.spec.cascade_relu or last) else y

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"{self.name}: expected {self.spec.in_channels} input channels, got shape {x.shape}")
        if self.spec.stride > 1:
            x = max_pool2d(x, self.spec.stride, self.spec.stride)
        base = relu(self.bottleneck(x))
        if self.branches is None:
            return basic_inception(self, base)
        outs = []
        h = base
        for conv in self.branches.stages():
            z = conv(h)
            a = relu(z)
            # every emitted block is rectified; only the chain may stay linear
            outs.append(a)
            h = a if self.spec.cascade_relu else z
        blocks = []
        for power, mult in zip(range(self.spec.order, 0, -1), self.spec.multiplicities):
            blocks.extend([outs[power - 1]] * mult)
        blocks.extend([base] * self.spec.multiplicities[-1])
        return concat_channels(blocks)

    def summary(self, input_hw: tuple[int, int] | None = None) -> dict:
        info = {"name": self.name, "spec": _spec_dict(self.spec), "blocks": self.spec.block_layout(),
                "out_channels": self.out_channels, "params": self.param_count()}
        if input_hw is not None:
            info["mult_adds"] = count_params_and_flops(self.spec, input_hw, module=self)[1]
        return info

    def summary_json(self, input_hw: tuple[int, int] | None = None) -> str:
        return json.dumps(self.summary(input_hw), sort_keys=True)


def _spec_dict(spec: InceptionSpec) -> dict:
    d = asdict(spec)
    if d["multiplicities"] is not None:
        d["multiplicities"] = list(d["multiplicities"])
    return d


def basic_inception(module: InceptionModule, base: Tensor) -> Tensor:
    """Concat of [1x1, 3x3, 3x3x2, 3x3x3] branches over a bottlenecked input."""
    outs = [relu(module.branch_1x1(base))]
    for chain in module.branch_chains:
        h = base
        for i, conv in enumerate(chain):
            h = module._stage(conv, h, last=i == len(chain) - 1)
        outs.append(h)
    return concat_channels(outs)


def square_module(x: Tensor, module: InceptionModule) -> Tensor:
    if module.spec.kind != "square":
        raise ValueError(f"expected a square module, got {module.spec.kind}")
    return module(x)


def cubic_module(x: Tensor, module: InceptionModule) -> Tensor:
    if module.spec.kind != "cubic":
        raise ValueError(f"expected a cubic module, got {module.spec.kind}")
    return module(x)


class UnsharedReference:
    """Tied-weight unshared twin of a square/cubic module.

    Every distinct power gets its own conv chain holding *copies* of the
    shared stage weights, so nothing is reused across branches.  Outputs must
    match the shared module, and the shared gradient must equal the sum of the
    gradients of the copies.
    """

    def __init__(self, module: InceptionModule):
        if module.branches is None:
            raise ValueError("unshared reference only applies to square/cubic modules")
        self.module = module
        spec = module.spec
        shared = module.branches.stages()
        self.bottleneck = _copy_conv(module.bottleneck, "ref.bottleneck")
        self.chains: dict[int, list[ConvParams]] = {}
        for power in range(spec.order, 0, -1):
            self.chains[power] = [_copy_conv(shared[i], f"ref.p{power}.stage{i + 1}") for i in range(power)]

    def convs(self) -> list[ConvParams]:
        return [self.bottleneck] + [cv for p in sorted(self.chains, reverse=True) for cv in self.chains[p]]

    def parameters(self) -> list[Tensor]:
        return [p for cv in self.convs() for p in cv.parameters()]

    def param_count(self) -> int:
        return sum(cv.param_count() for cv in self.convs())

    def __call__(self, x: Tensor) -> Tensor:
        spec = self.module.spec
        if spec.stride > 1:
            x = max_pool2d(x, spec.stride, spec.stride)
        base = relu(self.bottleneck(x))
        blocks = []
        for power, mult in zip(range(spec.order, 0, -1), spec.multiplicities):
            h = base
            for i, conv in enumerate(self.chains[power]):
                h = conv(h)
                if spec.cascade_relu or i == power - 1:
                    h = relu(h)
            blocks.extend([h] * mult)
        blocks.extend([base] * spec.multiplicities[-1])
        return concat_channels(blocks)

    def tied_gradients(self) -> dict[str, np.ndarray]:
        """Per shared conv: summed gradient over all of its copies."""
        out: dict[str, np.ndarray] = {}
        out["bottleneck.weight"] = self.bottleneck.weight.grad
        out["bottleneck.bias"] = self.bottleneck.bias.grad
        for i in range(self.module.spec.order):
            for attr in ("weight", "bias"):
                grads = [getattr(self.chains[p][i], attr).grad for p in self.chains if p > i]
                out[f"stage{i + 1}.{attr}"] = np.sum([g for g in grads if g is not None], axis=0)
        return out


def _copy_conv(cv: ConvParams, name: str) -> ConvParams:
    return ConvParams(Tensor(cv.weight.data.copy(), requires_grad=True, name=f"{name}.weight"),
                      Tensor(cv.bias.data.copy(), requires_grad=True, name=f"{name}.bias"),
                      stride=cv.stride, padding=cv.padding, name=name)


def count_params_and_flops(spec: InceptionSpec, input_hw: tuple[int, int] = (1, 1),
                           module: InceptionModule | None = None) -> tuple[int, int]:
    """Parameter and multiply-add counts measured on the realised graph.

    Parameters are summed over distinct conv objects; multiply-adds are
    tallied by running one forward pass on a zero input, so a shared stage
    counts once however many output blocks reuse it.
    """
    if module is None:
        module = InceptionModule(spec, np.random.default_rng(0))
    x = Tensor(np.zeros((1, spec.in_channels, *input_hw)))
    with count_ops() as counter:
        module(x)
    return module.param_count(), counter.mult_adds


def conv_weight_count(in_ch: int, out_ch: int, k: int) -> int:
    return in_ch * out_ch * k * k


def cascade_ratio(channels: int, depth: int = 2) -> Fraction:
    """Weights of ``depth`` cascaded CxC 3x3 convs over one CxC conv of the same field.

    ``cascade_ratio(C, 2) == Fraction(18, 25)``.
    """
    k = 2 * depth + 1
    return Fraction(depth * conv_weight_count(channels, channels, 3), conv_weight_count(channels, channels, k))


def impulse_response_support(depth: int, channels: int = 1, size: int = 15,
                             rng: np.random.Generator | None = None) -> int:
    """Width of the nonzero region produced by ``depth`` cascaded 3x3 convs on an impulse.

    Weights are strictly positive, so no cancellation hides part of the field.
    """
    rng = rng or np.random.default_rng(0)
    x = np.zeros((1, channels, size, size))
    x[0, :, size // 2, size // 2] = 1.0
    h = Tensor(x)
    for i in range(depth):
        w = rng.uniform(0.5, 1.5, size=(channels, channels, 3, 3))
        h = ConvParams(Tensor(w), Tensor(np.zeros(channels)), padding=1, name=f"probe{i}")(h)
    nz = np.nonzero(np.abs(h.data[0]).sum(axis=0) > 0)
    return int(nz[0].max() - nz[0].min() + 1)
