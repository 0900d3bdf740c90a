"""Backbone + four deep units + multi-level prediction heads.

Variants
--------
``mdfn-i1``   deep units [cubic, cubic, square, plain]
``mdfn-i2``   deep units [cubic, cubic, square, square]
``baseline``  deep units [plain, plain, plain, plain]

Every deep unit's output goes straight to its own prediction head, next to
one shallow tap taken from inside the backbone.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .boxes import DEFAULT_RATIOS, DefaultBoxGrid, generate_default_boxes
from .head import build_heads, head_channels, predict
from .inception import InceptionModule, InceptionSpec, count_params_and_flops
from .tensor import ConvParams, Tensor, count_ops, max_pool2d, relu

VARIANT_UNITS = {
    "mdfn-i1": ("cubic", "cubic", "square", "plain"),
    "mdfn-i2": ("cubic", "cubic", "square", "square"),
    "baseline": ("plain", "plain", "plain", "plain"),
}

# ("conv", width) is a 3x3 conv + ReLU, ("conv1x1", width) its 1x1 sibling,
# ("pool", k) a k x k / stride k max pool, ("tap",) marks a prediction tap.
DESK_BACKBONE = (("conv", 32), ("pool", 2), ("conv", 64), ("pool", 2), ("conv", 128), ("tap",),
                 ("pool", 2), ("conv", 128))


class BuildError(ValueError):
    """Raised for specs that cannot be assembled."""


def normalize_variant(name: str) -> str:
    key = name.lower().replace("_", "-")
    if key in ("i1", "mdfni1"):
        key = "mdfn-i1"
    if key in ("i2", "mdfni2"):
        key = "mdfn-i2"
    if key not in VARIANT_UNITS:
        raise BuildError(f"unknown variant {name!r}; expected one of {sorted(VARIANT_UNITS)}")
    return key


@dataclass
class NetworkSpec:
    variant: str = "mdfn-i2"
    image_size: int = 64
    num_classes: int = 3
    backbone: tuple = DESK_BACKBONE
    deep_units: tuple[str, ...] | None = None
    unit_strides: tuple[int, ...] = (1, 2, 2, 2)
    unit_bottlenecks: tuple[int | None, ...] | None = (64, 32, 32, 32)
    unit_branch_channels: tuple[int | None, ...] | None = None
    plain_out_channels: tuple[int | None, ...] | None = None
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    s_min: float = 0.2
    s_max: float = 0.9
    cascade_relu: bool = True
    seed: int = 0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.deep_units is None:
            self.deep_units = VARIANT_UNITS[self.variant]
        self.deep_units = tuple(self.deep_units)
        self.backbone = tuple(tuple(layer) for layer in self.backbone)
        self.ratios = tuple(float(r) for r in self.ratios)
        self.unit_strides = tuple(self.unit_strides)
        n = len(self.deep_units)
        for attr in ("unit_bottlenecks", "unit_branch_channels", "plain_out_channels"):
            val = getattr(self, attr)
            setattr(self, attr, tuple([None] * n) if val is None else tuple(val))

    @property
    def total_classes(self) -> int:
        """Object classes plus background."""
        return self.num_classes + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [list(layer) for layer in self.backbone]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["backbone"] = tuple(tuple(layer) for layer in d.get("backbone", DESK_BACKBONE))
        for k in ("deep_units", "unit_strides", "unit_bottlenecks", "unit_branch_channels",
                  "plain_out_channels", "ratios"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def multi_scale_feature_depth(spec: NetworkSpec) -> int:
    """Index (1-based) of the deepest unit that is a multi-scale inception unit."""
    depth = 0
    for i, kind in enumerate(spec.deep_units, start=1):
        if kind in ("square", "cubic", "basic"):
            depth = i
    return depth


class PlainUnit:
    """SSD-style extra layer: 1x1 bottleneck then a 3x3 conv, both with ReLU."""

    kind = "plain"

    def __init__(self, in_channels: int, bottleneck: int, out_channels: int, stride: int,
                 rng: np.random.Generator, name: str = "plain"):
        self.name = name
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.bottleneck = ConvParams.init(in_channels, bottleneck, 1, rng, name=f"{name}.bottleneck")
        self.conv = ConvParams.init(bottleneck, out_channels, 3, rng, name=f"{name}.conv3x3")

    def convs(self) -> list[ConvParams]:
        return [self.bottleneck, self.conv]

    def param_count(self) -> int:
        return sum(c.param_count() for c in self.convs())

    def __call__(self, x: Tensor) -> Tensor:
        if self.stride > 1:
            x = max_pool2d(x, self.stride, self.stride)
        return relu(self.conv(relu(self.bottleneck(x))))

    def summary(self) -> dict:
        return {"name": self.name, "kind": "plain", "stride": self.stride, "in_channels": self.in_channels,
                "bottleneck_channels": self.bottleneck.out_channels, "out_channels": self.out_channels,
                "params": self.param_count()}


def _unit_spec(kind: str, in_ch: int, stride: int, bottleneck, branch, cascade_relu: bool) -> InceptionSpec:
    return InceptionSpec(kind, in_ch, bottleneck_channels=bottleneck, branch_channels=branch, stride=stride,
                         cascade_relu=cascade_relu)


def plan_units(spec: NetworkSpec, in_channels: int) -> list[dict]:
    """Resolve channel widths of every deep unit without allocating weights.

    Inception units default to equal-width stages (branch = bottleneck); a
    plain unit defaults to the SSD extra-layer shape, bottleneck b -> 3x3 2b.
    """
    plan = []
    ch = in_channels
    for i, kind in enumerate(spec.deep_units):
        stride = spec.unit_strides[i]
        b = spec.unit_bottlenecks[i]
        br = spec.unit_branch_channels[i]
        if kind in ("square", "cubic", "basic"):
            ispec = _unit_spec(kind, ch, stride, b, br, spec.cascade_relu)
            plan.append({"kind": kind, "in": ch, "stride": stride, "spec": ispec, "out": ispec.out_channels})
        elif kind == "plain":
            bottleneck = b if b is not None else max(1, ch // 2)
            out = spec.plain_out_channels[i]
            if out is None:
                out = 2 * bottleneck
            plan.append({"kind": "plain", "in": ch, "stride": stride, "bottleneck": bottleneck, "out": out})
        else:
            raise BuildError(f"unit {i}: unknown kind {kind!r}")
        ch = plan[-1]["out"]
    return plan


def trace_shapes(spec: NetworkSpec) -> dict:
    """Spatial/channel bookkeeping of the whole network (no weights involved)."""
    h = spec.image_size
    ch = 3
    taps = []
    backbone = []
    for layer in spec.backbone:
        op = layer[0]
        if op in ("conv", "conv1x1"):
            ch = int(layer[1])
            backbone.append({"op": op, "out_channels": ch, "hw": h})
        elif op == "pool":
            k = int(layer[1])
            if h < k:
                raise BuildError(f"pool {k} on {h}x{h} feature map collapses the grid")
            h = (h - k) // k + 1
            backbone.append({"op": "pool", "hw": h})
        elif op == "tap":
            taps.append({"source": f"backbone{len(backbone)}", "channels": ch, "hw": h})
        else:
            raise BuildError(f"unknown backbone layer {layer!r}")
    units = plan_units(spec, ch)
    for i, u in enumerate(units):
        if h < u["stride"]:
            raise BuildError(f"unit {i} stride {u['stride']} collapses a {h}x{h} map")
        h = (h - u["stride"]) // u["stride"] + 1
        u["hw"] = h
        taps.append({"source": f"unit{i}", "channels": u["out"], "hw": h})
    sizes = [t["hw"] for t in taps]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise BuildError(f"tap sizes must strictly decrease shallow to deep, got {sizes}")
    return {"backbone": backbone, "units": units, "taps": taps, "backbone_channels": ch}


class MDFN:
    """Executable detector built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.trace = trace_shapes(spec)
        rng = np.random.default_rng(spec.seed)
        self.backbone: list[tuple] = []
        cin = 3
        n_conv = 0
        for layer in spec.backbone:
            op = layer[0]
            if op in ("conv", "conv1x1"):
                k = 3 if op == "conv" else 1
                conv = ConvParams.init(cin, int(layer[1]), k, rng, name=f"backbone.conv{n_conv}")
                self.backbone.append(("conv", conv))
                cin = int(layer[1])
                n_conv += 1
            elif op == "pool":
                self.backbone.append(("pool", int(layer[1])))
            else:
                self.backbone.append(("tap",))
        self.units: list = []
        for i, u in enumerate(self.trace["units"]):
            name = f"unit{i}"
            if u["kind"] == "plain":
                self.units.append(PlainUnit(u["in"], u["bottleneck"], u["out"], u["stride"], rng, name=name))
            else:
                self.units.append(InceptionModule(u["spec"], rng, name=name))
        self.tap_shapes = [(t["hw"], t["hw"]) for t in self.trace["taps"]]
        self.defaults: DefaultBoxGrid = generate_default_boxes(self.tap_shapes, spec.s_min, spec.s_max, spec.ratios)
        self.boxes_per_cell = self.defaults.boxes_per_cell
        self.heads = build_heads([t["channels"] for t in self.trace["taps"]], self.boxes_per_cell,
                                 spec.total_classes, rng)

    @property
    def num_classes(self) -> int:
        return self.spec.total_classes

    def convs(self) -> list[ConvParams]:
        out = [layer[1] for layer in self.backbone if layer[0] == "conv"]
        for u in self.units:
            out.extend(u.convs())
        out.extend(self.heads)
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for cv in self.convs():
            params[f"{cv.name}.weight"] = cv.weight
            params[f"{cv.name}.bias"] = cv.bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def features(self, x: Tensor) -> list[Tensor]:
        """Forward through backbone and deep units, returning the taps shallow to deep."""
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.spec.image_size, self.spec.image_size):
            raise ValueError(f"expected input (B, 3, {self.spec.image_size}, {self.spec.image_size}), got {x.shape}")
        taps = []
        h = x
        for layer in self.backbone:
            if layer[0] == "conv":
                h = relu(layer[1](h))
            elif layer[0] == "pool":
                h = max_pool2d(h, layer[1], layer[1])
            else:
                taps.append(h)
        for u in self.units:
            h = u(h)
            taps.append(h)
        return taps

    def forward(self, x) -> tuple[list[Tensor], list[Tensor]]:
        """Images ``(B, 3, H, W)`` in [0, 1] -> (taps, per-tap head outputs)."""
        # centre pixel values; a constant shift, not a learned layer
        x = (x if isinstance(x, Tensor) else Tensor(x)) - 0.5
        taps = self.features(x)
        return taps, predict(taps, self.heads)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def summary(self) -> dict:
        units = []
        for u, t in zip(self.units, self.trace["units"]):
            info = u.summary() if isinstance(u, PlainUnit) else {
                "name": u.name, "kind": u.spec.kind, "stride": u.spec.stride, "in_channels": u.spec.in_channels,
                "bottleneck_channels": u.spec.bottleneck_channels, "branch_channels": u.spec.branch_channels,
                "multiplicities": list(u.spec.multiplicities), "blocks": u.spec.block_layout(),
                "out_channels": u.out_channels, "params": u.param_count()}
            info["hw"] = t["hw"]
            units.append(info)
        return {
            "variant": self.spec.variant,
            "image_size": self.spec.image_size,
            "multi_scale_feature_depth": multi_scale_feature_depth(self.spec),
            "backbone_params": sum(layer[1].param_count() for layer in self.backbone if layer[0] == "conv"),
            "units": units,
            "taps": [dict(t) for t in self.trace["taps"]],
            "head_channels": head_channels(self.boxes_per_cell, self.num_classes),
            "boxes_per_cell": self.boxes_per_cell,
            "total_default_boxes": len(self.defaults),
            "head_params": sum(h.param_count() for h in self.heads),
            "total_params": self.param_count(),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def build(spec: NetworkSpec) -> MDFN:
    return MDFN(spec)


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

def _conv_cost(cin: int, cout: int, k: int, hw: int) -> tuple[int, int]:
    return cin * cout * k * k + cout, cin * cout * k * k * hw * hw


def count_network(spec: NetworkSpec) -> dict:
    """Parameter and multiply-add totals per component, without building the backbone.

    Inception units are measured on their realised graphs; everything else is
    closed-form conv arithmetic.  Usable at full (VGG-16) widths.
    """
    tr = trace_shapes(spec)
    out = {"backbone": [0, 0], "units": [], "heads": [0, 0]}
    cin, hw = 3, spec.image_size
    for layer in spec.backbone:
        if layer[0] in ("conv", "conv1x1"):
            k = 3 if layer[0] == "conv" else 1
            p, f = _conv_cost(cin, int(layer[1]), k, hw)
            out["backbone"][0] += p
            out["backbone"][1] += f
            cin = int(layer[1])
        elif layer[0] == "pool":
            hw = (hw - int(layer[1])) // int(layer[1]) + 1
    for u in tr["units"]:
        in_hw = hw
        hw = (hw - u["stride"]) // u["stride"] + 1
        if u["kind"] == "plain":
            p1, f1 = _conv_cost(u["in"], u["bottleneck"], 1, hw)
            p2, f2 = _conv_cost(u["bottleneck"], u["out"], 3, hw)
            out["units"].append({"kind": "plain", "params": p1 + p2, "mult_adds": f1 + f2})
        else:
            p, f = count_params_and_flops(u["spec"], (in_hw, in_hw))
            out["units"].append({"kind": u["kind"], "params": p, "mult_adds": f})
    k = len(spec.ratios) + 1
    for t in tr["taps"]:
        p, f = _conv_cost(t["channels"], head_channels(k, spec.total_classes), 3, t["hw"])
        out["heads"][0] += p
        out["heads"][1] += f
    total_p = out["backbone"][0] + out["heads"][0] + sum(u["params"] for u in out["units"])
    total_f = out["backbone"][1] + out["heads"][1] + sum(u["mult_adds"] for u in out["units"])
    return {"variant": spec.variant, "backbone": {"params": out["backbone"][0], "mult_adds": out["backbone"][1]},
            "units": out["units"], "heads": {"params": out["heads"][0], "mult_adds": out["heads"][1]},
            "total_params": total_p, "total_mult_adds": total_f}


def realized_counts(model: MDFN) -> tuple[int, int]:
    """Distinct parameters and measured multiply-adds of one forward pass."""
    x = Tensor(np.zeros((1, 3, model.spec.image_size, model.spec.image_size)))
    with count_ops() as c:
        model.forward(x)
    return model.param_count(), c.mult_adds


# VGG-16 through conv5_3, then fc6 (3x3, 1024) and fc7 (1x1, 1024); taps at
# conv4_3 and fc7.  With a 304-pixel input the taps are 38x38 and 19x19.
VGG16_BACKBONE = (("conv", 64), ("conv", 64), ("pool", 2),
                  ("conv", 128), ("conv", 128), ("pool", 2),
                  ("conv", 256), ("conv", 256), ("conv", 256), ("pool", 2),
                  ("conv", 512), ("conv", 512), ("conv", 512), ("tap",), ("pool", 2),
                  ("conv", 512), ("conv", 512), ("conv", 512),
                  ("conv", 1024), ("conv1x1", 1024), ("tap",))


def full_width_spec(variant: str, num_classes: int = 3) -> NetworkSpec:
    """Full-size widths: VGG-16 trunk and SSD extra-layer widths for the four deep units.

    Only meant for counting; building it allocates ~25M float64 weights.
    """
    return NetworkSpec(variant=variant, image_size=304, num_classes=num_classes, backbone=VGG16_BACKBONE,
                       unit_strides=(2, 2, 2, 2), unit_bottlenecks=(256, 128, 128, 128),
                       unit_branch_channels=(256, 128, 128, 128), plain_out_channels=(512, 256, 256, 256))


def param_increase(variant: str, spec_for=full_width_spec, **kw) -> float:
    """Relative total-parameter increase of ``variant`` over the plain baseline."""
    base = count_network(spec_for("baseline", **kw))["total_params"]
    return count_network(spec_for(variant, **kw))["total_params"] / base - 1.0
