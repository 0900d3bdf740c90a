"""Parameter / multiply-add tables for the shipped variants."""
from __future__ import annotations

from .inception import cascade_ratio
from .network import NetworkSpec, count_network, full_width_spec, normalize_variant

VARIANTS = ("baseline", "mdfn-i1", "mdfn-i2")


def _row(counts: dict) -> dict:
    return {"params": counts["total_params"], "mult_adds": counts["total_mult_adds"]}


def parameter_report(variant: str = "mdfn-i2", num_classes: int = 3) -> dict:
    """Per-module counts for ``variant`` plus cross-variant deltas at desk and full widths."""
    variant = normalize_variant(variant)
    desk = {v: count_network(NetworkSpec(variant=v, num_classes=num_classes)) for v in VARIANTS}
    full = {v: count_network(full_width_spec(v, num_classes)) for v in VARIANTS}
    sel = desk[variant]
    modules = [{"module": "backbone", **sel["backbone"]}]
    modules += [{"module": f"unit{i} ({u['kind']})", "params": u["params"], "mult_adds": u["mult_adds"]}
                for i, u in enumerate(sel["units"])]
    modules.append({"module": "heads", **sel["heads"]})

    def increase(table, v):
        return table[v]["total_params"] / table["baseline"]["total_params"] - 1.0

    ratio = cascade_ratio(64)
    return {
        "variant": variant,
        "modules": modules,
        "total": _row(sel),
        "variants": {v: _row(desk[v]) for v in VARIANTS},
        "i2_minus_i1": {"params": desk["mdfn-i2"]["total_params"] - desk["mdfn-i1"]["total_params"],
                        "mult_adds": desk["mdfn-i2"]["total_mult_adds"] - desk["mdfn-i1"]["total_mult_adds"]},
        "increase_over_baseline": {v: increase(desk, v) for v in ("mdfn-i1", "mdfn-i2")},
        "full_width": {
            "variants": {v: _row(full[v]) for v in VARIANTS},
            "increase_over_baseline": {v: increase(full, v) for v in ("mdfn-i1", "mdfn-i2")},
        },
        "cascade_vs_5x5": {"ratio": float(ratio), "fraction": f"{ratio.numerator}/{ratio.denominator}"},
    }


def format_report(rep: dict) -> str:
    lines = [f"variant {rep['variant']}", f"{'module':<20}{'params':>14}{'mult-adds':>16}"]
    for m in rep["modules"]:
        lines.append(f"{m['module']:<20}{m['params']:>14,}{m['mult_adds']:>16,}")
    lines.append(f"{'total':<20}{rep['total']['params']:>14,}{rep['total']['mult_adds']:>16,}")
    lines.append("")
    lines.append(f"{'variant':<20}{'params':>14}{'mult-adds':>16}")
    for v, row in rep["variants"].items():
        lines.append(f"{v:<20}{row['params']:>14,}{row['mult_adds']:>16,}")
    d = rep["i2_minus_i1"]
    lines.append(f"{'I2 - I1':<20}{d['params']:>+14,}{d['mult_adds']:>+16,}")
    lines.append("")
    for v, inc in rep["increase_over_baseline"].items():
        full = rep["full_width"]["increase_over_baseline"][v]
        lines.append(f"baseline -> {v}: {inc:+.1%} params (desk widths), {full:+.1%} (full widths)")
    c = rep["cascade_vs_5x5"]
    lines.append(f"cascaded 3x3 x2 vs 5x5 weights: {c['ratio']:.2f} ({c['fraction']})")
    return "\n".join(lines)
