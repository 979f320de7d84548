"""Parameter and multiply-accumulate accounting.

MACs follow the multiply-accumulate convention: a convolution costs
``outC * outH * outW * inC * kH * kW`` and a linear layer ``out * in``. Top-down
blocks pay their feedback span once per computation step plus the searchlight
MLP and one MAC per bottom element for each gating multiply. Batch norm,
ReLU, pooling and residual adds are not counted.
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .backbone import Model

CATEGORIES = ("backbone", "attention", "attention_bias", "bias", "bn")


@dataclass
class CostRow:
    layer: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    rows: list[CostRow]
    input_hw: Optional[tuple] = None
    breakdown: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_name", "params", "macs"])
        for r in self.rows:
            w.writerow([r.layer, r.params, r.macs])
        w.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()


def _attention_prefixes(model: Model) -> list[str]:
    return [name for name, mod in model.named_modules() if name and mod.category == "attention"]


def _param_category(name: str, role: str, attn: list[str]) -> str:
    if role == "bn":
        return "bn"
    in_attn = any(name.startswith(p + ".") for p in attn)
    if role == "bias":
        return "attention_bias" if in_attn else "bias"
    return "attention" if in_attn else "backbone"


def cost_report(model: Model, input_hw: Optional[tuple] = None) -> CostReport:
    """Per-layer parameters, plus MACs when ``input_hw`` is given."""
    rows: "OrderedDict[str, CostRow]" = OrderedDict()
    attn = _attention_prefixes(model)
    breakdown = {c: 0 for c in CATEGORIES}
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        rows.setdefault(layer, CostRow(layer)).params += p.data.size
        breakdown[_param_category(name, p.role, attn)] += p.data.size
    if input_hw is not None:
        for layer, macs in model.mac_rows(*input_hw):
            rows.setdefault(layer, CostRow(layer)).macs += macs
    return CostReport(list(rows.values()), input_hw, breakdown)


def count_params(model: Model) -> CostReport:
    return cost_report(model)


def count_macs(model: Model, input_hw) -> CostReport:
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    return cost_report(model, tuple(input_hw))


def duplicated_bn_params(model: Model) -> int:
    """Parameters of the extra per-step BN layers of all top-down blocks."""
    total = 0
    for blk in model.blocks:
        if blk.td is not None:
            total += sum(p.data.size for bns in blk.td.step_bns for bn in bns for p in (bn.weight, bn.bias))
    return total
