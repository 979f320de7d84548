"""ResNet-style backbones with optional top-down, SE or CBAM blocks.

A top-down block with feedback distance ``m`` takes as bottom map the input
to the last ``m`` convolutions of its main path and as top map the main-path
output before the residual add. The top-down loop replaces the plain pass
through those ``m`` convolutions; the shortcut is untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .attention import (
    AttentionTrace,
    Cbam,
    CbamConfig,
    FeedbackSpan,
    SeConfig,
    SqueezeExcite,
    TdamConfig,
    TopDown,
    tdam_forward,
)
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class TdSpec:
    """Top-down settings shared by every TD block of a model."""

    kind: str = "joint"
    steps: int = 2
    feedback_distance: int = 1
    reduction: int = 16
    variant: str = "chn_then_sp"
    sigmoid_filter: bool = False

    @classmethod
    def parse(cls, text: str, **extra) -> Optional["TdSpec"]:
        """Parse ``"top,t2,m1"`` style strings; ``"none"`` gives ``None``."""
        text = text.strip()
        if text in ("", "none"):
            return None
        kw: dict = {}
        for part in text.split(","):
            part = part.strip()
            if part in ("joint", "top"):
                kw["kind"] = part
            elif part[:1] == "t" and part[1:].isdigit():
                kw["steps"] = int(part[1:])
            elif part[:1] == "m" and part[1:].isdigit():
                kw["feedback_distance"] = int(part[1:])
            elif part[:1] == "r" and part[1:].isdigit():
                kw["reduction"] = int(part[1:])
            else:
                raise ValueError(f"bad top-down spec component {part!r} in {text!r}")
        kw.update(extra)
        return cls(**kw)

    def label(self) -> str:
        return f"{self.kind},t{self.steps},m{self.feedback_distance}"


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int
    td: Optional[TdamConfig] = None
    se: Optional[SeConfig] = None
    cbam: Optional[CbamConfig] = None

    @property
    def n_convs(self) -> int:
        return 3 if self.kind == "bottleneck" else 2


@dataclass(frozen=True)
class ModelConfig:
    block: str = "basic"
    widths: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 2, 2)
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    num_classes: int = 10
    td: Optional[TdSpec] = None
    # 1-based stage numbers carrying TD blocks ("layers 3 and 4")
    td_stages: tuple = (3, 4)
    # explicit ((stage, block), ...) list; overrides td_stages when given
    td_blocks: Optional[tuple] = None
    baseline: Optional[str] = None
    baseline_stages: tuple = (1, 2, 3, 4)
    baseline_reduction: int = 16
    cbam_kernel: int = 7

    def __post_init__(self):
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"block must be 'basic' or 'bottleneck', got {self.block!r}")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if self.baseline not in (None, "se", "cbam"):
            raise ValueError(f"baseline must be se, cbam or None, got {self.baseline!r}")

    def with_td(self, td: Optional[TdSpec]) -> "ModelConfig":
        return replace(self, td=td)

    def td_positions(self) -> set:
        if self.td is None:
            return set()
        n_stages = len(self.blocks)
        if self.td_blocks is not None:
            pos = {tuple(p) for p in self.td_blocks}
        else:
            pos = {(s, b) for s in self.td_stages if 1 <= s <= n_stages for b in range(self.blocks[s - 1])}
            bad = [s for s in self.td_stages if not 1 <= s <= n_stages]
            if bad:
                raise ValueError(f"TD policy names stages {bad}, model has {n_stages}")
        for s, b in pos:
            if not (1 <= s <= n_stages and 0 <= b < self.blocks[s - 1]):
                raise ValueError(f"TD policy references missing block layer{s}.{b}")
        return pos

    def block_specs(self) -> list[BlockSpec]:
        td_pos = self.td_positions()
        base_stages = set(self.baseline_stages) if self.baseline else set()
        if td_pos & {(s, b) for s in base_stages for b in range(self.blocks[s - 1]) if s <= len(self.blocks)}:
            raise ValueError("a block may carry at most one attention module (TD overlaps baseline)")
        specs = []
        expansion = 4 if self.block == "bottleneck" else 1
        in_ch = self.stem_channels
        for si, (width, count) in enumerate(zip(self.widths, self.blocks), start=1):
            for bi in range(count):
                stride = 2 if (bi == 0 and si > 1) else 1
                mid = width // expansion
                n_convs = 3 if self.block == "bottleneck" else 2
                td = se = cbam = None
                if (si, bi) in td_pos:
                    m = self.td.feedback_distance
                    if m > n_convs:
                        raise ValueError(f"feedback distance {m} exceeds the {n_convs} convs of layer{si}.{bi}")
                    conv_in = [in_ch] + [mid] * (n_convs - 1)
                    td = TdamConfig(
                        bottom_channels=conv_in[n_convs - m],
                        top_channels=width,
                        kind=self.td.kind,
                        steps=self.td.steps,
                        feedback_distance=m,
                        reduction=self.td.reduction,
                        variant=self.td.variant,
                        sigmoid_filter=self.td.sigmoid_filter,
                    )
                elif si in base_stages and self.baseline == "se":
                    se = SeConfig(width, self.baseline_reduction)
                elif si in base_stages and self.baseline == "cbam":
                    cbam = CbamConfig(width, self.baseline_reduction, self.cbam_kernel)
                specs.append(BlockSpec(f"layer{si}.{bi}", self.block, in_ch, mid, width, stride, td, se, cbam))
                in_ch = width
        return specs


def resnet50_config(num_classes: int = 1000, **kw) -> ModelConfig:
    return ModelConfig(
        block="bottleneck",
        widths=(256, 512, 1024, 2048),
        blocks=(3, 4, 6, 3),
        stem_channels=64,
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        num_classes=num_classes,
        **kw,
    )


def toy_config(num_classes: int = 10, **kw) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, **kw)


@dataclass
class ForwardState:
    trace: bool = False
    per_step: bool = False
    capture: frozenset = frozenset()
    traces: list = field(default_factory=list)  # [(block name, AttentionTrace)]
    features: dict = field(default_factory=dict)  # layer name -> [Tensor per step]
    logits: Optional[Tensor] = None
    step_logits: list = field(default_factory=list)


class Block(Module):
    def __init__(self, spec: BlockSpec):
        self.spec = spec
        self.name = spec.name
        i, m, o, s = spec.in_channels, spec.mid_channels, spec.out_channels, spec.stride
        if spec.kind == "bottleneck":
            self.convs = [Conv2d(i, m, 1), Conv2d(m, m, 3, s, 1), Conv2d(m, o, 1)]
        else:
            self.convs = [Conv2d(i, m, 3, s, 1), Conv2d(m, o, 3, 1, 1)]
        self.bns = [BatchNorm2d(c.out_ch) for c in self.convs]
        if s != 1 or i != o:
            self.down_conv = Conv2d(i, o, 1, s)
            self.down_bn = BatchNorm2d(o)
        else:
            self.down_conv = self.down_bn = None
        n = len(self.convs)
        # the last conv always runs inside the span: no ReLU before the residual add
        self.span_start = n - spec.td.feedback_distance if spec.td else n - 1
        self.td = TopDown(spec.td, [c.out_ch for c in self.convs[self.span_start :]]) if spec.td else None
        self.se = SqueezeExcite(spec.se) if spec.se else None
        self.cbam = Cbam(spec.cbam) if spec.cbam else None

    def span(self) -> FeedbackSpan:
        k = self.span_start
        bn_sets = [self.bns[k:]] + (self.td.step_bns if self.td else [])
        return FeedbackSpan(self.convs[k:], bn_sets)

    def __call__(self, x: Tensor, state: Optional[ForwardState] = None, all_steps: bool = False):
        identity = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        h = x
        for conv, bn in zip(self.convs[: self.span_start], self.bns[: self.span_start]):
            h = ops.relu(bn(conv(h)))
        span = self.span()
        captured = state is not None and self.name in state.capture
        if self.td is not None:
            want = all_steps or captured or (state is not None and state.trace)
            top, record = tdam_forward(span, h, self.td.cfg, self.td, trace=want)
            if state is not None and state.trace:
                state.traces.append((self.name, record))
            if all_steps or captured:
                outs = [ops.relu(ops.add(st.output, identity)) for st in record.steps[:-1]]
                outs.append(ops.relu(ops.add(top, identity)))
            else:
                outs = [ops.relu(ops.add(top, identity))]
        else:
            h = span(h, 0)
            if self.se is not None:
                h = self.se(h)
            if self.cbam is not None:
                h = self.cbam(h)
            outs = [ops.relu(ops.add(h, identity))]
        if captured:
            state.features[self.name] = [o.retain_grad() for o in outs]
        return outs if all_steps else outs[-1]

    def add_macs(self, rows: list, h: int, w: int) -> tuple[int, int]:
        steps = self.td.cfg.steps if self.td else 1
        bottom_hw = (h, w)
        hh, ww = h, w
        for i, conv in enumerate(self.convs):
            if i == self.span_start:
                bottom_hw = (hh, ww)
            mult = steps if i >= self.span_start else 1
            rows.append((f"{self.name}.convs.{i}", conv.macs(hh, ww) * mult))
            hh, ww = conv.out_hw(hh, ww)
        if self.down_conv is not None:
            rows.append((f"{self.name}.down_conv", self.down_conv.macs(h, w)))
        if self.td is not None and steps > 1:
            cfg = self.td.cfg
            c0, hb, wb = cfg.bottom_channels, bottom_hw[0], bottom_hw[1]
            if cfg.variant == "conv_map":
                rows.append((f"{self.name}.td.conv_map", self.td.conv_map.macs(hb, wb) * (steps - 1)))
            else:
                rows.append((f"{self.name}.td.searchlight", self.td.searchlight.macs() * (steps - 1)))
                # channel gate, 1x1 searchlight filter, spatial gate: one MAC per bottom element each
                per = {"chn_only": 1, "sp_only": 2}.get(cfg.variant, 3)
                rows.append((f"{self.name}.td.gating", per * c0 * hb * wb * (steps - 1)))
        if self.se is not None:
            rows.append((f"{self.name}.se", self.se.macs(self.spec.out_channels, hh, ww)))
        if self.cbam is not None:
            rows.append((f"{self.name}.cbam", self.cbam.macs(self.spec.out_channels, hh, ww)))
        return hh, ww


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        k = cfg.stem_kernel
        self.stem_conv = Conv2d(3, cfg.stem_channels, k, cfg.stem_stride, (k - 1) // 2)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        specs = cfg.block_specs()
        self.block_specs = specs
        stages: dict = {}
        for spec in specs:
            stages.setdefault(spec.name.split(".")[0], []).append(Block(spec))
        for name, blocks in stages.items():
            setattr(self, name, blocks)
        self.stage_names = list(stages)
        self.fc = Linear(cfg.widths[-1], cfg.num_classes)
        td_idx = [i for i, b in enumerate(self.blocks) if b.td is not None]
        self.last_td = td_idx[-1] if td_idx else None

    @property
    def blocks(self) -> list[Block]:
        return [b for s in self.stage_names for b in getattr(self, s)]

    @property
    def min_input(self) -> int:
        f = self.cfg.stem_stride * (2 if self.cfg.stem_pool else 1)
        return f * 2 ** (len(self.cfg.widths) - 1)

    def head(self, h: Tensor) -> Tensor:
        return self.fc(ops.flatten(ops.global_avg_pool(h)))

    def run(self, x: Tensor, trace: bool = False, per_step: bool = False, capture: Sequence[str] = ()) -> ForwardState:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {x.shape}")
        if min(x.shape[2:]) < self.min_input:
            raise ValueError(f"input {x.shape[2]}x{x.shape[3]} below the minimum size {self.min_input}")
        if per_step and self.last_td is None:
            raise ValueError("per-step logits need at least one top-down block")
        state = ForwardState(trace=trace, per_step=per_step, capture=frozenset(capture))
        h = ops.relu(self.stem_bn(self.stem_conv(x)))
        if self.cfg.stem_pool:
            h = ops.max_pool2d(h, 3, 2, 1)
        if "stem" in state.capture:
            state.features["stem"] = [h.retain_grad()]
        blocks = self.blocks
        step_outs = None
        for i, blk in enumerate(blocks):
            if per_step and i == self.last_td:
                step_outs = blk(h, state, all_steps=True)
                h = step_outs[-1]
            else:
                h = blk(h, state)
        state.logits = self.head(h)
        if per_step:
            for o in step_outs[:-1]:
                for blk in blocks[self.last_td + 1 :]:
                    o = blk(o)
                state.step_logits.append(self.head(o))
            state.step_logits.append(state.logits)
        return state

    def __call__(self, x: Tensor) -> Tensor:
        return self.run(x).logits

    def mac_rows(self, h: int, w: int) -> list[tuple[str, int]]:
        rows = [("stem_conv", self.stem_conv.macs(h, w))]
        h, w = self.stem_conv.out_hw(h, w)
        if self.cfg.stem_pool:
            h, w = ops.conv_out_size(h, 3, 2, 1), ops.conv_out_size(w, 3, 2, 1)
        for blk in self.blocks:
            h, w = blk.add_macs(rows, h, w)
        rows.append(("fc", self.fc.macs()))
        return rows


def build_model(cfg: ModelConfig, rng: Union[int, np.random.Generator] = 0) -> Model:
    """Construct and initialize a model; ``rng`` is a seed or a generator to draw one from."""
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    model = Model(cfg)
    model.init_weights(seed)
    return model


def forward(model: Model, x: Tensor, mode: str = "eval", trace: bool = False) -> tuple[Tensor, list]:
    """Logits and (when ``trace``) the ``[(block name, AttentionTrace)]`` list."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    model.train(mode == "train")
    state = model.run(x, trace=trace)
    return state.logits, state.traces


@dataclass
class StepLogits:
    logits: list  # per step, (B, K) arrays
    confidences: np.ndarray  # (T, B) max softmax probability

    def most_confident(self) -> np.ndarray:
        """Per-sample index of the most confident step (first on ties)."""
        return self.confidences.argmax(axis=0)

    def selected(self) -> np.ndarray:
        choice = self.most_confident()
        stacked = np.stack(self.logits)
        return stacked[choice, np.arange(stacked.shape[1])]


def per_step_logits(model: Model, x: Tensor) -> StepLogits:
    """Classifier output on the final feature map of every step of the last TD block (eval mode)."""
    model.eval()
    with no_grad():
        state = model.run(x, per_step=True)
    logits = [t.data for t in state.step_logits]
    conf = np.stack([ops.softmax(l).max(axis=1) for l in logits])
    return StepLogits(logits, conf)


@dataclass(frozen=True)
class SmallCnnConfig:
    num_classes: int = 10
    width: int = 32
    pool: str = "global_max"


class SmallCnn(Module):
    """Two 3x3 conv layers, a global pool and a linear head.

    The learnability reference for the synthetic data; it exposes the
    slice of the ``Model`` interface that training and evaluation use.
    """

    last_td = None
    min_input = 1

    def __init__(self, cfg: SmallCnnConfig):
        self.cfg = cfg
        self.conv1 = Conv2d(3, cfg.width, 3, 1, 1, bias=True)
        self.conv2 = Conv2d(cfg.width, cfg.width, 3, 1, 1, bias=True)
        self.fc = Linear(cfg.width, cfg.num_classes)

    def run(self, x: Tensor, **_) -> ForwardState:
        h = ops.relu(self.conv2(ops.relu(self.conv1(x))))
        state = ForwardState()
        state.logits = self.fc(ops.flatten(ops.pool(self.cfg.pool, h)))
        return state

    def __call__(self, x: Tensor) -> Tensor:
        return self.run(x).logits


def build_small_cnn(cfg: SmallCnnConfig, seed: int = 0) -> SmallCnn:
    model = SmallCnn(cfg)
    model.init_weights(seed)
    return model
