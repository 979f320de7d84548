"""Top-down searchlight attention and the SE / CBAM baselines.

A top-down block runs its feedforward span ``steps`` times. Between passes,
a searchlight vector ``S`` (one value per bottom channel) is computed from the
pooled top output (and, for ``joint``, the pooled bottom input). ``S`` gates
the bottom channels through ``sigmoid(S)`` and, used raw as a single 1x1
filter over the channel-gated map, produces a spatial logit map ``A`` whose
sigmoid gates locations. The gated bottom map is the next step's input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import ShapeError, Tensor

KINDS = ("joint", "top")
VARIANTS = ("chn_then_sp", "sp_then_chn", "chn_parallel_sp", "chn_only", "sp_only", "conv_map")
# reported as not converging when trained; flagged by the ablation runner
EXPECTED_DIVERGENT = frozenset({"sp_then_chn", "sp_only"})


def reduced(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


@dataclass(frozen=True)
class TdamConfig:
    bottom_channels: int
    top_channels: int
    kind: str = "joint"
    steps: int = 2
    feedback_distance: int = 1
    reduction: int = 16
    variant: str = "chn_then_sp"
    # use sigmoid(S) instead of raw S as the 1x1 spatial filter
    sigmoid_filter: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attention kind must be one of {KINDS}, got {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"attention variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.feedback_distance < 1:
            raise ValueError(f"feedback distance must be >= 1, got {self.feedback_distance}")
        if self.reduction < 1 or self.bottom_channels < 1 or self.top_channels < 1:
            raise ValueError("channel counts and reduction must be positive")

    @property
    def top_hidden(self) -> int:
        return reduced(self.top_channels, self.reduction)

    @property
    def bottom_hidden(self) -> int:
        return reduced(self.bottom_channels, self.reduction) if self.kind == "joint" else 0


class SearchlightWeights(Module):
    """MLP producing the searchlight: ``w_t`` (top), ``w_b`` (bottom, joint only), ``w_s``."""

    category = "attention"

    def __init__(self, cfg: TdamConfig):
        self.kind = cfg.kind
        self.top_channels, self.bottom_channels = cfg.top_channels, cfg.bottom_channels
        self.w_t = Linear(cfg.top_channels, cfg.top_hidden)
        self.w_b = Linear(cfg.bottom_channels, cfg.bottom_hidden) if cfg.kind == "joint" else None
        self.w_s = Linear(cfg.top_hidden + cfg.bottom_hidden, cfg.bottom_channels)

    def macs(self) -> int:
        total = self.w_t.macs() + self.w_s.macs()
        return total + (self.w_b.macs() if self.w_b is not None else 0)


def _pooled(x: Tensor, channels: int, what: str) -> Tensor:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{what} map has shape {x.shape}, expected {channels} channels")
    return ops.flatten(ops.global_avg_pool(x))


def searchlight_joint(top: Tensor, bottom: Tensor, w: SearchlightWeights) -> Tensor:
    """``S = W_s relu([W_t gap(top); W_b gap(bottom)])``, shape (B, C0)."""
    if w.w_b is None:
        raise ValueError("joint searchlight needs bottom weights (kind='joint')")
    ht = w.w_t(_pooled(top, w.top_channels, "top"))
    hb = w.w_b(_pooled(bottom, w.bottom_channels, "bottom"))
    return w.w_s(ops.relu(ops.concat([ht, hb], axis=1)))


def searchlight_top(top: Tensor, w: SearchlightWeights) -> Tensor:
    """``S = W_s relu(W_t gap(top))``; the bottom map plays no part."""
    return w.w_s(ops.relu(w.w_t(_pooled(top, w.top_channels, "top"))))


def searchlight(top: Tensor, bottom: Tensor, w: SearchlightWeights) -> Tensor:
    if w.kind == "joint":
        return searchlight_joint(top, bottom, w)
    return searchlight_top(top, w)


def _attend(
    bottom: Tensor,
    s: Optional[Tensor],
    variant: str,
    conv: Optional[Conv2d] = None,
    sigmoid_filter: bool = False,
) -> tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    """Return (next input, spatial logits A or None, channel-gated map or None)."""
    if variant == "conv_map":
        if conv is None:
            raise ValueError("conv_map variant needs its 1x1 convolution")
        return ops.relu(conv(bottom)), None, None
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}")
    b, c = bottom.shape[:2]
    if s.shape != (b, c):
        raise ShapeError(f"searchlight shape {s.shape} does not match bottom map {bottom.shape}")
    chn_gate = ops.sigmoid(ops.reshape(s, (b, c, 1, 1)))
    filt = ops.sigmoid(s) if sigmoid_filter else s

    if variant == "chn_then_sp":
        scaled = ops.mul(bottom, chn_gate)
        a = ops.pointwise_conv_filter(filt, scaled)
        return ops.mul(scaled, ops.sigmoid(a)), a, scaled
    if variant == "chn_only":
        scaled = ops.mul(bottom, chn_gate)
        return scaled, None, scaled
    a = ops.pointwise_conv_filter(filt, bottom)
    sp_gate = ops.sigmoid(a)
    if variant == "sp_then_chn":
        return ops.mul(ops.mul(bottom, sp_gate), chn_gate), a, None
    if variant == "chn_parallel_sp":
        scaled = ops.mul(bottom, chn_gate)
        return ops.mul(scaled, sp_gate), a, scaled
    return ops.mul(bottom, sp_gate), a, None  # sp_only


def apply_attention(
    bottom: Tensor,
    s: Optional[Tensor],
    variant: str = "chn_then_sp",
    conv: Optional[Conv2d] = None,
    sigmoid_filter: bool = False,
) -> Tensor:
    """Gate ``bottom`` (B, C0, H, W) with searchlight ``s`` (B, C0)."""
    return _attend(bottom, s, variant, conv, sigmoid_filter)[0]


@dataclass
class TraceStep:
    output: Tensor  # X^N_t, graph-connected
    searchlight: Optional[np.ndarray] = None  # (B, C0), absent on the last step
    channel_scaled_mean: Optional[np.ndarray] = None  # (B, C0) spatial mean of the gated map
    spatial_map: Optional[np.ndarray] = None  # (B, 1, H0, W0) pre-sigmoid


@dataclass
class AttentionTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


class FeedbackSpan:
    """The last ``m`` convolutions of a block, with one BN set per computation step.

    ``bns[t][i]`` normalizes conv ``i`` at step ``t``; ReLU follows every conv but
    the last.
    """

    def __init__(self, convs: Sequence[Conv2d], bns: Sequence[Sequence[BatchNorm2d]]):
        self.convs = list(convs)
        self.bns = [list(b) for b in bns]

    def __call__(self, x: Tensor, step: int = 0) -> Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = self.bns[step][i](conv(x))
            if i < last:
                x = ops.relu(x)
        return x


class TopDown(Module):
    """Weights of one top-down block: the searchlight MLP (or feedback conv) and
    the duplicated BN layers for computation steps 2..T."""

    category = "attention"

    def __init__(self, cfg: TdamConfig, span_widths: Sequence[int]):
        self.cfg = cfg
        if cfg.variant == "conv_map":
            self.searchlight = None
            self.conv_map = Conv2d(cfg.bottom_channels, cfg.bottom_channels, 1)
        else:
            self.searchlight = SearchlightWeights(cfg)
            self.conv_map = None
        self.step_bns = [[BatchNorm2d(c) for c in span_widths] for _ in range(cfg.steps - 1)]


def tdam_forward(
    span: Callable[[Tensor, int], Tensor],
    x0: Tensor,
    cfg: TdamConfig,
    weights: TopDown,
    trace: bool = False,
) -> tuple[Tensor, Optional[AttentionTrace]]:
    """Iterate ``span`` over ``cfg.steps`` computation steps with top-down gating.

    ``span(x, t)`` is the feedforward sub-block using step ``t``'s BN state.
    With one step this is exactly ``span(x0, 0)``.
    """
    record = AttentionTrace() if trace else None
    x = x0
    top = None
    for t in range(cfg.steps):
        top = span(x, t)
        if t == cfg.steps - 1:
            if record is not None:
                record.steps.append(TraceStep(output=top))
            break
        s = None
        if cfg.variant != "conv_map":
            s = searchlight(top, x, weights.searchlight)
        nxt, a, scaled = _attend(x, s, cfg.variant, weights.conv_map, cfg.sigmoid_filter)
        if record is not None:
            record.steps.append(
                TraceStep(
                    output=top,
                    searchlight=None if s is None else s.data.copy(),
                    channel_scaled_mean=None if scaled is None else scaled.data.mean(axis=(2, 3)),
                    spatial_map=None if a is None else a.data.copy(),
                )
            )
        x = nxt
    return top, record


# ------------------------------------------------------------------ baselines


@dataclass(frozen=True)
class SeConfig:
    channels: int
    reduction: int = 16


@dataclass(frozen=True)
class CbamConfig:
    channels: int
    reduction: int = 16
    kernel: int = 7

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"CBAM spatial kernel must be odd, got {self.kernel}")


class SqueezeExcite(Module):
    category = "attention"

    def __init__(self, cfg: SeConfig):
        self.cfg = cfg
        hidden = reduced(cfg.channels, cfg.reduction)
        self.fc1 = Linear(cfg.channels, hidden)
        self.fc2 = Linear(hidden, cfg.channels)

    def __call__(self, x: Tensor) -> Tensor:
        return se_forward(x, self)

    def macs(self, c: int, h: int, w: int) -> int:
        return self.fc1.macs() + self.fc2.macs() + c * h * w


def se_forward(x: Tensor, w: SqueezeExcite) -> Tensor:
    b, c = x.shape[:2]
    if c != w.cfg.channels:
        raise ShapeError(f"SE expects {w.cfg.channels} channels, got {c}")
    z = w.fc2(ops.relu(w.fc1(ops.flatten(ops.global_avg_pool(x)))))
    return ops.mul(x, ops.sigmoid(ops.reshape(z, (b, c, 1, 1))))


class Cbam(Module):
    category = "attention"

    def __init__(self, cfg: CbamConfig):
        self.cfg = cfg
        hidden = reduced(cfg.channels, cfg.reduction)
        self.fc1 = Linear(cfg.channels, hidden)
        self.fc2 = Linear(hidden, cfg.channels)
        self.conv = Conv2d(2, 1, cfg.kernel, pad=(cfg.kernel - 1) // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return cbam_forward(x, self)

    def macs(self, c: int, h: int, w: int) -> int:
        mlp = 2 * (self.fc1.macs() + self.fc2.macs())
        return mlp + self.conv.macs(h, w) + 2 * c * h * w


def cbam_forward(x: Tensor, w: Cbam) -> Tensor:
    b, c = x.shape[:2]
    if c != w.cfg.channels:
        raise ShapeError(f"CBAM expects {w.cfg.channels} channels, got {c}")

    def mlp(v):
        return w.fc2(ops.relu(w.fc1(ops.flatten(v))))

    z = ops.add(mlp(ops.pool("global_avg", x)), mlp(ops.pool("global_max", x)))
    xc = ops.mul(x, ops.sigmoid(ops.reshape(z, (b, c, 1, 1))))
    desc = ops.concat([ops.channel_mean(xc), ops.channel_max(xc)], axis=1)
    return ops.mul(xc, ops.sigmoid(w.conv(desc)))
