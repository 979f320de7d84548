"""SGD training loop, evaluation across resolutions, and the ablation grid."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .attention import EXPECTED_DIVERGENT, VARIANTS
from .backbone import Model, ModelConfig, TdSpec, build_model
from .cost import count_macs
from .data import Dataset, augment, batches, resize_dataset, split
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_MODES = ("final_step", "most_confident_step")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    seed: int = 0
    loss_mode: str = "final_step"
    val_fraction: float = 0.2
    flip: bool = False
    crop: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, lr >= 0 and momentum in [0, 1) required")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"schedule must be cosine or step, got {self.schedule!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / max(self.epochs, 1)))
        step = max(1, self.epochs // 3)
        return self.lr * 0.1 ** (epoch // step)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.batch, self.lr = epoch, batch, lr


class SGD:
    """Heavy-ball momentum with L2 weight decay added to the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_top1: float
    val_top1: float
    lr: float


def log_to_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "train_top1", "val_top1", "lr"])
    for r in rows:
        w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.train_top1:.6f}", f"{r.val_top1:.6f}", f"{r.lr:.8g}"])
    return buf.getvalue()


def _logits(model: Model, x: Tensor, loss_mode: str) -> Tensor:
    if loss_mode == "most_confident_step" and model.last_td is not None:
        steps = model.run(x, per_step=True).step_logits
        conf = np.stack([ops.softmax(s.data).max(axis=1) for s in steps])
        return ops.select_rows(steps, conf.argmax(axis=0))
    return model.run(x).logits


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
) -> tuple[Model, list[EpochLog]]:
    """Train in place. Without ``val``, ``dataset`` is split by ``cfg.val_fraction``."""
    if model.cfg.num_classes != dataset.num_classes:
        raise ValueError(f"model has {model.cfg.num_classes} classes, dataset {dataset.num_classes}")
    train_ds, val_ds = (dataset, val) if val is not None else split(dataset, cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0xBA7C4])
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for bi, idx in enumerate(batches(len(train_ds), cfg.batch_size, rng)):
            xb = train_ds.images[idx]
            if cfg.flip or cfg.crop:
                xb = augment(xb, rng, cfg.flip, cfg.crop)
            yb = train_ds.labels[idx]
            logits = _logits(model, Tensor(xb.astype(model.fc.weight.dtype, copy=False)), cfg.loss_mode)
            loss = ops.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, bi, lr)
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)
        val_top1 = evaluate(model, val_ds, loss_mode=cfg.loss_mode).top1 if len(val_ds) else float("nan")
        row = EpochLog(epoch + 1, total_loss / max(seen, 1), correct / max(seen, 1), val_top1, lr)
        log.info("epoch %d loss %.4f train %.4f val %.4f lr %.4g", *vars(row).values())
        history.append(row)
    model.eval()
    return model, history


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    resolutions: list
    top1_by_res: dict  # resolution -> accuracy
    top5_by_res: dict  # resolution -> accuracy, None when K < 5
    per_class: dict  # resolution -> list of per-class accuracy

    @property
    def top1(self) -> float:
        """Top-1 at the first requested resolution."""
        return self.top1_by_res[self.resolutions[0]]

    @property
    def top5(self) -> Optional[float]:
        return self.top5_by_res[self.resolutions[0]]

    @property
    def monotone(self) -> bool:
        """Top-5 never below top-1 at any resolution."""
        return all(
            self.top5_by_res[r] is None or self.top5_by_res[r] >= self.top1_by_res[r] for r in self.resolutions
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resolution", "top1", "top5"])
        for r in self.resolutions:
            t5 = "" if self.top5_by_res[r] is None else f"{self.top5_by_res[r]:.6f}"
            w.writerow([r, f"{self.top1_by_res[r]:.6f}", t5])
        return buf.getvalue()


def predict_logits(model: Model, images: np.ndarray, loss_mode: str = "final_step", batch_size: int = 200) -> np.ndarray:
    model.eval()
    out = []
    dtype = model.fc.weight.dtype
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size].astype(dtype, copy=False))
            out.append(_logits(model, x, loss_mode).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate(
    model: Model,
    dataset: Dataset,
    resolutions: Optional[Iterable[int]] = None,
    loss_mode: str = "final_step",
) -> EvalReport:
    """Eval-mode accuracy at each resolution (bilinear, antialiased resize)."""
    res_list = list(resolutions) if resolutions is not None else [dataset.image_size]
    for r in res_list:
        if r < model.min_input:
            raise ValueError(f"resolution {r} below the model minimum {model.min_input}")
    k = dataset.num_classes
    top1, top5, per_class = {}, {}, {}
    for r in res_list:
        ds = resize_dataset(dataset, r)
        logits = predict_logits(model, ds.images, loss_mode)
        y = ds.labels
        hit1 = logits.argmax(axis=1) == y
        top1[r] = float(hit1.mean()) if len(y) else float("nan")
        if k >= 5:
            order = np.argsort(-logits, axis=1, kind="stable")[:, :5]
            top5[r] = float((order == y[:, None]).any(axis=1).mean())
        else:
            top5[r] = None
        per_class[r] = [float(hit1[y == c].mean()) if (y == c).any() else float("nan") for c in range(k)]
    return EvalReport(res_list, top1, top5, per_class)


# ------------------------------------------------------------------ ablation


@dataclass
class AblationRow:
    label: str
    kind: str
    m: int
    t: int
    variant: str
    params: int
    macs: int
    top1: float
    converged: bool
    expected_divergent: bool


ABLATION_HEADER = ["config", "kind", "m", "t", "variant", "params", "macs", "top1", "converged", "expected_divergent"]


def ablation_grid(
    kinds: Sequence[str] = ("joint", "top"),
    ms: Sequence[int] = (1, 2),
    ts: Sequence[int] = (1, 2, 3),
    variants: Sequence[str] = VARIANTS,
) -> list[Optional[TdSpec]]:
    """Grid points, pruned: one variant at t=1 (no feedback happens), one kind for conv_map."""
    grid: list = []
    for kind, m, t, var in itertools.product(kinds, ms, ts, variants):
        if t == 1 and var != variants[0]:
            continue
        if var == "conv_map" and kind != kinds[0]:
            continue
        grid.append(TdSpec(kind=kind, steps=t, feedback_distance=m, variant=var))
    return grid


def run_ablation(
    grid: Sequence[Optional[TdSpec]],
    base: ModelConfig,
    train_cfg: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    include_baseline: bool = True,
) -> list[AblationRow]:
    """Train every configuration with the same seed and budget; divergence is recorded, not raised."""
    points = ([None] if include_baseline else []) + list(grid)
    rows = []
    chance = math.log(train_ds.num_classes)
    for td in points:
        cfg = replace(base, td=td)
        model = build_model(cfg, train_cfg.seed)
        report = count_macs(model, train_ds.image_size)
        converged, top1 = True, float("nan")
        try:
            _, hist = train(model, train_ds, train_cfg, val=val_ds)
            top1 = hist[-1].val_top1 if hist else evaluate(model, val_ds).top1
            if hist and not hist[-1].loss < chance:
                converged = False
        except TrainingDiverged as e:
            log.warning("ablation %s diverged: %s", td.label() if td else "baseline", e)
            converged = False
        rows.append(
            AblationRow(
                label=f"{td.label()},{td.variant}" if td else "baseline",
                kind=td.kind if td else "-",
                m=td.feedback_distance if td else 0,
                t=td.steps if td else 0,
                variant=td.variant if td else "-",
                params=report.total_params,
                macs=report.total_macs,
                top1=top1,
                converged=converged,
                expected_divergent=bool(td and td.variant in EXPECTED_DIVERGENT),
            )
        )
    return rows


def ablation_to_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow(
            [r.label, r.kind, r.m, r.t, r.variant, r.params, r.macs, f"{r.top1:.6f}", int(r.converged), int(r.expected_divergent)]
        )
    return buf.getvalue()
