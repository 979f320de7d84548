"""Grad-CAM per computation step, CAM boxes, localization accuracy, attention shift."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from . import _kernels, ops
from .backbone import Model
from .data import Dataset, resize, to_uint8
from .tensor import Tensor

DEFAULT_FRAC = 0.15


class AnalysisError(ValueError):
    pass


@dataclass
class CamMap:
    values: np.ndarray  # (h, w) at the layer resolution, >= 0
    upsampled: np.ndarray  # (H, W) aligned to the input
    class_k: int
    step: int
    layer: str

    def normalized(self) -> np.ndarray:
        """Upsampled map scaled to [0, 1]; all zeros when the map is empty."""
        m = float(self.upsampled.max())
        return self.upsampled / m if m > 0 else np.zeros_like(self.upsampled)


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float  # exclusive
    y1: float  # exclusive
    class_k: int = -1
    score: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise AnalysisError(f"degenerate box {self.x0},{self.y0},{self.x1},{self.y1}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def coords(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)


# ------------------------------------------------------------------ Grad-CAM


def layer_names(model: Model) -> list[str]:
    return ["stem"] + [b.name for b in model.blocks]


def default_layer(model: Model) -> str:
    """Output of the final block, i.e. the last conv of the final stage after its residual add."""
    return model.blocks[-1].name


def num_steps(model: Model) -> int:
    return model.blocks[model.last_td].td.cfg.steps if model.last_td is not None else 1


def _check_layer_step(model: Model, layer: str, step: int) -> None:
    names = layer_names(model)
    if layer not in names:
        raise AnalysisError(f"unknown layer {layer!r}; choose from {', '.join(names)}")
    t = num_steps(model)
    if not 0 <= step < t:
        raise AnalysisError(f"step {step} out of range for a model with {t} computation step(s)")
    if step < t - 1:
        pos = names.index(layer) - 1  # block index, -1 for the stem
        if pos > model.last_td:
            raise AnalysisError(f"layer {layer!r} lies after the last top-down block and only sees the final step")
        if pos == model.last_td or model.blocks[pos].td is None:
            return
        if step >= model.blocks[pos].td.cfg.steps:
            raise AnalysisError(f"layer {layer!r} has fewer than {step + 1} steps")


def grad_cam_batch(
    model: Model,
    images: np.ndarray,
    classes: Sequence[int],
    layer: Optional[str] = None,
    step: Optional[int] = None,
) -> list[CamMap]:
    """Grad-CAM for every image in a batch, each w.r.t. its own class.

    ``step`` indexes the computation steps of the last top-down block; the
    logits of that step are differentiated with respect to the layer's
    feature map at the same step. Defaults: final block, final step.
    """
    layer = layer or default_layer(model)
    t = num_steps(model)
    step = t - 1 if step is None else int(step)
    _check_layer_step(model, layer, step)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if len(classes) != len(images):
        raise AnalysisError(f"{len(classes)} classes for {len(images)} images")
    if ((classes < 0) | (classes >= model.cfg.num_classes)).any():
        raise AnalysisError(f"class index outside [0, {model.cfg.num_classes})")

    model.eval()
    x = Tensor(images.astype(model.fc.weight.dtype, copy=False))
    state = model.run(x, per_step=model.last_td is not None, capture=[layer])
    logits = state.step_logits[step] if model.last_td is not None else state.logits
    feats = state.features[layer]
    feat = feats[step] if len(feats) > 1 else feats[0]
    if len(feats) > 1 and step >= len(feats):
        raise AnalysisError(f"layer {layer!r} has no step {step}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(classes)), classes] = 1
    target = ops.sum_all(ops.mul(logits, Tensor(onehot)))
    if target.requires_grad:
        target.backward()
    grad = feat.grad if feat.grad is not None else np.zeros_like(feat.data)
    model.zero_grad()

    alpha = grad.mean(axis=(2, 3), keepdims=True)
    maps = np.maximum((alpha * feat.data).sum(axis=1), 0)
    up = np.maximum(resize(maps, images.shape[-2:]), 0)
    return [CamMap(maps[i], up[i], int(classes[i]), step, layer) for i in range(len(classes))]


def grad_cam(model: Model, x, class_k: int, layer: Optional[str] = None, step: Optional[int] = None) -> CamMap:
    """Single-image Grad-CAM; ``x`` is (3, H, W) or (1, 3, H, W)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 4 and data.shape[0] != 1:
        raise AnalysisError("grad_cam takes one image; use grad_cam_batch for several")
    return grad_cam_batch(model, data.reshape((1,) + data.shape[-3:]), [class_k], layer, step)[0]


def cam_from_features(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum for one (C, h, w) map."""
    alpha = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, features, axes=1), 0)


def step_cams(
    model: Model,
    images: np.ndarray,
    classes: Sequence[int],
    layer: Optional[str] = None,
    batch_size: int = 100,
) -> np.ndarray:
    """Upsampled CAMs for every step, shaped (N, T, H, W)."""
    t = num_steps(model)
    out = np.zeros((len(images), t) + images.shape[-2:], dtype=np.float64)
    classes = np.asarray(classes)
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        for s in range(t):
            for j, cam in enumerate(grad_cam_batch(model, images[sl], classes[sl], layer, s)):
                out[start + j, s] = cam.upsampled
    return out


# ------------------------------------------------------------------ boxes


def extract_bbox(cam: Union[CamMap, np.ndarray], frac: float = DEFAULT_FRAC, class_k: Optional[int] = None) -> BBox:
    """Tight box around the largest 4-connected region at or above ``frac * max``.

    Size ties go to the component whose first pixel comes earlier in
    row-major order.
    """
    if isinstance(cam, CamMap):
        values, class_k = cam.upsampled, cam.class_k if class_k is None else class_k
    else:
        values = np.asarray(cam)
    if values.ndim != 2:
        raise AnalysisError(f"expected a 2D map, got shape {values.shape}")
    peak = float(values.max()) if values.size else 0.0
    if not peak > 0:
        raise AnalysisError("empty activation")
    mask = values >= frac * peak
    labels, n = _kernels.label(mask)
    # labels follow raster order of first pixels, so argmax's first-hit rule is the tie-break
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    best = int(sizes.argmax()) + 1
    ys, xs = np.nonzero(labels == best)
    score = float(values[labels == best].sum() / values[mask].sum())
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, -1 if class_k is None else int(class_k), score)


def iou(a, b) -> float:
    """Intersection over union of two end-exclusive boxes (BBox or (x0, y0, x1, y1))."""
    ax0, ay0, ax1, ay1 = a.coords() if isinstance(a, BBox) else a
    bx0, by0, bx1, by1 = b.coords() if isinstance(b, BBox) else b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0 else 0.0


# ------------------------------------------------------------------ localization


@dataclass
class LocRow:
    image: int
    class_ok: bool
    iou: float
    loc_ok: bool


@dataclass
class LocReport:
    top1: float
    top5: Optional[float]
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "class_ok", "iou", "loc_ok"])
        for r in self.rows:
            w.writerow([r.image, int(r.class_ok), f"{r.iou:.6f}", int(r.loc_ok)])
        return buf.getvalue()


def localization_accuracy(
    model: Model,
    ds: Dataset,
    frac: float = DEFAULT_FRAC,
    step: Union[str, int] = "most_confident",
    layer: Optional[str] = None,
    batch_size: int = 100,
) -> LocReport:
    """Top-k localization: class among the top k and CAM box IoU >= 0.5 with the truth.

    The box comes from the CAM of the ground-truth class (identical to the
    predicted class whenever the top-1 check passes). For top-down models
    ``step`` picks the most confident step per image, or a fixed index.
    """
    if not ds.boxes:
        raise AnalysisError("dataset carries no ground-truth boxes")
    from .train import predict_logits

    k = ds.num_classes
    logits = predict_logits(model, ds.images)
    labels = ds.labels
    top1_ok = logits.argmax(axis=1) == labels
    top5_ok = (np.argsort(-logits, axis=1, kind="stable")[:, :5] == labels[:, None]).any(axis=1) if k >= 5 else None

    t = num_steps(model)
    if step == "most_confident" and t > 1:
        from .backbone import per_step_logits

        choice = np.concatenate(
            [per_step_logits(model, Tensor(ds.images[s : s + batch_size])).most_confident() for s in range(0, len(ds), batch_size)]
        )
        cams = step_cams(model, ds.images, labels, layer, batch_size)
        maps = cams[np.arange(len(ds)), choice]
    else:
        s = t - 1 if step == "most_confident" else int(step)
        maps = np.concatenate(
            [
                np.stack([c.upsampled for c in grad_cam_batch(model, ds.images[i : i + batch_size], labels[i : i + batch_size], layer, s)])
                for i in range(0, len(ds), batch_size)
            ]
        )

    rows = []
    for i in range(len(ds)):
        gt = ds.box_for(i)
        if gt is None:
            raise AnalysisError(f"sample {i} has no box for its class")
        try:
            overlap = iou(extract_bbox(maps[i], frac), gt[1:])
        except AnalysisError:
            overlap = 0.0
        rows.append(LocRow(i, bool(top1_ok[i]), overlap, bool(top1_ok[i]) and overlap >= 0.5))
    hit = np.array([r.iou >= 0.5 for r in rows], dtype=bool)
    top1 = float((top1_ok & hit).mean()) if len(rows) else float("nan")
    top5 = float((top5_ok & hit).mean()) if top5_ok is not None and len(rows) else None
    return LocReport(top1, top5, rows)


# ------------------------------------------------------------------ attention shift


@dataclass
class DivergenceRow:
    image: int
    step_pair: str
    correlation: Optional[float]
    box_iou: Optional[float]
    argmax_dist: float


@dataclass
class DivergenceReport:
    rows: list
    degenerate: int  # pairs whose correlation is undefined (a constant map)

    def _mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_correlation(self) -> float:
        return self._mean("correlation")

    @property
    def mean_box_iou(self) -> float:
        return self._mean("box_iou")

    @property
    def mean_argmax_dist(self) -> float:
        return self._mean("argmax_dist")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "step_pair", "correlation", "box_iou", "argmax_dist"])
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        for r in self.rows:
            w.writerow([r.image, r.step_pair, fmt(r.correlation), fmt(r.box_iou), fmt(r.argmax_dist)])
        return buf.getvalue()


def _pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else None


def _argmax_yx(m: np.ndarray) -> np.ndarray:
    return np.array(np.unravel_index(int(m.argmax()), m.shape), dtype=np.float64)


def step_divergence(cams, frac: float = DEFAULT_FRAC) -> DivergenceReport:
    """Compare consecutive-step maps per image.

    ``cams`` is an (N, T, H, W) array or a list (per image) of per-step
    CamMaps. Maps are normalized to [0, 1] before comparison.
    """
    if isinstance(cams, np.ndarray):
        arr = cams
    else:
        arr = np.stack([np.stack([c.upsampled for c in per]) for per in cams])
    if arr.ndim != 4 or arr.shape[1] < 2:
        raise AnalysisError("step divergence needs (N, T, H, W) maps with T >= 2")
    rows, degenerate = [], 0
    for i in range(arr.shape[0]):
        norm = []
        for m in arr[i]:
            peak = float(m.max())
            norm.append(m / peak if peak > 0 else np.zeros_like(m))
        for t in range(arr.shape[1] - 1):
            a, b = norm[t], norm[t + 1]
            corr = _pearson(a, b)
            degenerate += corr is None
            try:
                box = iou(extract_bbox(a, frac), extract_bbox(b, frac))
            except AnalysisError:
                box = None
            dist = float(np.linalg.norm(_argmax_yx(a) - _argmax_yx(b)))
            rows.append(DivergenceRow(i, f"{t}-{t + 1}", corr, box, dist))
    return DivergenceReport(rows, degenerate)


def save_cams(path: Union[str, Path], cams: np.ndarray, classes: Optional[np.ndarray] = None) -> None:
    """Store per-step maps so a divergence report can be rebuilt later."""
    extra = {} if classes is None else {"classes": np.asarray(classes)}
    with open(path, "wb") as f:
        np.savez(f, cams=np.asarray(cams), **extra)


def load_cams(path: Union[str, Path]) -> np.ndarray:
    with np.load(path) as z:
        return z["cams"]


# ------------------------------------------------------------------ heatmaps

# Fixed 256-entry colormap: linear ramps between these stops (blue, cyan, yellow, red).
_STOPS = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
_STOP_RGB = np.array(
    [[0, 0, 143], [0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0], [128, 0, 0]], dtype=np.float64
)
COLORMAP = np.stack(
    [np.round(np.interp(np.linspace(0, 1, 256), _STOPS, _STOP_RGB[:, ch])) for ch in range(3)], axis=1
).astype(np.uint8)
ALPHA = 0.5


def heatmap_rgb(cam: Union[CamMap, np.ndarray], image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 blend of ``image`` (3, H, W in [0, 1]) and the color-mapped CAM."""
    norm = cam.normalized() if isinstance(cam, CamMap) else np.asarray(cam, dtype=np.float64)
    if not isinstance(cam, CamMap):
        peak = float(norm.max()) if norm.size else 0.0
        norm = norm / peak if peak > 0 else np.zeros_like(norm)
    if norm.shape != image.shape[-2:]:
        norm = np.clip(resize(norm, image.shape[-2:]), 0, 1)
    color = COLORMAP[np.clip(np.round(norm * 255), 0, 255).astype(np.int64)].astype(np.float64)
    base = to_uint8(image).astype(np.float64)
    return np.clip(np.round((1 - ALPHA) * base + ALPHA * color), 0, 255).astype(np.uint8)


def export_heatmap(cam: Union[CamMap, np.ndarray], image: np.ndarray, out_path: Union[str, Path]) -> Path:
    out_path = Path(out_path)
    Image.fromarray(heatmap_rgb(cam, image), "RGB").save(out_path, format="PNG")
    return out_path
