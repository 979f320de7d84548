"""Synthetic datasets, PNG directory I/O and antialiased bilinear resizing."""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from PIL import Image

Box = tuple  # (class index, x0, y0, x1, y1), pixels, end-exclusive


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    boxes: list = field(default_factory=list)  # per sample: list of Box
    class_names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        boxes = [self.boxes[i] for i in idx] if self.boxes else []
        return Dataset(self.images[idx], self.labels[idx], boxes, list(self.class_names))

    def box_for(self, i: int, cls: Optional[int] = None) -> Optional[Box]:
        """First ground-truth box of sample ``i`` for ``cls`` (default: its label)."""
        cls = int(self.labels[i]) if cls is None else cls
        for b in self.boxes[i] if self.boxes else ():
            if b[0] == cls:
                return b
        return None

    def sample_hashes(self) -> list[str]:
        return [hashlib.sha1(img.tobytes()).hexdigest() for img in self.images]


def class_names(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"c{k:0{width}d}" for k in range(n)]


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# ------------------------------------------------------------------ glyphs

_PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.20],
        [0.15, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.25, 0.95],
        [0.60, 0.95, 0.30],
        [0.95, 0.45, 0.60],
    ],
    dtype=np.float32,
)


def glyph_table(n: int, size: int = 4, seed: int = 1234) -> np.ndarray:
    """``n`` distinct binary ``size x size`` patterns, half the cells on.

    Drawn greedily from a fixed stream so that every pair differs in at least
    a quarter of its cells.
    """
    rng = np.random.default_rng(seed)
    cells = size * size
    min_dist = max(1, cells // 4)
    out: list[np.ndarray] = []
    while len(out) < n:
        g = np.zeros(cells, dtype=bool)
        g[rng.choice(cells, cells // 2, replace=False)] = True
        if all((g != h).sum() >= min_dist for h in out):
            out.append(g)
    return np.stack(out).reshape(n, size, size)


def _shape_mask(kind: int, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2
    r = s / 2
    d2 = (yy - c) ** 2 + (xx - c) ** 2
    shapes = [
        np.ones((s, s), bool),  # square
        d2 <= r * r,  # disk
        yy >= np.abs(xx - c) * 2 - 0.5,  # triangle
        (np.abs(yy - c) <= s / 6) | (np.abs(xx - c) <= s / 6),  # cross
        (d2 <= r * r) & (d2 >= (r * 0.5) ** 2),  # ring
        np.abs(yy - c) + np.abs(xx - c) <= r,  # diamond
        (yy % 4) < 2,  # horizontal stripes
        (xx % 4) < 2,  # vertical stripes
    ]
    return shapes[kind % len(shapes)]


def _object_appearance(k: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    return _shape_mask(k, s), _PALETTE[k % len(_PALETTE)]


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray, y: int, x: int) -> None:
    h, w = mask.shape
    region = img[:, y : y + h, x : x + w]
    region[:, mask] = color[:, None]


# -------------------------------------------------------------- generators


def fine_sample(rng: np.random.Generator, label: int, size: int, glyphs: np.ndarray) -> tuple[np.ndarray, Box]:
    """One fine-grained image: noisy background, a blob 'body', and a class glyph on it.

    Random draws do not depend on ``label``; two calls from identical
    generator states differ only inside the glyph box.
    """
    part = glyphs.shape[-1]
    if part + 4 > size:
        raise DatasetError(f"part size {part} does not fit a {size}x{size} image")
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = rng.uniform(0.3, 0.6, size=(3, 1, 1))
    img += rng.normal(0, 0.04, size=img.shape).astype(np.float32)
    bw = int(rng.integers(max(part + 2, size // 3), max(part + 3, size * 3 // 4) + 1))
    bh = int(rng.integers(max(part + 2, size // 3), max(part + 3, size * 3 // 4) + 1))
    bw, bh = min(bw, size), min(bh, size)
    by, bx = int(rng.integers(0, size - bh + 1)), int(rng.integers(0, size - bw + 1))
    yy, xx = np.mgrid[0:bh, 0:bw]
    body = ((yy - (bh - 1) / 2) / (bh / 2)) ** 2 + ((xx - (bw - 1) / 2) / (bw / 2)) ** 2 <= 1.0
    body_color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    _paint(img, body, body_color, by, bx)
    py = by + int(rng.integers(0, bh - part + 1))
    px = bx + int(rng.integers(0, bw - part + 1))
    on_color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    on_color = np.where(body_color > 0.5, on_color * 0.3, 0.7 + on_color * 0.3).astype(np.float32)
    glyph = glyphs[label]
    _paint(img, glyph, on_color, py, px)
    _paint(img, ~glyph, body_color, py, px)
    np.clip(img, 0.0, 1.0, out=img)
    return img, (int(label), px, py, px + part, py + part)


def texture_table(n: int, part: int, cell: int = 4, seed: int = 1234) -> np.ndarray:
    """Class textures: each ``cell x cell`` glyph tiled to fill a ``part x part`` patch."""
    glyphs = glyph_table(n, cell, seed)
    reps = -(-part // cell)
    return np.tile(glyphs, (1, reps, reps))[:, :part, :part]


def gen_fine_grained(
    n_classes: int, n_per_class: int, image_size: int = 32, rng=0, part_size: int = 8, cell: int = 4
) -> Dataset:
    """Classes share a base scene and differ only in a small texture patch at a random spot."""
    if n_classes < 2:
        raise DatasetError("need at least 2 classes")
    rng = _as_rng(rng)
    glyphs = texture_table(n_classes, part_size, min(cell, part_size))
    n = n_classes * n_per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    boxes = []
    for i, k in enumerate(labels):
        images[i], box = fine_sample(rng, int(k), image_size, glyphs)
        boxes.append([box])
    return Dataset(images, labels.astype(np.int64), boxes, class_names(n_classes))


def _overlaps(a: Box, b: Box) -> bool:
    return not (a[3] <= b[1] or b[3] <= a[1] or a[4] <= b[2] or b[4] <= a[2])


def gen_two_object(
    n_classes: int, n_per_class: int, image_size: int = 32, rng=0, max_tries: int = 100
) -> Dataset:
    """Two objects of distinct classes on a noisy background; the label is the larger one."""
    if n_classes < 2:
        raise DatasetError("need at least 2 classes")
    big = max(4, image_size * 3 // 8)
    small = max(3, image_size // 4)
    if big + small > image_size:
        raise DatasetError(f"image size {image_size} too small for two objects")
    rng = _as_rng(rng)
    n = n_classes * n_per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    boxes = []
    for i, k in enumerate(labels):
        other = int(rng.integers(0, n_classes - 1))
        other += other >= k
        img = rng.uniform(0.0, 0.25, size=(3, 1, 1)) + rng.normal(0, 0.03, size=(3, image_size, image_size))
        img = img.astype(np.float32)
        placed: list = []
        for cls, s in ((int(k), big), (other, small)):
            for _ in range(max_tries):
                y, x = int(rng.integers(0, image_size - s + 1)), int(rng.integers(0, image_size - s + 1))
                box = (cls, x, y, x + s, y + s)
                if not any(_overlaps(box, p) for p in placed):
                    break
            else:
                raise DatasetError(f"could not place two disjoint objects after {max_tries} tries")
            mask, color = _object_appearance(cls, s)
            _paint(img, mask, color, y, x)
            placed.append(box)
        images[i] = np.clip(img, 0.0, 1.0)
        boxes.append(placed)
    return Dataset(images, labels.astype(np.int64), boxes, class_names(n_classes))


def gen_bright_object(
    n_classes: int, n_per_class: int, image_size: int = 32, rng=0, min_size: Optional[int] = None
) -> Dataset:
    """A single bright object on an exactly zero background."""
    if n_classes < 2:
        raise DatasetError("need at least 2 classes")
    rng = _as_rng(rng)
    lo = min_size or max(4, image_size // 4)
    hi = max(lo, image_size // 2)
    n = n_classes * n_per_class
    images = np.zeros((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    boxes = []
    for i, k in enumerate(labels):
        s = int(rng.integers(lo, hi + 1))
        y, x = int(rng.integers(0, image_size - s + 1)), int(rng.integers(0, image_size - s + 1))
        mask, color = _object_appearance(int(k), s)
        _paint(images[i], mask, color, y, x)
        ys, xs = np.nonzero(mask)
        boxes.append([(int(k), x + int(xs.min()), y + int(ys.min()), x + int(xs.max()) + 1, y + int(ys.max()) + 1)])
    return Dataset(images, labels.astype(np.int64), boxes, class_names(n_classes))


GENERATORS = {"fine": gen_fine_grained, "two": gen_two_object, "bright": gen_bright_object}


def split(ds: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/val split; a fixed fraction of every class goes to val."""
    rng = np.random.default_rng([seed, 0x5EED])
    train_idx, val_idx = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx))


# ------------------------------------------------------------------ resize


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of antialiased bilinear (triangle filter) weights.

    Pixel centers sit at half-integers. When shrinking, the triangle widens by
    the scale factor so each output averages every input it covers.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    d = (np.arange(n_in) + 0.5)[None, :] - centers[:, None]
    w = np.clip(1.0 - np.abs(d) / support, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resize(images: np.ndarray, size: Union[int, tuple]) -> np.ndarray:
    """Resize the last two axes of ``images`` to ``size``."""
    oh, ow = (size, size) if isinstance(size, int) else size
    h, w = images.shape[-2:]
    if (oh, ow) == (h, w):
        return images
    wy = resize_weights(h, oh).astype(images.dtype)
    wx = resize_weights(w, ow).astype(images.dtype)
    return np.ascontiguousarray(np.einsum("ph,...hw,qw->...pq", wy, images, wx, optimize=True))


def resize_dataset(ds: Dataset, size: int) -> Dataset:
    if size == ds.image_size:
        return ds
    f = size / ds.image_size
    boxes = [[(b[0], b[1] * f, b[2] * f, b[3] * f, b[4] * f) for b in bs] for bs in ds.boxes]
    return Dataset(resize(ds.images, size), ds.labels, boxes, list(ds.class_names))


# ------------------------------------------------------------------ disk I/O


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] to (H, W, 3) uint8."""
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image_dir(ds: Dataset, root: Union[str, Path]) -> None:
    """Write ``root/<class>/<index>.png`` plus ``boxes.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters = {k: 0 for k in range(ds.num_classes)}
    rows = []
    for i in range(len(ds)):
        k = int(ds.labels[i])
        name = ds.class_names[k]
        (root / name).mkdir(exist_ok=True)
        rel = f"{name}/{counters[k]:05d}.png"
        counters[k] += 1
        Image.fromarray(to_uint8(ds.images[i])).save(root / rel, format="PNG")
        for b in ds.boxes[i] if ds.boxes else ():
            rows.append([rel, ds.class_names[b[0]], *(_fmt(v) for v in b[1:])])
    with open(root / "boxes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["filename", "class", "x0", "y0", "x1", "y1"])
        w.writerows(rows)


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def load_image_dir(root: Union[str, Path], size: Optional[int] = None) -> Dataset:
    """Read a ``root/<class>/<name>.png`` tree; class ids follow sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DatasetError(f"{root}: no classes found")
    images, labels, files = [], [], []
    for k, name in enumerate(names):
        for path in sorted((root / name).glob("*.png")):
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as e:
                raise DatasetError(f"{path}: unreadable image ({e})") from None
            img = arr.transpose(2, 0, 1)
            if size is not None:
                img = resize(img, size)
            images.append(np.ascontiguousarray(img))
            labels.append(k)
            files.append(f"{name}/{path.name}")
    if not images:
        raise DatasetError(f"{root}: no PNG images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing sizes {sorted(shapes)}; pass a size")
    orig = {}
    boxes: list = [[] for _ in images]
    csv_path = root / "boxes.csv"
    if csv_path.exists():
        index = {f: i for i, f in enumerate(files)}
        cls_index = {n: k for k, n in enumerate(names)}
        with open(csv_path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["filename", "class", "x0", "y0", "x1", "y1"]:
                raise DatasetError(f"{csv_path}:1: expected header filename,class,x0,y0,x1,y1")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 6:
                    raise DatasetError(f"{csv_path}:{lineno}: expected 6 columns, got {len(row)}")
                fname, cls = row[0], row[1]
                if fname not in index:
                    raise DatasetError(f"{csv_path}:{lineno}: unknown file {fname!r}")
                if cls not in cls_index:
                    raise DatasetError(f"{csv_path}:{lineno}: unknown class {cls!r}")
                try:
                    coords = [float(v) for v in row[2:]]
                except ValueError:
                    raise DatasetError(f"{csv_path}:{lineno}: non-numeric box coordinate") from None
                i = index[fname]
                if fname not in orig:
                    with Image.open(root / fname) as im:
                        orig[fname] = im.size[0]
                f_scale = images[i].shape[-1] / orig[fname]
                coords = [int(c) if c.is_integer() and f_scale == 1 else c * f_scale for c in coords]
                boxes[i].append((cls_index[cls], *coords))
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), boxes, names)


# ------------------------------------------------------------------ batching


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool = False, crop: int = 0) -> np.ndarray:
    out = images
    if flip:
        out = out.copy()
        sel = rng.random(len(out)) < 0.5
        out[sel] = out[sel][..., ::-1]
    if crop > 0:
        n, c, h, w = out.shape
        padded = np.pad(out, ((0, 0), (0, 0), (crop, crop), (crop, crop)), mode="reflect")
        dy = rng.integers(0, 2 * crop + 1, size=n)
        dx = rng.integers(0, 2 * crop + 1, size=n)
        out = np.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])
    return out


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def worker_count() -> int:
    return max(1, int(os.environ.get("TDAM_THREADS", "1")))
