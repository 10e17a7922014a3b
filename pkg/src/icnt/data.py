"""ImageFolder ingestion: scanning, decoding, resizing, normalization, splitting, batching."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import parallel

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg"}


class DataError(Exception):
    pass


@dataclass
class DatasetIndex:
    root: Path
    class_names: list[str]
    records: list[tuple[Path, int]]
    skipped: int = 0

    @property
    def counts(self) -> list[int]:
        out = [0] * len(self.class_names)
        for _, c in self.records:
            out[c] += 1
        return out

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Sequence[tuple[Path, int]]) -> "DatasetIndex":
        return DatasetIndex(self.root, list(self.class_names), list(records), 0)


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0
    stratified: bool = True

    def validate(self) -> None:
        ratios = (self.train, self.val, self.test)
        if any(r < 0 for r in ratios):
            raise ValueError(f"split ratios must be >= 0, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {ratios} (sum {sum(ratios)})")


def scan_image_folder(root) -> DatasetIndex:
    """Index ``root/<class>/<image>``; classes and files in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist or is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    if len(class_dirs) < 2:
        raise DataError(f"data root {root} needs at least 2 class subdirectories, found {len(class_dirs)}")
    records: list[tuple[Path, int]] = []
    skipped = 0
    empty = []
    for ci, d in enumerate(class_dirs):
        n_before = len(records)
        for f in sorted(d.iterdir()):
            if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES and not f.name.startswith("."):
                records.append((f, ci))
            else:
                skipped += 1
        if len(records) == n_before:
            empty.append(d.name)
    if empty:
        raise DataError(f"class director{'y' if len(empty) == 1 else 'ies'} without images: {', '.join(empty)}")
    if skipped:
        log.warning("skipped %d non-image entries under %s", skipped, root)
    return DatasetIndex(root, [d.name for d in class_dirs], records, skipped)


def decode_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB image to an H x W x C uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
                raise DataError(f"{path}: 16-bit images are not supported")
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {mode!r} (need 8-bit gray or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except (OSError, UnidentifiedImageError, ValueError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr)


def encode_image(path, img: np.ndarray) -> None:
    """Write an H x W x {1,3} uint8 array; format follows the suffix (.pgm/.ppm/.png)."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img).save(Path(path))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False), float32 output."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    src = np.asarray(img, dtype=np.float32)
    if src.ndim == 2:
        src = src[:, :, None]
    h, w = src.shape[:2]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = (pos - i0).astype(np.float32)
        return i0, i1, frac

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    rows = src[y0] * (1 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    out = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.clip(out, 0, 255).astype(np.float32)


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def normalize(img: np.ndarray, in_channels: int = 1) -> np.ndarray:
    """Map [0, 255] HWC pixels to [-1, 1] CHW with mean = std = 0.5."""
    x = np.asarray(img, dtype=np.float32)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] == 1 and in_channels == 3:
        x = np.repeat(x, 3, axis=2)
    elif x.shape[2] == 3 and in_channels == 1:
        x = (x @ _LUMA)[:, :, None]
    y = (x / np.float32(255.0) - np.float32(0.5)) / np.float32(0.5)
    return np.ascontiguousarray(np.clip(y, -1, 1).transpose(2, 0, 1))


def load_sample(path, img_size: int, in_channels: int) -> np.ndarray:
    return normalize(resize_bilinear(decode_image(path), img_size, img_size), in_channels)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(index: DatasetIndex, spec: SplitSpec | None = None) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Seeded per-class shuffle, then cut each class at the cumulative ratio boundaries."""
    spec = spec or SplitSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    groups: list[list[int]]
    if spec.stratified:
        groups = [[] for _ in index.class_names]
        for i, (_, c) in enumerate(index.records):
            groups[c].append(i)
        missing = [index.class_names[c] for c, g in enumerate(groups) if not g]
        if missing:
            raise DataError(f"classes without records: {', '.join(missing)}")
    else:
        groups = [list(range(len(index.records)))]
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for g in groups:
        order = [g[j] for j in rng.permutation(len(g))]
        n = len(order)
        a = _round_half_up(spec.train * n)
        b = _round_half_up((spec.train + spec.val) * n)
        parts[0].extend(order[:a])
        parts[1].extend(order[a:b])
        parts[2].extend(order[b:])
    return tuple(index.subset([index.records[i] for i in sorted(p)]) for p in parts)  # type: ignore[return-value]


@dataclass
class LoadedSplit:
    images: np.ndarray  # N x C x S x S float32
    labels: np.ndarray  # N int64
    paths: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def load_split(index: DatasetIndex, img_size: int, in_channels: int = 1) -> LoadedSplit:
    """Decode every record of ``index`` into one normalized array (order preserved)."""
    if not index.records:
        return LoadedSplit(
            np.zeros((0, in_channels, img_size, img_size), np.float32),
            np.zeros(0, np.int64), [], list(index.class_names),
        )
    images = parallel.map_items(lambda rec: load_sample(rec[0], img_size, in_channels), index.records)
    return LoadedSplit(
        np.stack(images).astype(np.float32),
        np.array([c for _, c in index.records], dtype=np.int64),
        [str(p) for p, _ in index.records],
        list(index.class_names),
    )


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    paths: list[str]
    indices: np.ndarray


def batch_iterator(
    split: LoadedSplit, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0
) -> Iterator[Batch]:
    """Yield batches; the shuffle permutation is a function of (seed, epoch) only."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DataError("cannot iterate over an empty split")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            split.images[idx],
            split.labels[idx],
            [split.paths[i] for i in idx] if split.paths else [],
            idx,
        )
