"""CIFAR binary ingestion, flip/crop augmentation and synthetic spatial tasks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

# Widely published per-channel statistics of the training splits (pixels scaled to [0, 1]).
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

CIFAR_SHAPE = (3, 32, 32)
CIFAR_VARIANTS = {
    # label bytes, which label byte is the class, class count, train files, test files
    "cifar10": (1, 0, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100-fine": (2, 1, 100, ["train.bin"], ["test.bin"]),
}
CIFAR_STATS = {"cifar10": (CIFAR10_MEAN, CIFAR10_STD), "cifar100-fine": (CIFAR100_MEAN, CIFAR100_STD)}

DATA_DIR_ENV = "SHUFFLECONV_DATA_DIR"


@dataclass
class LabeledImage:
    pixels: np.ndarray  # C x H x W, [0, 1]
    label: int
    split: str = "train"


@dataclass
class Dataset:
    """A split held as arrays; ``mean``/``std`` standardize batches on the way out."""

    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledImage]:
        for img, label in zip(self.images, self.labels):
            yield LabeledImage(img, int(label), self.split)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.classes, self.split, self.mean, self.std)

    def standardize(self, images: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return images
        return standardize(images, self.mean, self.std)


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (images - mean) / std


def unstandardize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return images * std + mean


# --- CIFAR binary records ---------------------------------------------------------------------

def read_records(path, label_bytes: int, label_index: int, shape=CIFAR_SHAPE) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 pixels (N x C x H x W) and labels from a headerless record file."""
    raw = np.fromfile(path, dtype=np.uint8)
    pixels = int(np.prod(shape))
    record = label_bytes + pixels
    if raw.size == 0:
        raise ValueError(f"{path}: empty file")
    if raw.size % record:
        whole = raw.size // record
        raise ValueError(f"{path}: truncated record at byte offset {whole * record} "
                         f"(file is {raw.size} bytes, record length {record})")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_index].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, *shape)
    return images, labels


def write_records(path, images: np.ndarray, labels: np.ndarray, label_bytes: int = 1,
                  label_index: int = 0, coarse: np.ndarray | None = None) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise TypeError("records store uint8 pixels; quantize first")
    n = len(images)
    out = np.zeros((n, label_bytes + images[0].size), dtype=np.uint8)
    out[:, label_index] = labels
    if coarse is not None and label_bytes == 2:
        out[:, 1 - label_index] = coarse
    out[:, label_bytes:] = images.reshape(n, -1)
    out.tofile(path)


def to_unit(images_u8: np.ndarray) -> np.ndarray:
    return images_u8.astype(np.float64) / 255.0


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def load_cifar(path, variant: str = "cifar100-fine") -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory of CIFAR binary files (or one file for both)."""
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"variant must be one of {sorted(CIFAR_VARIANTS)}, got {variant!r}")
    label_bytes, label_index, classes, train_files, test_files = CIFAR_VARIANTS[variant]
    mean, std = (np.asarray(v) for v in CIFAR_STATS[variant])
    path = Path(path)

    def load(files, split):
        paths = [path] if path.is_file() else [path / f for f in files]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {missing}")
        parts = [read_records(p, label_bytes, label_index) for p in paths]
        images = np.concatenate([to_unit(im) for im, _ in parts])
        labels = np.concatenate([lb for _, lb in parts])
        return Dataset(images, labels, classes, split, mean, std)

    return load(train_files, "train"), load(test_files, "test")


# --- augmentation -----------------------------------------------------------------------------

def flip(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1]


def pad_crop(pixels: np.ndarray, offset: tuple[int, int], pad: int = 4) -> np.ndarray:
    c, h, w = pixels.shape[-3:]
    padded = np.pad(pixels, [(0, 0)] * (pixels.ndim - 2) + [(pad, pad), (pad, pad)])
    dy, dx = offset
    return padded[..., dy:dy + h, dx:dx + w]


def augment(img: LabeledImage, rng: np.random.Generator, enabled: bool = True, pad: int = 4,
            do_flip: bool | None = None, offset: tuple[int, int] | None = None) -> LabeledImage:
    """Random horizontal flip, then zero-pad by ``pad`` and crop back to the original size.

    ``do_flip`` and ``offset`` force the random decisions.
    """
    if not enabled:
        return img
    if do_flip is None:
        do_flip = bool(rng.random() < 0.5)
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    pixels = flip(img.pixels) if do_flip else img.pixels
    return LabeledImage(np.ascontiguousarray(pad_crop(pixels, offset, pad)), img.label, img.split)


def augment_batch(images: np.ndarray, rng: np.random.Generator, enabled: bool = True, pad: int = 4) -> np.ndarray:
    """Vectorized :func:`augment` over an N x C x H x W batch (same decision order per image)."""
    if not enabled:
        return images
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rows = offsets[:, 0, None] + np.arange(h)  # (n, h)
    cols = offsets[:, 1, None] + np.arange(w)
    return padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def iterate_batches(data: Dataset, batch_size: int, rng: np.random.Generator | None = None,
                    augment_enabled: bool = False, dtype=np.float64):
    """Yield standardized (images, labels) batches; order shuffled only when ``rng`` is given."""
    order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        images = data.images[idx]
        if augment_enabled:
            images = augment_batch(images, rng)
        yield data.standardize(images).astype(dtype, copy=False), data.labels[idx]


# --- synthetic spatial tasks ------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpatialTask:
    """Two families of toy classification problems.

    ``position``: one fixed glyph; the class is the image region it sits in.
    ``texture``: the class is which glyph is drawn, at random positions.
    """

    seed: int = 0
    size: int = 16
    family: str = "texture"
    classes: int = 4
    channels: int = 3
    glyph: int = 5
    glyph_pixels: int = 10
    copies: int = 1
    noise: float = 0.15

    def __post_init__(self):
        if self.family not in ("position", "texture"):
            raise ValueError(f"family must be 'position' or 'texture', got {self.family!r}")
        if self.glyph > self.size:
            raise ValueError("glyph larger than the image")


def glyph_bank(task: SyntheticSpatialTask) -> np.ndarray:
    """``classes`` distinct binary g x g masks, each with ``glyph_pixels`` set pixels and a full bounding box."""
    rng = np.random.default_rng([task.seed, 0x6171])
    g, m = task.glyph, task.glyph_pixels
    bank: list[np.ndarray] = []
    while len(bank) < max(task.classes, 1):
        mask = np.zeros(g * g, dtype=bool)
        mask[rng.choice(g * g, size=m, replace=False)] = True
        mask = mask.reshape(g, g)
        if not (mask[0].any() and mask[-1].any() and mask[:, 0].any() and mask[:, -1].any()):
            continue
        if any(np.array_equal(mask, other) for other in bank):
            continue
        bank.append(mask)
    return np.stack(bank)


def region_grid(classes: int) -> tuple[int, int]:
    rows = int(np.sqrt(classes))
    while classes % rows:
        rows -= 1
    return rows, classes // rows


def _split_code(split: str) -> int:
    return {"train": 1, "test": 2}.get(split, 3)


def gen_synthetic(task: SyntheticSpatialTask, n: int, split: str = "train") -> Dataset:
    """A balanced, reproducible stream of ``n`` images for ``task``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng([task.seed, _split_code(split)])
    bank = glyph_bank(task)
    s, g, c = task.size, task.glyph, task.channels
    labels = rng.permutation(np.arange(n) % task.classes)
    images = rng.random((n, c, s, s)) * task.noise
    rows, cols = region_grid(task.classes)
    for i, label in enumerate(labels):
        if task.family == "position":
            r, col = divmod(int(label), cols)
            y0, y1 = r * s // rows, (r + 1) * s // rows - g
            x0, x1 = col * s // cols, (col + 1) * s // cols - g
            spots = [(int(rng.integers(y0, max(y1, y0) + 1)), int(rng.integers(x0, max(x1, x0) + 1)))]
            mask = bank[0]
        else:
            spots = _free_spots(rng, s, g, task.copies)
            mask = bank[label]
        for y, x in spots:
            color = rng.uniform(0.6, 1.0, size=c)
            patch = images[i, :, y:y + g, x:x + g]
            patch[:, mask] = color[:, None]
    return Dataset(images, labels.astype(np.int64), task.classes, split,
                   np.full(c, 0.5), np.full(c, 0.25))


def _free_spots(rng, size, g, copies):
    spots: list[tuple[int, int]] = []
    for _ in range(100 * copies):
        if len(spots) == copies:
            break
        y, x = (int(v) for v in rng.integers(0, size - g + 1, size=2))
        if all(abs(y - yy) >= g or abs(x - xx) >= g for yy, xx in spots):
            spots.append((y, x))
    return spots


def save_dataset(data: Dataset, path, task: SyntheticSpatialTask | None = None) -> None:
    """Write a split in the CIFAR-10 record layout plus a JSON sidecar with its shape."""
    path = Path(path)
    write_records(path, to_uint8(data.images), data.labels)
    meta = {"shape": list(data.shape), "classes": data.classes, "split": data.split, "label_bytes": 1,
            "mean": None if data.mean is None else list(map(float, data.mean)),
            "std": None if data.std is None else list(map(float, data.std)),
            "task": None if task is None else asdict(task)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    images, labels = read_records(path, meta["label_bytes"], 0, tuple(meta["shape"]))
    mean = None if meta["mean"] is None else np.asarray(meta["mean"])
    std = None if meta["std"] is None else np.asarray(meta["std"])
    return Dataset(to_unit(images), labels, meta["classes"], meta["split"], mean, std)
