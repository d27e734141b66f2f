"""Dataset sources: synthetic spirals and blobs, numeric CSV, and IDX image/label pairs."""
from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .prng import Rng
from .trainer import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


def spirals(n: int, noise: float = 0.0, seed: int = 0, turns: float = 1.5) -> Dataset:
    """Two interleaved spirals; class ``c`` is rotated by ``c * pi``."""
    if n < 2:
        raise DataError("spirals need n >= 2")
    rng = Rng.derive(seed, "spirals")
    x = np.empty((n, 2), dtype=np.float64)
    y = np.empty(n, dtype=np.int64)
    for k in range(n):
        c = k % 2
        t = math.sqrt(rng.random())
        theta = t * turns * 2.0 * math.pi + c * math.pi
        r = t
        x[k, 0] = r * math.cos(theta) + noise * rng.normal()
        x[k, 1] = r * math.sin(theta) + noise * rng.normal()
        y[k] = c
    return Dataset(x, y, 2)


def blobs(n: int, k: int = 3, dim: int = 2, spread: float = 0.5, seed: int = 0) -> Dataset:
    """``k`` isotropic Gaussian clusters with centres drawn uniformly from [-3, 3]^dim."""
    if n < 2 or k < 2:
        raise DataError("blobs need n >= 2 and k >= 2")
    rng = Rng.derive(seed, "blobs")
    centers = (rng.uniform_array(k * dim).reshape(k, dim) - 0.5) * 6.0
    y = np.arange(n, dtype=np.int64) % k
    x = centers[y] + spread * rng.normal_array((n, dim))
    return Dataset(x, y, k)


def read_csv(path: str | Path, num_classes: int) -> Dataset:
    """Numeric rows; the last column is an integer label in ``[0, num_classes)``."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                values = [float(c) for c in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field") from exc
            if label_f != int(label_f) or not 0 <= int(label_f) < num_classes:
                raise DataError(f"{path}:{lineno}: label {row[-1]} out of range for {num_classes} classes")
            rows.append(values)
            labels.append(int(label_f))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.asarray(rows), np.asarray(labels), num_classes)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DataError("truncated label file")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise DataError(f"bad label magic 0x{magic:08x}")
    if len(buf) - 8 < count:
        raise DataError("truncated label file")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def parse_idx_images(buf: bytes) -> np.ndarray:
    """Images as float32 rows in [0, 1], one flattened image per row."""
    if len(buf) < 16:
        raise DataError("truncated image file")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"bad image magic 0x{magic:08x}")
    size = count * rows * cols
    if len(buf) - 16 < size:
        raise DataError("truncated image file")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=size, offset=16)
    return (pixels.reshape(count, rows * cols) / np.float32(255.0)).astype(np.float32)


def read_idx(image_path: str | Path, label_path: str | Path, num_classes: int) -> Dataset:
    images = parse_idx_images(Path(image_path).read_bytes())
    labels = parse_idx_labels(Path(label_path).read_bytes())
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} out of range for {num_classes} classes")
    return Dataset(images, labels, num_classes)


def write_idx(image_path: str | Path, label_path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(label_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


def split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle with the portable PRNG, then cut off the validation tail."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    order = Rng.derive(seed, "split").permutation(len(data))
    n_val = int(round(len(data) * val_fraction))
    n_train = len(data) - n_val
    if n_val == 0 or n_train == 0:
        raise DataError("empty split")
    tr, va = order[:n_train], order[n_train:]
    return (
        Dataset(data.x[tr], data.y[tr], data.num_classes),
        Dataset(data.x[va], data.y[va], data.num_classes),
    )


def load_dataset(spec: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Build ``(train, val)`` from a ``data`` config section."""
    source = spec.get("source")
    val_fraction = float(spec.get("val_fraction", 0.2))
    if source == "synthetic-spirals":
        data = spirals(int(spec.get("n", 1000)), float(spec.get("noise", 0.0)), seed, float(spec.get("turns", 1.5)))
    elif source == "synthetic-blobs":
        data = blobs(
            int(spec.get("n", 1000)),
            int(spec.get("k", 3)),
            int(spec.get("dim", 2)),
            float(spec.get("spread", 0.5)),
            seed,
        )
    elif source == "csv":
        data = read_csv(spec["path"], int(spec["num_classes"]))
        if "val_path" in spec:
            return data, read_csv(spec["val_path"], int(spec["num_classes"]))
    elif source == "idx":
        data = read_idx(spec["images"], spec["labels"], int(spec["num_classes"]))
        if "val_images" in spec:
            return data, read_idx(spec["val_images"], spec["val_labels"], int(spec["num_classes"]))
    else:
        raise DataError(f"unknown data source {source!r}")
    return split(data, val_fraction, seed)
