"""Dataset ingestion, split management and deterministic batching.

Images are stored as float32 tensors in [0, 1]; attack budgets are
expressed in the same raw pixel units, so no further normalization is
applied to stored batches.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"

# Conventional IDX archive names (one pair per split).
IDX_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


class DataError(RuntimeError):
    """Raised when ingestion fails; the message names the offending file."""


@dataclass(frozen=True)
class DatasetSpec:
    """Identity and layout of one on-disk classification dataset."""

    name: str
    source_path: Path
    num_classes: int
    image_shape: tuple[int, int, int]  # (C, H, W)
    train_size: int
    test_size: int
    pixel_scale: float = 255.0  # raw byte value mapped to 1.0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.image_shape) != 3 or any(d <= 0 for d in self.image_shape):
            raise ValueError(f"bad image_shape {self.image_shape}")
        if self.train_size <= 0 or self.test_size <= 0:
            raise ValueError("split sizes must be positive")
        object.__setattr__(self, "source_path", Path(self.source_path))


_BUILTIN = {
    "mnist": dict(num_classes=10, image_shape=(1, 28, 28), train_size=60000, test_size=10000),
    "fashion-mnist": dict(num_classes=10, image_shape=(1, 28, 28), train_size=60000, test_size=10000),
    "synthetic-digits": dict(num_classes=10, image_shape=(1, 28, 28), train_size=10000, test_size=2000),
}


def builtin_spec(name: str, root: Path | str) -> DatasetSpec:
    """Spec for a known dataset rooted at ``root/<name>``."""
    if name not in _BUILTIN:
        raise DataError(f"unknown dataset '{name}' (known: {sorted(_BUILTIN)})")
    return DatasetSpec(name=name, source_path=Path(root) / name, **_BUILTIN[name])


@dataclass
class ImageBatch:
    """A batch of images with labels; pixels live in [0, 1]."""

    images: torch.Tensor  # (B, C, H, W) float
    labels: torch.Tensor  # (B,) int64

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise ValueError(f"images must be (B, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels must be (B,) matching images")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"pixel values outside [0, 1]: min={lo:.4g} max={hi:.4g}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def to(self, device: str | torch.device) -> "ImageBatch":
        return ImageBatch(self.images.to(device), self.labels.to(device))


@dataclass
class Dataset:
    """In-memory dataset handle with deterministic iteration."""

    spec: DatasetSpec
    images: dict[str, torch.Tensor] = field(repr=False)
    labels: dict[str, torch.Tensor] = field(repr=False)

    def split_size(self, split: str) -> int:
        return int(self.labels[split].shape[0])

    def tensors(self, split: str) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images[split], self.labels[split]

    def batches(
        self,
        split: str,
        batch_size: int,
        *,
        shuffle: bool = False,
        seed: int = 0,
        limit: int | None = None,
    ) -> Iterator[ImageBatch]:
        """Yield batches in a fixed order; with ``shuffle`` the order is a
        seeded permutation, so the same seed replays the same epoch."""
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        x, y = self.tensors(split)
        n = x.shape[0] if limit is None else min(limit, x.shape[0])
        if shuffle:
            gen = torch.Generator().manual_seed(seed)
            order = torch.randperm(x.shape[0], generator=gen)[:n]
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield ImageBatch(x[idx], y[idx])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_idx(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing dataset file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path.name}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"corrupt idx file {path.name}: too short")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"corrupt idx file {path.name}: bad magic {raw[:4].hex()}")
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    arr = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise DataError(f"corrupt idx file {path.name}: payload size mismatch")
    return arr.reshape(dims)


def write_idx(path: Path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format, gzipped when path ends in .gz.

    The gzip stream uses a zero mtime so file bytes are reproducible.
    """
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.tobytes()
    if path.suffix == ".gz":
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)


def write_manifest(spec: DatasetSpec, seed: int | None = None) -> None:
    """Record checksums and split sizes for the archives under the spec root."""
    files = {}
    for split in ("train", "test"):
        for fname in IDX_FILES[split]:
            files[fname] = _sha256(spec.source_path / fname)
    manifest = {
        "dataset": spec.name,
        "files": files,
        "splits": {"train": spec.train_size, "test": spec.test_size},
    }
    if seed is not None:
        manifest["seed"] = seed
    out = spec.source_path / MANIFEST_NAME
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(spec: DatasetSpec, *, verify: bool = True) -> Dataset:
    """Load the IDX archives under ``spec.source_path`` after verifying the
    manifest checksums and split sizes."""
    root = spec.source_path
    manifest_path = root / MANIFEST_NAME
    if verify:
        if not manifest_path.exists():
            raise DataError(f"missing manifest: {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        for fname, expect in manifest.get("files", {}).items():
            fpath = root / fname
            if not fpath.exists():
                raise DataError(f"missing dataset file: {fpath}")
            got = _sha256(fpath)
            if got != expect:
                raise DataError(f"checksum mismatch for {fpath}: {got} != {expect}")

    images: dict[str, torch.Tensor] = {}
    labels: dict[str, torch.Tensor] = {}
    expected = {"train": spec.train_size, "test": spec.test_size}
    for split in ("train", "test"):
        img_name, lbl_name = IDX_FILES[split]
        img = read_idx(root / img_name)
        lbl = read_idx(root / lbl_name)
        c, h, w = spec.image_shape
        want_ndim = 3 if c == 1 else 4
        if img.ndim != want_ndim:
            raise DataError(f"{img_name}: expected {want_ndim}-d image array, got {img.ndim}-d")
        if lbl.ndim != 1 or lbl.shape[0] != img.shape[0]:
            raise DataError(f"{lbl_name}: label count does not match {img_name}")
        if img.shape[0] != expected[split]:
            raise DataError(
                f"{img_name}: split size {img.shape[0]} != spec {expected[split]}"
            )
        if img.shape[-2:] != (h, w):
            raise DataError(f"{img_name}: image shape {img.shape[1:]} != spec {(h, w)}")
        x = torch.from_numpy(img.astype(np.float32) / spec.pixel_scale)
        images[split] = x.unsqueeze(1) if c == 1 else x
        labels[split] = torch.from_numpy(lbl.astype(np.int64))
        if int(labels[split].max()) >= spec.num_classes:
            raise DataError(f"{lbl_name}: label outside [0, {spec.num_classes})")
    return Dataset(spec=spec, images=images, labels=labels)


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-stratified subsample of the train split (test split kept whole).

    Per-class counts deviate from the exact fraction by at most one sample.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    x, y = dataset.tensors("train")
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for cls in range(dataset.spec.num_classes):
        idx = np.flatnonzero(y.numpy() == cls)
        take = int(round(fraction * idx.size))
        if take == 0:
            raise DataError(f"subsample fraction {fraction} empties class {cls}")
        keep.append(rng.permutation(idx)[:take])
    order = np.sort(np.concatenate(keep))
    sel = torch.from_numpy(order)
    images = dict(dataset.images)
    labels = dict(dataset.labels)
    images["train"] = x[sel]
    labels["train"] = y[sel]
    return Dataset(spec=dataset.spec, images=images, labels=labels)


# --- synthetic digit corpus -------------------------------------------------

# 5x7 bitmap glyphs for digits 0-9.
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    glyph = np.array([[float(ch) for ch in row] for row in _GLYPHS[digit]], dtype=np.float32)
    scale = rng.uniform(0.9, 1.25)
    h = int(round(20 * scale))
    w = int(round(h * 5 / 7 * rng.uniform(0.9, 1.1)))
    h, w = min(h, 25), min(w, 25)
    t = torch.from_numpy(glyph)[None, None]
    body = torch.nn.functional.interpolate(t, size=(h, w), mode="nearest")
    body = torch.nn.functional.max_pool2d(body, 3, stride=1, padding=1)
    canvas = np.zeros((28, 28), dtype=np.float32)
    top = int(rng.integers(1, 28 - h))
    left = int(rng.integers(1, 28 - w))
    canvas[top : top + h, left : left + w] = body[0, 0].numpy()
    canvas *= rng.uniform(0.85, 1.0)
    canvas += rng.normal(0.0, 0.03, size=canvas.shape).astype(np.float32)
    return np.clip(canvas, 0.0, 1.0)


def synthesize_digits(spec: DatasetSpec, seed: int = 0) -> None:
    """Render a deterministic digit corpus into IDX archives plus manifest.

    Digits are bitmap glyphs with random placement, scale, intensity and
    pixel noise; the corpus stands in for a handwritten-digit dataset when
    no real archives are available.
    """
    root = spec.source_path
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, size in (("train", spec.train_size), ("test", spec.test_size)):
        labels = (np.arange(size) % spec.num_classes).astype(np.uint8)
        rng.shuffle(labels)
        images = np.zeros((size, 28, 28), dtype=np.uint8)
        for i, lbl in enumerate(labels):
            images[i] = np.round(_render_digit(int(lbl), rng) * 255).astype(np.uint8)
        img_name, lbl_name = IDX_FILES[split]
        write_idx(root / img_name, images)
        write_idx(root / lbl_name, labels)
    write_manifest(spec, seed=seed)


def ensure_dataset(spec: DatasetSpec, *, seed: int = 0) -> Dataset:
    """Load a dataset, generating the synthetic corpus first when absent.

    Real datasets must already be populated; a missing archive is an error
    naming the file.
    """
    manifest = spec.source_path / MANIFEST_NAME
    if not manifest.exists() and spec.name == "synthetic-digits":
        synthesize_digits(spec, seed=seed)
    return load_dataset(spec)
