"""IDX ingestion/export and the synthetic class-conditional image sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import InvalidParameterError, RngStream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MAX_ELEMENTS = 2 ** 31


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W) in [-1, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise InvalidParameterError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidParameterError("images and labels differ in length")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise InvalidParameterError("image values outside [-1, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidParameterError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1:]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.n_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def parse_idx(raw: bytes, kind: str):
    """Decode IDX bytes; ``kind`` is ``"images"`` (returns floats in [-1, 1]) or ``"labels"``."""
    expected = {"images": IDX_IMAGES, "labels": IDX_LABELS}.get(kind)
    if expected is None:
        raise InvalidParameterError(f"kind must be 'images' or 'labels', got {kind!r}")
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the magic number", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected:
        raise IdxFormatError(f"bad magic 0x{magic:08X}, expected 0x{expected:08X}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count > _MAX_ELEMENTS:
            raise IdxFormatError("dimension product overflows", 4 + 4 * i)
    if len(raw) < header + count:
        raise IdxFormatError(f"payload truncated: need {count} bytes, have {len(raw) - header}", len(raw))
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if kind == "labels":
        return payload.astype(np.int64)
    return payload.astype(np.float64) / 127.5 - 1.0


def read_idx(path, kind: str):
    return parse_idx(Path(path).read_bytes(), kind)


def encode_idx(values, kind: str) -> bytes:
    """Inverse of :func:`parse_idx`; images in [-1, 1] are quantised to bytes."""
    arr = np.asarray(values)
    if kind == "labels":
        if arr.ndim != 1:
            raise InvalidParameterError("labels must be one-dimensional")
        payload, magic = arr.astype(np.uint8), IDX_LABELS
    elif kind == "images":
        if arr.ndim != 3:
            raise InvalidParameterError("images must be (N, H, W)")
        payload = np.clip(np.rint((arr.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
        magic = IDX_IMAGES
    else:
        raise InvalidParameterError(f"kind must be 'images' or 'labels', got {kind!r}")
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + payload.tobytes()


def write_idx(path, values, kind: str) -> None:
    Path(path).write_bytes(encode_idx(values, kind))


def load_dataset(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    images = read_idx(images_path, "images")
    labels = read_idx(labels_path, "labels")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(images, labels, n_classes)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthLayout:
    classes: int = 2
    per_class: int = 200
    H: int = 8
    W: int = 8
    pixel_noise: float = 0.1


def synth_dataset(layout: SynthLayout, seed: int) -> LabeledDataset:
    """Class ``c`` is a bar through the (jittered) centre at angle ``pi * c / classes``.

    Odd-numbered classes also carry a bright blob in one corner, so classes stay
    distinct even when many orientations are requested.
    """
    rng = RngStream(seed, "synth")
    n = layout.classes * layout.per_class
    labels = np.repeat(np.arange(layout.classes), layout.per_class)
    yy, xx = np.mgrid[0:layout.H, 0:layout.W].astype(np.float64)
    images = np.empty((n, layout.H, layout.W))
    jitter = rng.uniform((n, 4), -1.0, 1.0)
    noise = rng.normal((n, layout.H, layout.W), 0.0, layout.pixel_noise)
    for i, c in enumerate(labels):
        theta = np.pi * c / layout.classes + 0.15 * jitter[i, 0]
        cy = (layout.H - 1) / 2 + 0.75 * jitter[i, 1]
        cx = (layout.W - 1) / 2 + 0.75 * jitter[i, 2]
        dist = np.abs(-(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta))
        img = np.exp(-dist ** 2 / (2 * 0.8 ** 2))
        if c % 2 == 1 and layout.classes > 2:
            img = np.maximum(img, np.exp(-((yy - 1.5) ** 2 + (xx - 1.5) ** 2) / 2.0))
        img *= 0.9 + 0.1 * jitter[i, 3]
        images[i] = np.clip(2.0 * (img + noise[i]) - 1.0, -1.0, 1.0)
    order = rng.permutation(n)
    return LabeledDataset(images[order], labels[order], layout.classes)
