"""Pixel-domain types, epsilon-ball projection, perturbation application and
the UAPF perturbation container."""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]

STAGES = ("raw", "mid", "fin", "attn")

UAPF_MAGIC = b"UAPF"
UAPF_VERSION = 1


def as_tensor(x: ArrayLike, dtype=torch.float32) -> torch.Tensor:
    """Float tensor view of ``x``; floating tensors keep their precision."""
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _bound(epsilon: float, dtype: torch.dtype) -> torch.Tensor:
    """``epsilon`` in ``dtype``, rounded toward zero so the clamp never exceeds it."""
    b = torch.tensor(epsilon, dtype=dtype)
    if float(b) > epsilon:
        b = torch.nextafter(b, torch.zeros((), dtype=dtype))
    return b


@dataclass(frozen=True)
class PixelRange:
    lo: float = 0.0
    hi: float = 255.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"PixelRange needs lo < hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class ImageBatch:
    """Batch of images laid out as (batch, height, width, channels) in pixel units."""

    data: torch.Tensor
    range: PixelRange = field(default_factory=PixelRange)

    def __post_init__(self):
        data = as_tensor(self.data)
        if data.ndim != 4:
            raise ValueError(f"ImageBatch expects a rank-4 NHWC tensor, got shape {tuple(data.shape)}")
        if data.numel() and (data.min() < self.range.lo or data.max() > self.range.hi):
            raise ValueError(
                f"pixels outside [{self.range.lo}, {self.range.hi}]: "
                f"min={float(data.min())}, max={float(data.max())}"
            )
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def __getitem__(self, idx) -> "ImageBatch":
        sub = self.data[idx]
        if sub.ndim == 3:
            sub = sub.unsqueeze(0)
        return ImageBatch(sub, self.range)


@dataclass(frozen=True)
class Split:
    images: ImageBatch
    labels: torch.Tensor

    def __post_init__(self):
        labels = torch.as_tensor(np.asarray(self.labels), dtype=torch.int64)
        if labels.ndim != 1 or labels.shape[0] != len(self.images):
            raise ValueError(
                f"labels shape {tuple(labels.shape)} does not match {len(self.images)} images"
            )
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Split":
        idx = torch.as_tensor(idx, dtype=torch.int64)
        return Split(ImageBatch(self.images.data[idx], self.images.range), self.labels[idx])


@dataclass(frozen=True)
class LabeledDataset:
    train: Split
    validation: Split
    class_names: tuple[str, ...]
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        m = len(self.class_names)
        for name, split in (("train", self.train), ("validation", self.validation)):
            if len(split) and (split.labels.min() < 0 or split.labels.max() >= m):
                raise ValueError(f"{name} labels must lie in [0, {m})")
        if self.train.images.image_shape != self.validation.images.image_shape:
            raise ValueError("train and validation image shapes differ")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train.images.image_shape


@dataclass(frozen=True)
class Perturbation:
    """A single image-shaped additive perturbation (height, width, channels)."""

    delta: torch.Tensor
    epsilon: float
    stage: str = "raw"
    source_model_id: str = ""

    def __post_init__(self):
        delta = as_tensor(self.delta).detach()
        if delta.ndim != 3:
            raise ValueError(f"perturbation must be HxWxC, got shape {tuple(delta.shape)}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.stage in ("mid", "fin") and float(delta.abs().max()) > self.epsilon:
            raise ValueError(
                f"stage {self.stage} perturbation exceeds its budget: "
                f"max|delta|={float(delta.abs().max())} > epsilon={self.epsilon}"
            )
        object.__setattr__(self, "delta", delta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.delta.shape)

    def linf(self) -> float:
        return float(self.delta.abs().max())


def _check_finite(t: torch.Tensor) -> None:
    bad = ~torch.isfinite(t)
    if bad.any():
        index = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise ValueError(f"non-finite perturbation element at index {index}: {float(t[index])}")


def project_to_ball(delta: ArrayLike, epsilon: float) -> torch.Tensor:
    """Clamp every element of ``delta`` into [-epsilon, epsilon]."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    t = as_tensor(delta)
    _check_finite(t)
    b = _bound(epsilon, t.dtype)
    return torch.clamp(t, -b, b)


def add_and_clip(x: torch.Tensor, delta: torch.Tensor, pixel_range: PixelRange) -> torch.Tensor:
    """Differentiable core of :func:`apply_perturbation` on raw NHWC tensors."""
    return torch.clamp(x + delta, pixel_range.lo, pixel_range.hi)


def apply_perturbation(images: ImageBatch, p: Perturbation | ArrayLike) -> ImageBatch:
    delta = p.delta if isinstance(p, Perturbation) else as_tensor(p)
    if tuple(delta.shape) != images.image_shape:
        raise ValueError(
            f"perturbation shape {tuple(delta.shape)} does not match image shape {images.image_shape}"
        )
    return ImageBatch(add_and_clip(images.data, delta.to(images.data.dtype), images.range), images.range)


def per_image_l2(clean: ImageBatch, adversarial: ImageBatch) -> torch.Tensor:
    a, b = clean.data, adversarial.data
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: clean {tuple(a.shape)} vs adversarial {tuple(b.shape)}")
    diff = (b.double() - a.double()).reshape(a.shape[0], -1)
    return diff.norm(dim=1)


def perturbation_l2(clean: ImageBatch, adversarial: ImageBatch) -> float:
    """Mean over the batch of the per-image Euclidean distance."""
    dists = per_image_l2(clean, adversarial)
    if dists.numel() == 0:
        return 0.0
    return float(dists.mean())


# -- UAPF container ----------------------------------------------------------


def write_uapf(path: str | Path, p: Perturbation, pixel_range: PixelRange = PixelRange(),
               extra: dict | None = None, created_unix: int | None = None) -> Path:
    """Write ``p`` as UAPF. ``created_unix`` falls back to $SOURCE_DATE_EPOCH, then the clock."""
    path = Path(path)
    if created_unix is None:
        created_unix = int(os.environ.get("SOURCE_DATE_EPOCH", time.time()))
    delta = p.delta.detach().cpu().to(torch.float32).contiguous().numpy()
    header = {
        "shape": list(delta.shape),
        "epsilon": float(p.epsilon),
        "pixel_lo": float(pixel_range.lo),
        "pixel_hi": float(pixel_range.hi),
        "stage": p.stage,
        "source_model_id": p.source_model_id,
        "created_unix": int(created_unix),
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(UAPF_MAGIC)
        fh.write(struct.pack("<B", UAPF_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(delta.astype("<f4").tobytes(order="C"))
    return path


def read_uapf_raw(path: str | Path) -> tuple[dict, np.ndarray]:
    """Return the parsed header and the payload as a float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != UAPF_MAGIC:
        raise ValueError(f"{path}: not a UAPF file (magic {raw[:4]!r})")
    if len(raw) < 9:
        raise ValueError(f"{path}: truncated header")
    (version,) = struct.unpack("<B", raw[4:5])
    if version != UAPF_VERSION:
        raise ValueError(f"{path}: unsupported UAPF version {version}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    shape = tuple(int(s) for s in header["shape"])
    payload = raw[9 + hlen:]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return header, data


def read_uapf(path: str | Path) -> tuple[Perturbation, PixelRange]:
    header, data = read_uapf_raw(path)
    p = Perturbation(
        torch.from_numpy(data.copy()),
        epsilon=float(header["epsilon"]),
        stage=header["stage"],
        source_model_id=header.get("source_model_id", ""),
    )
    return p, PixelRange(header["pixel_lo"], header["pixel_hi"])
