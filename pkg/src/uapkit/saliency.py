"""Gradient-weighted class activation maps, binarisation, and their
aggregation into a per-pixel attention count image."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import Perturbation, Split, read_uapf_raw, write_uapf
from .models import ClassifierAdapter


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    image_id: str = ""
    layer: str = ""


@dataclass(frozen=True)
class BinaryMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8)
        if not np.isin(v, (0, 1)).all():
            raise ValueError("binary map must contain only 0 and 1")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class WeightedAttentionImage:
    values: np.ndarray
    num_sources: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"attention image must be HxW, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > self.num_sources):
            raise ValueError(f"attention counts must lie in [0, {self.num_sources}]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _cam(act: torch.Tensor, grad: torch.Tensor, size: tuple[int, int]) -> np.ndarray:
    """Per-image rectified, upsampled and max-normalised maps, shape (N, H, W)."""
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    if cam.shape[-2:] != size:
        cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
    cam = cam[:, 0].double().numpy()
    peak = cam.reshape(cam.shape[0], -1).max(axis=1)
    out = np.zeros_like(cam)
    nz = peak > 0
    out[nz] = cam[nz] / peak[nz, None, None]
    return out


def compute_saliency(target: ClassifierAdapter, image, label: int, layer: str | None = None,
                     image_id: str = "") -> SaliencyMap:
    """Saliency of a single HxWxC image for ``label`` at ``layer`` (default: adapter's layer)."""
    layer = layer or target.saliency_layer
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    maps = saliency_batch(target, x[None], torch.tensor([label]), layer)
    return SaliencyMap(maps[0], image_id, layer)


def saliency_batch(target: ClassifierAdapter, images: torch.Tensor, labels: torch.Tensor,
                   layer: str | None = None) -> np.ndarray:
    layer = layer or target.saliency_layer
    act, grad = target.activation_and_gradient(images, layer, labels)
    if act.ndim == 2:
        # fully-connected hook point: treat as 1x1 spatial map
        act, grad = act[:, :, None, None], grad[:, :, None, None]
    return _cam(act, grad, tuple(images.shape[1:3]))


def binarize(smap: SaliencyMap | np.ndarray, fraction: float = 0.5) -> BinaryMap:
    """Threshold at ``fraction * max``, inclusive. An all-zero map stays zero."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    v = np.asarray(smap.values if isinstance(smap, SaliencyMap) else smap, dtype=np.float64)
    peak = v.max() if v.size else 0.0
    if peak <= 0:
        return BinaryMap(np.zeros(v.shape, dtype=np.uint8))
    return BinaryMap((v >= fraction * peak).astype(np.uint8))


def aggregate(maps: list[BinaryMap]) -> WeightedAttentionImage:
    if not maps:
        raise ValueError("cannot aggregate an empty list of binary maps")
    shape = maps[0].values.shape
    total = np.zeros(shape, dtype=np.float64)
    for i, m in enumerate(maps):
        if m.values.shape != shape:
            raise ValueError(f"map {i} has shape {m.values.shape}, expected {shape}")
        total += m.values
    return WeightedAttentionImage(total, len(maps))


def attention_image(target: ClassifierAdapter, split: Split, fraction: float = 0.5,
                    layer: str | None = None, batch_size: int = 64) -> WeightedAttentionImage:
    """Saliency on clean images with true labels, binarised and summed over ``split``."""
    binaries = []
    x, y = split.images.data, split.labels
    for i in range(0, len(y), batch_size):
        for m in saliency_batch(target, x[i:i + batch_size], y[i:i + batch_size], layer):
            binaries.append(binarize(m, fraction))
    return aggregate(binaries)


def write_attention(path: str | Path, attn: WeightedAttentionImage, source_model_id: str = "") -> Path:
    p = Perturbation(torch.from_numpy(attn.values[:, :, None].astype(np.float32)),
                     epsilon=float(max(attn.num_sources, 1)), stage="attn",
                     source_model_id=source_model_id)
    return write_uapf(path, p, extra={"num_sources": attn.num_sources})


def read_attention(path: str | Path) -> WeightedAttentionImage:
    header, data = read_uapf_raw(path)
    if header.get("stage") != "attn":
        raise ValueError(f"{path} holds stage {header.get('stage')!r}, not an attention image")
    return WeightedAttentionImage(data[:, :, 0].astype(np.float64), int(header["num_sources"]))


def save_attention_png(path: str | Path, attn: WeightedAttentionImage) -> Path:
    from PIL import Image

    scale = 255.0 / max(attn.num_sources, 1)
    img = np.clip(np.rint(attn.values * scale), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    return Path(path)
