"""Dataset ingestion from class-per-folder image trees, seeded splits, and a
synthetic desk-scale scene dataset."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ImageBatch, LabeledDataset, PixelRange, Split

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class DatasetManifest:
    root: str
    class_names: list[str]
    files: dict[str, list[str]]
    train: dict[str, list[str]]
    validation: dict[str, list[str]]
    split_seed: int
    train_per_class: int
    validation_cap: int | None = None
    image_shape: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))

    def sizes(self) -> dict[str, int]:
        return {"train": sum(map(len, self.train.values())),
                "validation": sum(map(len, self.validation.values()))}


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("RGB", "L") else im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def split_files(files: dict[str, list[str]], class_names: list[str], split_seed: int,
                train_per_class: int, validation_cap: int | None = None):
    """Per-class seeded shuffle; first ``train_per_class`` go to train.

    With ``validation_cap`` the pooled validation list is subsampled to that many
    files (same seed), keeping per-class file order sorted.
    """
    rng = np.random.default_rng(split_seed)
    train, val = {}, {}
    for name in class_names:
        names = sorted(files[name])
        if train_per_class > len(names):
            raise ValueError(f"class {name!r} has {len(names)} images, "
                             f"fewer than train_per_class={train_per_class}")
        perm = rng.permutation(len(names))
        train[name] = sorted(names[i] for i in perm[:train_per_class])
        val[name] = sorted(names[i] for i in perm[train_per_class:])
    if validation_cap is not None:
        pooled = [(n, f) for n in class_names for f in val[n]]
        if validation_cap < len(pooled):
            keep = np.sort(rng.choice(len(pooled), size=validation_cap, replace=False))
            val = {n: [] for n in class_names}
            for k in keep:
                n, f = pooled[k]
                val[n].append(f)
    return train, val


def ingest(root: str | Path, split_seed: int = 0, train_per_class: int = 50,
           validation_cap: int | None = None) -> DatasetManifest:
    """Scan ``root/<class>/<image>``; classes are ordered lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not class_names:
        raise ValueError(f"no class folders under {root}")
    files, shapes = {}, {}
    for name in class_names:
        found = sorted(p.name for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise ValueError(f"class folder {root / name} contains no images")
        files[name] = found
        for f in found:
            from PIL import Image

            with Image.open(root / name / f) as im:
                bands = 1 if im.mode == "L" else 3
                shapes[f"{name}/{f}"] = (im.height, im.width, bands)
    common = max(set(shapes.values()), key=list(shapes.values()).count)
    offenders = sorted(k for k, s in shapes.items() if s != common)
    if offenders:
        raise ValueError(f"mixed image sizes (expected {common}): {offenders[:20]}")
    train, val = split_files(files, class_names, split_seed, train_per_class, validation_cap)
    return DatasetManifest(str(root), class_names, files, train, val, split_seed,
                           train_per_class, validation_cap, list(common))


def resplit(manifest: DatasetManifest, split_seed: int, train_per_class: int | None = None,
            validation_cap: int | None = None) -> DatasetManifest:
    tpc = manifest.train_per_class if train_per_class is None else train_per_class
    train, val = split_files(manifest.files, manifest.class_names, split_seed, tpc, validation_cap)
    return DatasetManifest(manifest.root, manifest.class_names, manifest.files, train, val,
                           split_seed, tpc, validation_cap, manifest.image_shape)


def _load_part(root: Path, class_names, part: dict[str, list[str]]) -> Split:
    images, labels = [], []
    for label, name in enumerate(class_names):
        for f in part.get(name, []):
            images.append(_read_image(root / name / f))
            labels.append(label)
    data = torch.from_numpy(np.stack(images).astype(np.float32)) if images else torch.zeros(0, 1, 1, 1)
    return Split(ImageBatch(data, PixelRange(0.0, 255.0)), labels)


def load_dataset(manifest: DatasetManifest) -> LabeledDataset:
    """Decode every image listed in ``manifest`` into float pixels in [0, 255]."""
    root = Path(manifest.root)
    train = _load_part(root, manifest.class_names, manifest.train)
    val = _load_part(root, manifest.class_names, manifest.validation)
    if len(val) == 0:
        val = Split(ImageBatch(torch.zeros(0, *train.images.image_shape)), [])
    return LabeledDataset(train, val, manifest.class_names, manifest.split_seed)


# -- synthetic desk dataset -----------------------------------------------------

DESK_CLASSES = tuple(f"pattern_{i:02d}" for i in range(10))


def _smooth_field(rng: np.random.Generator, size: int, channels: int, cells: int = 4) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (cells, cells, channels))
    rep = int(np.ceil(size / cells))
    up = np.kron(coarse, np.ones((rep, rep, 1)))[:size, :size]
    k = np.ones(rep) / rep
    for axis in (0, 1):
        up = np.apply_along_axis(lambda v: np.convolve(np.pad(v, rep, mode="edge"), k, "same")[rep:-rep],
                                 axis, up)
    return up


def make_desk_images(n_per_class: int, seed: int = 0, size: int = 32, num_classes: int = 10,
                     amplitude: float = 25.0, noise: float = 12.0) -> tuple[np.ndarray, np.ndarray]:
    """Oriented grating patches on textured backgrounds, returned as uint8 NHWC plus labels.

    Class ``k`` is a grating at angle ``k * 180 / num_classes`` degrees inside a
    disc whose centre jitters around the image centre.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        for _ in range(n_per_class):
            base = 128 + 35 * _smooth_field(rng, size, 3) + rng.normal(0, noise, (size, size, 3))
            cy, cx = size / 2 + rng.uniform(-4, 4, 2)
            radius = rng.uniform(0.28, 0.4) * size
            freq = rng.uniform(0.18, 0.26)
            phase = rng.uniform(0, 2 * np.pi)
            ang = theta + rng.normal(0, 0.05)
            wave = np.sin(freq * 2 * np.pi * ((xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)) + phase)
            mask = np.clip((radius - np.hypot(yy - cy, xx - cx)) / 2.0, 0, 1)
            tint = rng.uniform(0.6, 1.0, 3)
            img = base + amplitude * (wave * mask)[:, :, None] * tint
            images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            labels.append(k)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def make_desk_dataset(train_per_class: int = 50, val_per_class: int = 100, seed: int = 0,
                      **kwargs) -> LabeledDataset:
    """In-memory desk dataset; train and validation are drawn from independent streams."""
    xt, yt = make_desk_images(train_per_class, seed=2 * seed, **kwargs)
    xv, yv = make_desk_images(val_per_class, seed=2 * seed + 1, **kwargs)
    num_classes = kwargs.get("num_classes", 10)
    names = tuple(f"pattern_{i:02d}" for i in range(num_classes))
    to_split = lambda x, y: Split(ImageBatch(torch.from_numpy(x.astype(np.float32))), y)
    return LabeledDataset(to_split(xt, yt), to_split(xv, yv), names, seed)


def write_image_folder(root: str | Path, images: np.ndarray, labels: np.ndarray,
                       class_names=None) -> Path:
    """Write a class-per-folder PNG tree readable by :func:`ingest`."""
    from PIL import Image

    root = Path(root)
    class_names = class_names or [f"pattern_{i:02d}" for i in range(int(labels.max()) + 1)]
    counters = {}
    for img, y in zip(images, labels):
        name = class_names[int(y)]
        (root / name).mkdir(parents=True, exist_ok=True)
        i = counters.get(name, 0)
        counters[name] = i + 1
        Image.fromarray(img.squeeze(-1) if img.shape[-1] == 1 else img).save(root / name / f"{i:05d}.png")
    return root
