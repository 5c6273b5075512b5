"""Target classifiers behind a uniform frozen adapter, plus a small on-disk registry."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageBatch, LabeledDataset, Split, as_tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("toy_linear", "small_cnn", "external")


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    architecture: str
    num_classes: int
    input_shape: tuple[int, int, int]
    saliency_layer: str = ""
    weights_path: Optional[str] = None
    width: int = 32
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected {ARCHITECTURES}")
        if self.architecture == "external" and not self.weights_path:
            raise ValueError(f"external model {self.model_id!r} needs weights_path")
        if not self.saliency_layer:
            default = {"toy_linear": "features", "small_cnn": "conv3"}.get(self.architecture, "")
            object.__setattr__(self, "saliency_layer", default)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


class ToyLinear(nn.Module):
    """Affine classifier on raw pixels. ``features`` is an identity hook point."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        h, w, c = input_shape
        self.features = nn.Identity()
        self.fc = nn.Linear(h * w * c, num_classes)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


class SmallCNN(nn.Module):
    """Three conv blocks + global average pool + linear head; expects NCHW in [0, 1]."""

    def __init__(self, input_shape, num_classes, width=32):
        super().__init__()
        c = input_shape[2]
        self.conv1 = nn.Conv2d(c, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        return self.fc(x.mean(dim=(2, 3)))


def build_module(spec: ModelSpec) -> nn.Module:
    if spec.architecture == "toy_linear":
        return ToyLinear(spec.input_shape, spec.num_classes)
    if spec.architecture == "small_cnn":
        return SmallCNN(spec.input_shape, spec.num_classes, spec.width)
    raise ValueError("external models are loaded, not built")


class ClassifierAdapter:
    """Frozen classifier taking NHWC pixel batches.

    The wrapped module receives NCHW input. ``input_scale`` maps pixel units to
    the module's expected domain (1/255 for the built-in models).
    """

    def __init__(self, module: nn.Module, model_id: str, num_classes: int,
                 saliency_layer: str, input_shape=None, input_scale: float = 1 / 255):
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.model_id = model_id
        self.num_classes = num_classes
        self.saliency_layer = saliency_layer
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.input_scale = input_scale
        self.supports_input_gradient = True

    def __repr__(self):
        return f"ClassifierAdapter({self.model_id!r}, classes={self.num_classes})"

    @property
    def dtype(self) -> torch.dtype:
        p = next(self.module.parameters(), None)
        return p.dtype if p is not None else torch.float32

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable logits for an NHWC pixel tensor."""
        x = x.to(self.dtype)
        return self.module(x.permute(0, 3, 1, 2) * self.input_scale)

    def _data(self, images) -> torch.Tensor:
        return images.data if isinstance(images, ImageBatch) else as_tensor(images)

    def predict(self, images, batch_size: int = 256) -> torch.Tensor:
        """Class probabilities, one row per image."""
        x = self._data(images)
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(F.softmax(self.logits(x[i:i + batch_size]).double(), dim=1))
        if not out:
            return torch.zeros(0, self.num_classes, dtype=torch.float64)
        return torch.cat(out)

    def predict_labels(self, images, batch_size: int = 256) -> torch.Tensor:
        x = self._data(images)
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(self.logits(x[i:i + batch_size]).argmax(dim=1))
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.int64)

    def input_gradient(self, images, labels, loss: str = "cross_entropy") -> torch.Tensor:
        """Gradient of ``loss`` w.r.t. the NHWC input pixels.

        ``loss`` is ``"cross_entropy"`` (mean over the batch) or ``"class_score"``
        (sum of the pre-softmax score of each row's label).
        """
        x = self._data(images).detach().clone().to(self.dtype).requires_grad_(True)
        labels = torch.as_tensor(labels, dtype=torch.int64)
        z = self.logits(x)
        if loss == "cross_entropy":
            value = F.cross_entropy(z, labels)
        elif loss == "class_score":
            value = z.gather(1, labels[:, None]).sum()
        else:
            raise ValueError(f"unknown loss spec {loss!r}")
        (grad,) = torch.autograd.grad(value, x)
        return grad

    def layer_names(self) -> list[str]:
        return [name for name, _ in self.module.named_modules() if name]

    def activation_and_gradient(self, images, layer: str, labels):
        """Activation of ``layer`` and the gradient of each row's class score w.r.t. it."""
        modules = dict(self.module.named_modules())
        if layer not in modules or not layer:
            raise KeyError(f"unknown layer {layer!r}; available layers: {self.layer_names()}")
        store = {}

        def hook(_module, _inp, out):
            out.requires_grad_(True)
            store["act"] = out
            return out

        handle = modules[layer].register_forward_hook(hook)
        try:
            x = self._data(images).detach().to(self.dtype).requires_grad_(True)
            z = self.logits(x)
        finally:
            handle.remove()
        labels = torch.as_tensor(labels, dtype=torch.int64)
        score = z.gather(1, labels[:, None]).sum()
        (grad,) = torch.autograd.grad(score, store["act"])
        return store["act"].detach(), grad.detach()

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.module.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def check_compatible(adapter: ClassifierAdapter, image_shape) -> None:
    """Startup check that ``adapter`` was declared for images of ``image_shape``."""
    if adapter.input_shape is not None and tuple(adapter.input_shape) != tuple(image_shape):
        raise ValueError(f"model {adapter.model_id!r} expects input shape {adapter.input_shape}, "
                         f"data has {tuple(image_shape)}")


def accuracy(adapter: ClassifierAdapter, split: Split, batch_size: int = 256) -> float:
    if len(split) == 0:
        return float("nan")
    pred = adapter.predict_labels(split.images, batch_size)
    return float((pred == split.labels).double().mean())


def train_classifier(spec: ModelSpec, data: LabeledDataset, seed: int = 0) -> ClassifierAdapter:
    """Fit a built-in architecture on ``data.train`` with Adam; returns a frozen adapter."""
    if spec.architecture == "external":
        raise ValueError("external models cannot be trained here; use load_external")
    if data.image_shape != spec.input_shape:
        raise ValueError(f"dataset image shape {data.image_shape} does not match spec {spec.input_shape}")
    if data.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, spec declares {spec.num_classes}")
    torch.manual_seed(seed)
    module = build_module(spec)
    adapter_scale = 1 / 255
    opt = torch.optim.Adam(module.parameters(), lr=spec.learning_rate)
    x_all = data.train.images.data
    y_all = data.train.labels
    gen = torch.Generator().manual_seed(seed)
    module.train()
    for epoch in range(spec.epochs):
        order = torch.randperm(len(y_all), generator=gen)
        total = 0.0
        for i in range(0, len(order), spec.batch_size):
            idx = order[i:i + spec.batch_size]
            x = x_all[idx].float().permute(0, 3, 1, 2) * adapter_scale
            loss = F.cross_entropy(module(x), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        log.debug("%s epoch %d loss %.4f", spec.model_id, epoch, total / len(y_all))
    return ClassifierAdapter(module, spec.model_id, spec.num_classes, spec.saliency_layer,
                             spec.input_shape, adapter_scale)


def load_external(spec: ModelSpec) -> ClassifierAdapter:
    """Load a pickled ``nn.Module`` (``torch.save(model)``) or a TorchScript file.

    The module must take NCHW input in [0, 1] and return ``num_classes`` logits.
    """
    path = Path(spec.weights_path or "")
    if not path.is_file():
        raise FileNotFoundError(f"weights for {spec.model_id!r} not found: {path}")
    try:
        module = torch.load(path, weights_only=False)
    except Exception:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                module = torch.jit.load(str(path))
        except Exception as exc:
            raise ValueError(f"unreadable weights {path}: {exc}") from exc
    if not isinstance(module, nn.Module):
        raise ValueError(f"{path} does not contain a torch module (got {type(module).__name__})")
    adapter = ClassifierAdapter(module, spec.model_id, spec.num_classes, spec.saliency_layer,
                                spec.input_shape)
    if spec.saliency_layer and spec.saliency_layer not in adapter.layer_names():
        raise KeyError(f"saliency layer {spec.saliency_layer!r} not in model; "
                       f"available layers: {adapter.layer_names()}")
    probe = torch.full((1, *spec.input_shape), 127.5)
    try:
        with torch.no_grad():
            out = adapter.logits(probe)
    except Exception as exc:
        raise ValueError(f"model {spec.model_id!r} rejects input shape {spec.input_shape}: {exc}") from exc
    if tuple(out.shape) != (1, spec.num_classes):
        raise ValueError(f"model {spec.model_id!r} returns shape {tuple(out.shape)}, "
                         f"expected (1, {spec.num_classes})")
    return adapter


class Registry:
    """Directory holding ``manifest.json`` plus one weights file per built-in model."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text())

    def ids(self) -> list[str]:
        return sorted(self.manifest())

    def register(self, adapter: ClassifierAdapter, spec: ModelSpec, clean_accuracy: float) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {"spec": spec.to_dict(), "clean_accuracy": clean_accuracy,
                 "parameter_hash": adapter.parameter_hash()}
        if spec.architecture != "external":
            weights = f"{spec.model_id}.pt"
            torch.save(adapter.module.state_dict(), self.root / weights)
            entry["weights_file"] = weights
        manifest = self.manifest()
        manifest[spec.model_id] = entry
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def spec(self, model_id: str) -> ModelSpec:
        manifest = self.manifest()
        if model_id not in manifest:
            raise KeyError(f"model {model_id!r} not in registry {self.root}; known: {sorted(manifest)}")
        return ModelSpec(**manifest[model_id]["spec"])

    def load(self, model_id: str) -> ClassifierAdapter:
        spec = self.spec(model_id)
        entry = self.manifest()[model_id]
        if spec.architecture == "external":
            adapter = load_external(spec)
        else:
            state = torch.load(self.root / entry["weights_file"], weights_only=True)
            module = build_module(spec).to(next(iter(state.values())).dtype)
            module.load_state_dict(state)
            adapter = ClassifierAdapter(module, spec.model_id, spec.num_classes,
                                        spec.saliency_layer, spec.input_shape)
        if adapter.parameter_hash() != entry["parameter_hash"]:
            raise ValueError(f"parameter hash mismatch for {model_id!r}")
        return adapter
