"""Encoder-decoder network mapping a frozen Gaussian noise tensor to one
bounded universal perturbation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .core import Perturbation, project_to_ball

_ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "tanh": nn.Tanh}
_POOLING = {"max": nn.MaxPool2d, "avg": nn.AvgPool2d}


@dataclass(frozen=True)
class GeneratorConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)
    epsilon: float = 10.0
    depth: int = 3
    base_channels: int = 32
    noise_seed: int = 0
    init_seed: int = 0
    activation: str = "relu"
    pooling: str = "max"
    head_gain: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        h, w, c = self.image_shape
        # depth 0 is a head-only generator for degenerate (e.g. 1x1) images
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        factor = 2 ** self.depth
        if h % factor or w % factor:
            raise ValueError(
                f"image height/width ({h}x{w}) must be divisible by 2**depth = {factor}"
            )
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.base_channels < 1 or c < 1:
            raise ValueError("base_channels and channels must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in _POOLING:
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


class Generator(nn.Module):
    """Conv encoder with 2x pooling, nearest-upsampling decoder, ``eps * tanh`` head.

    Works on NCHW internally; :meth:`perturbation` returns an HxWxC tensor.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        act = _ACTIVATIONS[config.activation]
        pool = _POOLING[config.pooling]
        c = config.image_shape[2]
        widths = [config.base_channels * 2 ** i for i in range(config.depth)]

        enc, ch = [], c
        for w in widths:
            enc += [nn.Conv2d(ch, w, 3, padding=1), act(), pool(2)]
            ch = w
        dec = []
        for i, w in enumerate(reversed(widths)):
            out = widths[-i - 2] if i < config.depth - 1 else config.base_channels
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, out, 3, padding=1), act()]
            ch = out
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Conv2d(ch, c, 3, padding=1)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """``z`` is NCHW; output is NCHW bounded by epsilon."""
        return self.config.epsilon * torch.tanh(self.head(self.decoder(self.encoder(z))))

    def perturbation(self, z: torch.Tensor) -> torch.Tensor:
        """Map an HxWxC noise tensor to an HxWxC perturbation."""
        return forward(self, z)


def build_generator(config: GeneratorConfig) -> Generator:
    gen = torch.Generator().manual_seed(config.init_seed)
    model = Generator(config)
    # seeded re-initialisation keeps builds independent of global RNG state
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = (6.0 / fan_in) ** 0.5
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
        # small head keeps eps*tanh out of saturation at the start of training
        model.head.weight.mul_(config.head_gain)
    return model


def sample_noise(config: GeneratorConfig) -> torch.Tensor:
    gen = torch.Generator().manual_seed(config.noise_seed)
    return torch.randn(config.image_shape, generator=gen)


def forward(model: Generator, z: torch.Tensor) -> torch.Tensor:
    if tuple(z.shape) != model.config.image_shape:
        raise ValueError(
            f"noise shape {tuple(z.shape)} does not match image shape {model.config.image_shape}"
        )
    p = next(model.parameters())
    out = model(z.to(p.dtype).permute(2, 0, 1).unsqueeze(0))
    return out[0].permute(1, 2, 0)


def export_perturbation(model: Generator, z: torch.Tensor, stage: str = "mid",
                        source_model_id: str = "") -> Perturbation:
    with torch.no_grad():
        delta = project_to_ball(forward(model, z).float(), model.epsilon)
    return Perturbation(delta, model.epsilon, stage, source_model_id)


def save_checkpoint(model: Generator, path: str | Path, epoch: int) -> Path:
    """Write ``<path>`` (state dict) plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    manifest = {
        "config": model.config.to_dict(),
        "seeds": {"noise_seed": model.config.noise_seed, "init_seed": model.config.init_seed},
        "epoch": epoch,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> tuple[Generator, int]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    model = Generator(GeneratorConfig(**manifest["config"]))
    model.load_state_dict(torch.load(path, weights_only=True))
    return model, manifest["epoch"]
