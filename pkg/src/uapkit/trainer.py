"""Training stage: fit the generator so its bounded output maximises the frozen
target's cross-entropy on the training split."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .core import LabeledDataset, Perturbation, Split, add_and_clip
from .generator import Generator, export_perturbation, forward, sample_noise
from .models import ClassifierAdapter

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    shuffle_seed: int = 0
    epsilon: float = 10.0
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_asr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_list(self, with_time: bool = True) -> list[dict]:
        rows = [asdict(r) for r in self.records]
        if not with_time:
            for r in rows:
                r.pop("wall_time")
        return rows


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true classes.

    Probabilities at the true label are floored at 1e-12 so the result is finite.
    """
    probs = torch.as_tensor(probs, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    picked = probs.gather(1, labels[:, None])[:, 0]
    if (picked <= 0).any():
        log.warning("cross_entropy: %d true-class probabilities <= 0 clamped to %g",
                    int((picked <= 0).sum()), PROB_FLOOR)
    return float(-torch.log(picked.clamp_min(PROB_FLOOR)).mean())


def attack_loss(gen: Generator, z: torch.Tensor, target: ClassifierAdapter,
                x: torch.Tensor, y: torch.Tensor, pixel_range) -> torch.Tensor:
    """Cross-entropy of the target on ``clip(x + G(z))``; the quantity being maximised."""
    delta = forward(gen, z)
    adv = add_and_clip(x.to(delta.dtype), delta, pixel_range)
    return F.cross_entropy(target.logits(adv), y)


def _make_optimizer(gen: Generator, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(gen.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def train_uap(gen: Generator, target: ClassifierAdapter, data: LabeledDataset | Split,
              cfg: TrainConfig, z: torch.Tensor | None = None) -> tuple[Perturbation, TrainLog]:
    """Gradient ascent on the target's loss over the generator parameters.

    Returns the final perturbation (stage ``mid``) and one log record per epoch.
    """
    if not getattr(target, "supports_input_gradient", False):
        raise TypeError(f"classifier adapter {target!r} does not expose input gradients")
    if abs(gen.epsilon - cfg.epsilon) > 1e-12:
        raise ValueError(f"generator epsilon {gen.epsilon} != train epsilon {cfg.epsilon}")
    split = data.train if isinstance(data, LabeledDataset) else data
    if len(split) == 0:
        raise ValueError("training split is empty")
    if split.images.image_shape != gen.config.image_shape:
        raise ValueError(f"data image shape {split.images.image_shape} != generator "
                         f"shape {gen.config.image_shape}")
    if z is None:
        z = sample_noise(gen.config)

    x_all, y_all, rng = split.images.data, split.labels, split.images.range
    opt = _make_optimizer(gen, cfg)
    order_gen = torch.Generator().manual_seed(cfg.shuffle_seed)
    history = TrainLog()
    gen.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = torch.randperm(len(y_all), generator=order_gen)
        total, fooled = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            delta = forward(gen, z)
            adv = add_and_clip(x.to(delta.dtype), delta, rng)
            logits = target.logits(adv)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            (-loss).backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            fooled += int((logits.argmax(1) != y).sum())
        rec = EpochRecord(epoch, total / len(y_all), fooled / len(y_all), time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4f train-asr %.3f", epoch, rec.mean_loss, rec.train_asr)
    gen.eval()
    return export_perturbation(gen, z, "mid", target.model_id), history
