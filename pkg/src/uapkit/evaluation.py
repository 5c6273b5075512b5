"""Attack success rate, perturbation magnitude, transfer matrices, attack
selectivity and norm sweeps, with JSON/CSV report writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import ImageBatch, LabeledDataset, Perturbation, Split, add_and_clip, per_image_l2
from .models import ClassifierAdapter


def _split(data) -> Split:
    split = data.validation if isinstance(data, LabeledDataset) else data
    if len(split) == 0:
        raise ValueError("evaluation split is empty")
    return split


def _delta(p) -> torch.Tensor:
    return p.delta if isinstance(p, Perturbation) else torch.as_tensor(p, dtype=torch.float32)


def adversarial_predictions(target: ClassifierAdapter, data, p, batch_size: int = 256) -> torch.Tensor:
    split = _split(data)
    delta = _delta(p)
    if tuple(delta.shape) != split.images.image_shape:
        raise ValueError(f"perturbation shape {tuple(delta.shape)} does not match "
                         f"images {split.images.image_shape}")
    x, rng = split.images.data, split.images.range
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            adv = add_and_clip(x[i:i + batch_size], delta.to(x.dtype), rng)
            out.append(target.logits(adv).argmax(dim=1))
    return torch.cat(out)


def attack_success_rate(target: ClassifierAdapter, data, p, batch_size: int = 256) -> float:
    """Fraction of ALL evaluation images misclassified after adding ``p`` and clipping."""
    split = _split(data)
    pred = adversarial_predictions(target, split, p, batch_size)
    return float((pred != split.labels).double().mean())


def clean_accuracy(target: ClassifierAdapter, data, batch_size: int = 256) -> float:
    split = _split(data)
    zero = torch.zeros(split.images.image_shape)
    pred = adversarial_predictions(target, split, zero, batch_size)
    return float((pred == split.labels).double().mean())


def effective_pm(data, p) -> float:
    """Mean per-image l2 distance between clipped adversarial and clean images."""
    split = _split(data)
    x = split.images
    adv = ImageBatch(add_and_clip(x.data, _delta(p).to(x.data.dtype), x.range), x.range)
    return float(per_image_l2(x, adv).mean())


@dataclass
class EvaluationReport:
    model_id: str
    perturbation_id: str
    asr: float
    pm: float
    clean_accuracy: float
    config_snapshot: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(target: ClassifierAdapter, data, p: Perturbation, perturbation_id: str = "",
             config_snapshot: dict | None = None, batch_size: int = 256) -> EvaluationReport:
    return EvaluationReport(
        model_id=target.model_id,
        perturbation_id=perturbation_id or f"{p.source_model_id}:{p.stage}",
        asr=attack_success_rate(target, data, p, batch_size),
        pm=effective_pm(data, p),
        clean_accuracy=clean_accuracy(target, data, batch_size),
        config_snapshot=dict(config_snapshot or {}),
    )


@dataclass
class TransferMatrix:
    sources: list[str]
    targets: list[str]
    values: np.ndarray

    def __getitem__(self, key: tuple[str, str]) -> float:
        src, dst = key
        return float(self.values[self.sources.index(src), self.targets.index(dst)])

    def rows(self) -> list[dict]:
        return [{"source": s, "target": t, "asr": float(self.values[i, j])}
                for i, s in enumerate(self.sources) for j, t in enumerate(self.targets)]


def transfer_matrix(perturbations: Mapping[str, Perturbation], targets: Sequence[ClassifierAdapter],
                    data, batch_size: int = 256) -> TransferMatrix:
    sources = list(perturbations)
    values = np.zeros((len(sources), len(targets)))
    for i, src in enumerate(sources):
        for j, dst in enumerate(targets):
            values[i, j] = attack_success_rate(dst, data, perturbations[src], batch_size)
    return TransferMatrix(sources, [t.model_id for t in targets], values)


@dataclass
class SelectivityDistribution:
    fractions: np.ndarray
    class_names: tuple[str, ...] = ()

    def top_k_mass(self, k: int) -> float:
        return float(np.sort(self.fractions)[::-1][:k].sum())

    def rows(self) -> list[dict]:
        names = self.class_names or tuple(str(i) for i in range(len(self.fractions)))
        return [{"class_id": i, "class_name": n, "fraction": float(f)}
                for i, (n, f) in enumerate(zip(names, self.fractions))]


def selectivity_from_predictions(pred, num_classes: int, class_names=()) -> SelectivityDistribution:
    counts = np.bincount(np.asarray(pred, dtype=np.int64), minlength=num_classes).astype(np.float64)
    return SelectivityDistribution(counts / counts.sum(), tuple(class_names))


def selectivity(target: ClassifierAdapter, data, p, batch_size: int = 256) -> SelectivityDistribution:
    """Normalised histogram of the target's predictions on adversarial images."""
    names = data.class_names if isinstance(data, LabeledDataset) else ()
    pred = adversarial_predictions(target, data, p, batch_size)
    return selectivity_from_predictions(pred.numpy(), target.num_classes, names)


def norm_sweep(target: ClassifierAdapter, data, p, norms: Sequence[float],
               batch_size: int = 256) -> list[tuple[float, float]]:
    """ASR after rescaling the raw perturbation so its PM would be each target norm.

    Scaling uses ``s = norm / PM(p)`` on the unclipped perturbation; clipping
    happens at application time.
    """
    if any(n <= 0 for n in norms):
        raise ValueError("target norms must be positive")
    base = effective_pm(data, p)
    if base == 0:
        raise ValueError("cannot rescale a zero perturbation")
    delta = _delta(p)
    return [(float(n), attack_success_rate(target, data, delta * (n / base), batch_size))
            for n in norms]


def sign_noise(shape, epsilon: float, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    signs = torch.randint(0, 2, tuple(shape), generator=gen).float() * 2 - 1
    return signs * epsilon


def random_noise_baseline(target: ClassifierAdapter, data, epsilon: float, seeds: Sequence[int],
                          batch_size: int = 256) -> float:
    """Mean ASR of i.i.d. +-epsilon sign noise over ``seeds``."""
    split = _split(data)
    rates = [attack_success_rate(target, split, sign_noise(split.images.image_shape, epsilon, s),
                                 batch_size) for s in seeds]
    return float(np.mean(rates))


# -- report writers -----------------------------------------------------------


def write_json(path: str | Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if hasattr(payload, "to_dict"):
        payload = payload.to_dict()
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def sweep_rows(sweep: list[tuple[float, float]]) -> list[dict]:
    return [{"norm": n, "asr": a} for n, a in sweep]
