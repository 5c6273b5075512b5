"""Desk-scale experiment: synthetic 10-class 32x32 scenes, three small CNN
targets and one linear target, trained reproducibly on CPU."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import torch

from .core import LabeledDataset, Perturbation
from .data import make_desk_dataset
from .generator import GeneratorConfig, build_generator, sample_noise
from .models import ClassifierAdapter, ModelSpec, accuracy, train_classifier
from .refinement import RefineConfig, refine
from .saliency import WeightedAttentionImage, attention_image
from .trainer import TrainConfig, TrainLog, train_uap

SHAPE = (32, 32, 3)

DESK_SPECS = (
    (ModelSpec("cnn_a", "small_cnn", 10, SHAPE, width=32, epochs=15), 0),
    (ModelSpec("cnn_b", "small_cnn", 10, SHAPE, width=32, epochs=15), 1),
    (ModelSpec("cnn_wide", "small_cnn", 10, SHAPE, width=48, epochs=15), 2),
    (ModelSpec("linear", "toy_linear", 10, SHAPE, epochs=15), 3),
)

# Plain SGD at lr 1e-3 stalls in tanh saturation on these targets; Adam keeps the
# same learning rate and weight decay.
DESK_TRAIN = TrainConfig(optimizer="adam")


@dataclass
class DeskRun:
    mid: Perturbation
    log: TrainLog
    attention: WeightedAttentionImage
    fin: Perturbation


@dataclass
class DeskScenario:
    """Lazily trains classifiers and perturbations; everything is seeded."""

    classifier_seed: int = 100
    attack_seed: int = 7
    classifier_per_class: int = 300
    attack_train_per_class: int = 50
    attack_val_per_class: int = 100
    train: TrainConfig = DESK_TRAIN
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(SHAPE, 10.0))
    refine: RefineConfig = field(default_factory=RefineConfig)
    _models: dict = field(default_factory=dict, repr=False)
    _runs: dict = field(default_factory=dict, repr=False)

    @cached_property
    def classifier_data(self) -> LabeledDataset:
        return make_desk_dataset(self.classifier_per_class, 100, seed=self.classifier_seed)

    @cached_property
    def attack_data(self) -> LabeledDataset:
        return make_desk_dataset(self.attack_train_per_class, self.attack_val_per_class,
                                 seed=self.attack_seed)

    def spec(self, model_id: str) -> tuple[ModelSpec, int]:
        for spec, seed in DESK_SPECS:
            if spec.model_id == model_id:
                return spec, seed
        raise KeyError(model_id)

    def model(self, model_id: str) -> ClassifierAdapter:
        if model_id not in self._models:
            spec, seed = self.spec(model_id)
            self._models[model_id] = train_classifier(spec, self.classifier_data, seed)
        return self._models[model_id]

    def classifier_accuracy(self, model_id: str) -> float:
        return accuracy(self.model(model_id), self.classifier_data.validation)

    def run(self, model_id: str) -> DeskRun:
        if model_id not in self._runs:
            target = self.model(model_id)
            gen = build_generator(self.generator)
            mid, log = train_uap(gen, target, self.attack_data, self.train, sample_noise(self.generator))
            attn = attention_image(target, self.attack_data.train)
            self._runs[model_id] = DeskRun(mid, log, attn, refine(mid, attn, self.refine))
        return self._runs[model_id]
