"""Universal adversarial perturbations via an encoder-decoder generator,
refined by aggregated class-activation attention."""

from .core import (ImageBatch, LabeledDataset, Perturbation, PixelRange, Split, apply_perturbation,
                   perturbation_l2, project_to_ball, read_uapf, write_uapf)
from .evaluation import (EvaluationReport, SelectivityDistribution, TransferMatrix,
                         attack_success_rate, clean_accuracy, effective_pm, evaluate, norm_sweep,
                         random_noise_baseline, selectivity, transfer_matrix)
from .generator import Generator, GeneratorConfig, build_generator, forward, sample_noise
from .models import ClassifierAdapter, ModelSpec, Registry, load_external, train_classifier
from .refinement import RefineConfig, choose_threshold, refine
from .saliency import (BinaryMap, SaliencyMap, WeightedAttentionImage, aggregate, attention_image,
                       binarize, compute_saliency, save_attention_png)
from .trainer import TrainConfig, TrainLog, cross_entropy, train_uap

__version__ = "0.1.0"
