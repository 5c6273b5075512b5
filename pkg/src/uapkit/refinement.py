"""Attention-guided amplify/attenuate pass turning a ``mid`` perturbation into ``fin``."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import Perturbation, project_to_ball
from .saliency import WeightedAttentionImage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    alpha: float = 1.2
    beta: float = 0.8
    T: Optional[float] = None
    reproject: bool = True

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")


def choose_threshold(attn: WeightedAttentionImage) -> float:
    """Median attention count (mean of the middle pair for even sizes)."""
    return float(np.median(attn.values))


def refine(p: Perturbation, attn: WeightedAttentionImage, cfg: RefineConfig = RefineConfig()) -> Perturbation:
    """Scale ``p`` by alpha where attention >= T and by beta elsewhere, on every channel."""
    if p.stage != "mid":
        raise ValueError(f"refine expects a 'mid' perturbation, got stage {p.stage!r}")
    if attn.shape != p.shape[:2]:
        raise ValueError(f"attention shape {attn.shape} does not match perturbation {p.shape[:2]}")
    T = choose_threshold(attn) if cfg.T is None else float(cfg.T)
    if not 0 <= T <= attn.num_sources:
        log.warning("threshold T=%g outside [0, %d]", T, attn.num_sources)
    hot = torch.from_numpy(attn.values >= T)[:, :, None]
    scale = torch.where(hot, torch.tensor(cfg.alpha, dtype=torch.float64),
                        torch.tensor(cfg.beta, dtype=torch.float64))
    out = (p.delta.double() * scale).to(p.delta.dtype)
    epsilon = p.epsilon
    if cfg.reproject:
        out = project_to_ball(out, epsilon)
    elif float(out.abs().max()) > epsilon:
        epsilon = float(out.abs().max())
        log.warning("unprojected refinement exceeds budget %g; recorded budget widened to %g",
                    p.epsilon, epsilon)
    return Perturbation(out, epsilon, "fin", p.source_model_id)
