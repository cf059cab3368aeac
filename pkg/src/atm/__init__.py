"""Desk-scale masked speech modeling with confidence-guided masking."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, gradient_check
from .config import RunConfig
from .masking import MaskPlan, MaskStrategy, expand_mask, mask_stats, num_blocks, sample_starts
from .msm import LossBreakdown, MsmModel, msm_step
from .scorer import ConfidenceTrack, PosteriorGrid, ScorerModel, score_frames, train_scorer
from .synth import SynthConfig, synth_corpus

__all__ = [
    "Tensor", "backward", "gradient_check", "RunConfig",
    "MaskPlan", "MaskStrategy", "expand_mask", "mask_stats", "num_blocks", "sample_starts",
    "LossBreakdown", "MsmModel", "msm_step",
    "ConfidenceTrack", "PosteriorGrid", "ScorerModel", "score_frames", "train_scorer",
    "SynthConfig", "synth_corpus",
]
