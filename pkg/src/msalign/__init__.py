"""Multi-scale image-text alignment on a small numpy autodiff engine."""

from .config import LossConfig, TrainConfig, config_from_text, config_to_text
from .evalkit import (RetrievalReport, evaluate, retrieve_eval, run_ablation,
                      scale_diagnostics)
from .objectives import cma_loss, csmmc_loss, mmc_loss, mscma_loss, total_loss, triplet_loss
from .synth import SynthSpec, load_dataset, save_dataset, synth_dataset
from .tensor_core import GradTape, Tensor, backward, grad_check
from .trainer import ModelState, adam_step, train

__all__ = [
    "GradTape", "LossConfig", "ModelState", "RetrievalReport", "SynthSpec", "Tensor",
    "TrainConfig", "adam_step", "backward", "cma_loss", "config_from_text", "config_to_text",
    "csmmc_loss", "evaluate", "grad_check", "load_dataset", "mmc_loss", "mscma_loss",
    "retrieve_eval", "run_ablation", "save_dataset", "scale_diagnostics", "synth_dataset",
    "total_loss", "train", "triplet_loss",
]
__version__ = "0.1.0"
