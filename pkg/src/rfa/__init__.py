"""Robustness feature adapter (RFA) adversarial-training lab on numpy."""

from .numcore import Rng, Tensor, backward, finite_diff_check
from .datasets import BatchPlan, Dataset, load_idx, synth_blobs
from .backbone import SplitNet, load_checkpoint, ref_net_c, ref_net_d, save_checkpoint
from .attacks import AttackSpec, fgsm, pgd_feature, pgd_input, run_attack
from .adapter import LossWeights, RfaInference, RfaModule, distill_infer
from .trainer import RunRecord, TrainConfig, detect_ro, train_at_baseline, train_fb, train_standard, train_ub

__version__ = "0.1.0"

__all__ = [
    "Rng", "Tensor", "backward", "finite_diff_check",
    "BatchPlan", "Dataset", "load_idx", "synth_blobs",
    "SplitNet", "load_checkpoint", "ref_net_c", "ref_net_d", "save_checkpoint",
    "AttackSpec", "fgsm", "pgd_feature", "pgd_input", "run_attack",
    "LossWeights", "RfaInference", "RfaModule", "distill_infer",
    "RunRecord", "TrainConfig", "detect_ro", "train_at_baseline", "train_fb", "train_standard", "train_ub",
]
