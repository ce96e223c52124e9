"""purifybench: adversarial purification with convergent energy-based models.

Library layout:

- ``rng``         deterministic counter-based random streams
- ``tensor``      reverse-mode autodiff on numpy arrays
- ``nets``        ConvNet potentials / classifiers and checkpoint files
- ``sampler``     Langevin dynamics and the persistent chain bank
- ``trainer``     maximum-likelihood EBM training (Adam-to-SGD switch)
- ``data``        synthetic glyphs and IDX ingestion
- ``defense``     expectation-over-transformation classifier
- ``attack``      PGD / EOT / BPDA attacks and the evaluation harness
- ``diagnostics`` energy separation, step sweep, Lyapunov, Fréchet distance
- ``cli``         reproducible command-line runs
"""

from .attack import AttackConfig, evaluate_defense, evaluate_transfer
from .data import Dataset, generate_glyphs, load_idx
from .defense import EotConfig, eot_label, eot_logits
from .diagnostics import LyapunovConfig, frechet_feature_distance, lyapunov
from .nets import ClassifierNet, EnergyNet, load_checkpoint, make_net, save_checkpoint
from .rng import Rng, StreamBank, derive_key
from .sampler import ChainBank, LangevinConfig, langevin_step, transform
from .tensor import Tape, Tensor
from .trainer import TrainConfig, train_classifier, train_ebm

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ChainBank", "ClassifierNet", "Dataset", "EnergyNet",
    "EotConfig", "LangevinConfig", "LyapunovConfig", "Rng", "StreamBank",
    "Tape", "Tensor", "TrainConfig", "derive_key", "eot_label", "eot_logits",
    "evaluate_defense", "evaluate_transfer", "frechet_feature_distance",
    "generate_glyphs", "langevin_step", "load_checkpoint", "load_idx",
    "lyapunov", "make_net", "save_checkpoint", "train_classifier",
    "train_ebm", "transform",
]
