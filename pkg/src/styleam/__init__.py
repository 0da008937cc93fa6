"""Perception-oriented unsupervised domain adaptation for no-reference image quality assessment."""

from .alignment import relaxation_flag, relaxed_discriminator_bce
from .config import TrainingConfig
from .metrics import evaluate_predictions, plcc, srocc
from .nn import StyleAMNet, grl_apply
from .style import adain_transfer, extract_style, mix_styles_and_labels

__version__ = "0.1.0"
