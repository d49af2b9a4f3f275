"""Two-stage contrastive + self-distillation retrieval over precomputed speech/text features."""

from .gradcore import Parameter, check_gradients
from .losses import DistillTemperatures, LossMode, distillation_loss, info_nce, kl_divergence
from .model import (ClapModel, LayerStack, TeacherSnapshot, TextFeature, encode_speech,
                    encode_text, snapshot_teacher)

__version__ = "0.1.0"

__all__ = [
    "ClapModel", "DistillTemperatures", "LayerStack", "LossMode", "Parameter",
    "TeacherSnapshot", "TextFeature", "check_gradients", "distillation_loss",
    "encode_speech", "encode_text", "info_nce", "kl_divergence", "snapshot_teacher",
]
