"""Consistent proxy tuning of black-box classifiers, at desk scale."""

from .diffcore import Tape, Tensor, cross_entropy, softmax
from .errors import ConfigError
from .models import (Checkpoint, DualEncoderClassifier, MlpClassifier, ModelHandle, Role,
                     ScalarLogistic, TunableHandle, forward_logits, load_checkpoint,
                     save_checkpoint)
from .proxy import (AlphaPair, EnsembledLogits, ProxyTriple, cpt_loss, ensemble_logits,
                    proxy_predict, vanilla_proxy_config)
from .trainer import TrainConfig, TrainReport, cpt_tune, finetune_plain, pretrain

__all__ = [
    "AlphaPair", "Checkpoint", "ConfigError", "DualEncoderClassifier", "EnsembledLogits",
    "MlpClassifier", "ModelHandle", "ProxyTriple", "Role", "ScalarLogistic", "Tape", "Tensor",
    "TrainConfig", "TrainReport", "TunableHandle", "cpt_loss", "cpt_tune", "cross_entropy",
    "ensemble_logits", "finetune_plain", "forward_logits", "load_checkpoint", "pretrain",
    "proxy_predict", "save_checkpoint", "softmax", "vanilla_proxy_config",
]
__version__ = "0.1.0"
