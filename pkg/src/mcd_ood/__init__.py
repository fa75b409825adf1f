"""Out-of-distribution detection by maximizing the discrepancy between two classifier heads."""

from .errors import ConfigError, ContractError, DataError, FormatError, McdError, MetricsError, TrainingError
from .losses import combined_loss, discrepancy, entropy, supervised_loss, unsupervised_loss
from .metrics import MetricsReport, auroc, aupr_in, aupr_out, detection_error, fpr_at_tpr, l1_score
from .model import TwoHeadConfig, TwoHeadModel, init_model
from .trainer import TrainConfig, finetune, pretrain

__version__ = "0.1.0"
