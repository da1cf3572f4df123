"""Multimodal fusion with a one-class hypersphere objective for frame-level video anomaly detection."""
from .cae import CaeConfig, CaeModel, PretrainConfig, pretrain
from .config import RunConfig, load_config
from .fusion import FusionBlock, FusionConfig, fusion_forward
from .metrics import AucReport, ScoreSeries, evaluate, roc_auc
from .svdd import AnomalyModel, SvddConfig, finetune, init_centers, score

__version__ = "0.1.0"
