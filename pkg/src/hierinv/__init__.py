"""Multi-stage self-supervised pretraining with per-stage augmentation sets."""
from .config import Config, ConfigError, load_config, parse_config
from .estimator import HierarchicalContrastive
from .model import HierarchicalModel, ModelConfig
from .objectives import barlow_twins_loss, overall_loss, simsiam_loss
from .probes import aug_probe, invariance_report, linear_probe
from .trainer import pretrain

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "HierarchicalContrastive", "HierarchicalModel", "ModelConfig",
           "aug_probe", "barlow_twins_loss", "invariance_report", "linear_probe", "load_config",
           "overall_loss", "parse_config", "pretrain", "simsiam_loss"]
