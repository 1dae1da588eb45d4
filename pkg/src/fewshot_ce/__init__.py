"""Attention-based few-shot OFDM channel estimation on a scratch autodiff engine."""

from .config import Config, load_config
from .models import Model, SwitchNet, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["Config", "Model", "SwitchNet", "load_checkpoint", "load_config", "save_checkpoint"]
