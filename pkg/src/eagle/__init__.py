"""Wavelet-guided state-space U-Net for hepatic echinococcosis lesion segmentation."""
from .model import Eagle, EagleConfig
from .train import OptimConfig, train_loop

__all__ = ["Eagle", "EagleConfig", "OptimConfig", "train_loop"]
__version__ = "0.1.0"
