"""Dual image watermarking: a bit payload for ownership plus a hidden localization image
whose decoding artifacts, read by a learned extractor, reveal where an image was edited."""

from .config import Config, load_config
from .system import Checkpoint, DualWatermarkSystem, load_system

__all__ = ["Config", "load_config", "Checkpoint", "DualWatermarkSystem", "load_system"]
__version__ = "0.1.0"
