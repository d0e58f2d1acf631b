"""Rectifier-modulated diffusion reconstruction and editing on toy images."""
from .errors import RectDiffError

__version__ = "0.1.0"
