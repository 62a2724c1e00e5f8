# Services module

from .interfaces import AdherenceScorer
from .errors import MusicEditorError
from .config_manager import ConfigManager, ConfigurationError
from .codec import LatentCodec, Latent
from .denoiser import Checkpoint, Denoiser
from .repository import AttentionRepository

__all__ = [
    "AdherenceScorer",
    "MusicEditorError",
    "ConfigManager",
    "ConfigurationError",
    "LatentCodec",
    "Latent",
    "Checkpoint",
    "Denoiser",
    "AttentionRepository"
]
