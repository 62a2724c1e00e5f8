"""Scorer interfaces, so pretrained scorers can replace the desk-scale ones."""

from typing import Protocol, runtime_checkable

from src.services.spectra import MelSpectrogram


@runtime_checkable
class AdherenceScorer(Protocol):
    """How strongly a clip expresses a target attribute class."""

    def adherence(self, clip: MelSpectrogram, target_class: str) -> float:
        """Return a score in [0, 1]; higher means closer to ``target_class``."""
        ...
