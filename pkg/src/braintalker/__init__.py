"""Speech synthesis from ECoG: feature extraction, latent encoding and mel generation."""

__version__ = "0.1.0"
