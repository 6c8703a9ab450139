"""End-to-end ECoG-to-mel network and input conditioning."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .dsp import SPEECH_RATE, normalize_channel, num_frames, resample
from .encoder import LatentEncoder
from .extractor import align_pair, build_extractor
from .melgen import MelGenerator


def prepare_ecog(rec) -> np.ndarray:
    """Upsample every channel to 16 kHz and z-score it: ``channels x samples``."""
    up = resample(rec.samples, rec.sample_rate, SPEECH_RATE)
    return np.stack([normalize_channel(ch) for ch in up])


def target_frames_for(n_samples_16k: int) -> int:
    return num_frames(n_samples_16k)


@dataclass
class Outputs:
    mel: Tensor  # (batch, frames, bins)
    c: Tensor  # (batch, latent frames, dim)
    s: Optional[Tensor]  # (batch, latent frames, dim) or None


class EcogMelModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.extractor = build_extractor(config.extractor)
        dim = self.extractor.dim
        self.encoder = LatentEncoder(config.channels, dim)
        self.melgen = MelGenerator(
            dim, bins=config.mel_bins, dim=config.d_model, heads=config.heads,
            ffn_dim=config.ffn_dim, n_blocks=config.fft_blocks,
            negative_slope=config.leaky_slope,
        )
        self.extractor_trainable = not config.extractor.frozen

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def coarse(self, ecog: Tensor) -> Tensor:
        """Z for a batch: (batch, channels, samples) -> (batch, channels, frames, dim)."""
        b, ch, n = ecog.shape
        z = self.extractor(ecog.reshape(b * ch, n))
        return z.reshape(b, ch, z.shape[1], z.shape[2])

    def speech_latent(self, speech: Tensor) -> Tensor:
        with torch.no_grad():
            return self.extractor(speech).detach()

    def forward(self, ecog: Optional[Tensor], target_frames: int, speech: Optional[Tensor] = None,
                z: Optional[Tensor] = None, s: Optional[Tensor] = None) -> Outputs:
        """Generate mel frames from ECoG (or a precomputed Z).

        ``speech`` (or a precomputed ``s``) adds the speech latent S to the
        outputs, trimmed to C's frame count.
        """
        if z is None:
            z = self.coarse(ecog)
        c = self.encoder(z)
        if s is None and speech is not None:
            s = self.speech_latent(speech)
        if s is not None:
            c, s = align_pair(c, s, dim=1)
        mel = self.melgen(c, target_frames)
        return Outputs(mel, c, s)

    @torch.no_grad()
    def synthesize(self, ecog_16k: np.ndarray, target_frames: Optional[int] = None) -> np.ndarray:
        """Predicted log-mel (``frames x bins``) for one conditioned recording."""
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(ecog_16k, dtype=dtype)[None]
        if target_frames is None:
            target_frames = target_frames_for(x.shape[-1])
        was_training = self.training
        self.eval()
        try:
            return self(x, target_frames).mel[0].numpy()
        finally:
            self.train(was_training)
