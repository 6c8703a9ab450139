import torch
from torch import Tensor, nn


class LatentEncoder(nn.Module):
    """Merge channels with a linear map, then add a unidirectional GRU on top (residual).

    ``merged = FC_channels(Z)``; ``C = merged + GRU(merged)``.
    """

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.channels = channels
        self.channel_merge = nn.Linear(channels, 1)
        self.gru = nn.GRU(dim, dim, num_layers=1, batch_first=True)

    def merge(self, z: Tensor) -> Tensor:
        # z: (batch, channels, frames, dim) -> (batch, frames, dim)
        if z.shape[1] != self.channels:
            raise ValueError(f"encoder expects {self.channels} channels, got {z.shape[1]}")
        return self.channel_merge(z.permute(0, 2, 3, 1)).squeeze(-1)

    def forward(self, z: Tensor) -> Tensor:
        merged = self.merge(z)
        return merged + self.gru(merged)[0]


def latent_encode(z: Tensor, encoder: LatentEncoder) -> Tensor:
    """C (``frames x dim``) from one unbatched Z (``channels x frames x dim``)."""
    if not torch.all(torch.isfinite(z)):
        raise ValueError("Z contains non-finite values")
    return encoder(z[None])[0]
