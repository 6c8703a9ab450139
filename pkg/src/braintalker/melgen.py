"""Mel generator: transposed-convolution upsampling, pre-LN FFT blocks, projection to mel bins."""

import math

import torch
from torch import Tensor, nn


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


class PreLNFFTBlock(nn.Module):
    """Feed-forward Transformer block with layer norm inside each residual branch.

    ``y = x + MHSA(LN(x))``, ``z = y + FFN(LN(y))``.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, eps: float = 1e-5):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attention = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.feedforward = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.ReLU(),
            nn.Linear(ffn_dim, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attention(h, h, h, need_weights=False)[0]
        return x + self.feedforward(self.norm2(x))

    def zero_residual_branches(self):
        """Zero the output projections so the block is exactly the identity."""
        for lin in (self.attention.out_proj, self.feedforward[-1]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class UpsampleBlock(nn.Module):
    """LeakyReLU -> ConvT(stride 2) -> LeakyReLU -> ConvT(stride 1): doubles the frame rate."""

    def __init__(self, in_dim: int, dim: int, negative_slope: float = 0.1):
        super().__init__()
        self.act = nn.LeakyReLU(negative_slope)
        self.up = nn.ConvTranspose1d(in_dim, dim, kernel_size=4, stride=2, padding=1)
        self.refine = nn.ConvTranspose1d(dim, dim, kernel_size=3, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        # (batch, frames, dim) in and out
        h = self.up(self.act(x.transpose(1, 2)))
        h = self.refine(self.act(h))
        return h.transpose(1, 2)


class MelGenerator(nn.Module):
    def __init__(self, in_dim: int, bins: int = 13, dim: int = 256, heads: int = 4,
                 ffn_dim: int = 1024, n_blocks: int = 8, negative_slope: float = 0.1):
        super().__init__()
        self.bins = bins
        self.upsample = UpsampleBlock(in_dim, dim, negative_slope)
        self.blocks = nn.ModuleList(PreLNFFTBlock(dim, heads, ffn_dim) for _ in range(n_blocks))
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, bins)

    def forward(self, c: Tensor, target_frames: int) -> Tensor:
        """``c``: (batch, frames, in_dim) -> (batch, target_frames, bins)."""
        check_target_frames(c.shape[1], target_frames)
        h = self.upsample(c)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.norm(h))[:, :target_frames]


def check_target_frames(latent_frames: int, target_frames: int):
    hi = 2 * latent_frames
    if not hi - 2 <= target_frames <= hi:
        raise ValueError(
            f"target of {target_frames} mel frames is incompatible with {latent_frames} latent frames "
            f"(expected {max(hi - 2, 0)}..{hi})"
        )
