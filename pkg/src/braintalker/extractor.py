"""Per-channel feature extractors producing Z (ECoG) and S (speech).

Two interchangeable backends share the 20 ms / 50 Hz frame rate of a
wav2vec-style strided convolution frontend:

* ``scratch``: a randomly initialised conv frontend + pre-LN FFT stack
  (12 blocks, width 512, feed-forward hidden 128 by default).
* ``pretrained``: a frozen wav2vec 2.0 checkpoint loaded from a local
  directory through ``transformers`` (optional dependency).
"""

import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .melgen import PreLNFFTBlock, sinusoidal_positions

CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)
FRAME_STRIDE = 320
RECEPTIVE_FIELD = 400
CACHE_ENV = "BRAINTALKER_CACHE"


def frontend_frames(n_samples: int) -> int:
    """Output length of the strided frontend for ``n_samples`` of 16 kHz input."""
    n = n_samples
    for k, s in zip(CONV_KERNELS, CONV_STRIDES):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "scratch"
    dim: int = 512
    frozen: bool = False
    n_blocks: int = 12
    ffn_dim: int = 128
    heads: int = 8
    conv_dim: int = 512
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("scratch", "pretrained"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "pretrained" and not self.frozen:
            raise ValueError("a pretrained extractor must be frozen")

    @classmethod
    def pretrained(cls, checkpoint_dir=None, dim: int = 768):
        return cls(kind="pretrained", dim=dim, frozen=True, checkpoint_dir=checkpoint_dir)

    def to_dict(self) -> dict:
        return asdict(self)


class ScratchExtractor(nn.Module):
    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        self.spec = spec
        layers, in_ch = [], 1
        for i, (k, s) in enumerate(zip(CONV_KERNELS, CONV_STRIDES)):
            layers.append(nn.Conv1d(in_ch, spec.conv_dim, k, stride=s, bias=False))
            if i == 0:
                layers.append(nn.GroupNorm(spec.conv_dim, spec.conv_dim))
            layers.append(nn.GELU())
            in_ch = spec.conv_dim
        self.frontend = nn.Sequential(*layers)
        self.proj_norm = nn.LayerNorm(spec.conv_dim)
        self.proj = nn.Linear(spec.conv_dim, spec.dim)
        self.blocks = nn.ModuleList(
            PreLNFFTBlock(spec.dim, spec.heads, spec.ffn_dim) for _ in range(spec.n_blocks)
        )
        self.norm = nn.LayerNorm(spec.dim)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def forward(self, waves: Tensor) -> Tensor:
        """(batch, samples) -> (batch, frames, dim)."""
        h = self.frontend(waves[:, None, :]).transpose(1, 2)
        h = self.proj(self.proj_norm(h))
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)


class PretrainedExtractor(nn.Module):
    """Frozen wav2vec 2.0 adapter returning the final transformer hidden states."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        try:
            from transformers import Wav2Vec2Model
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ImportError("the pretrained extractor needs the 'transformers' package") from exc
        path = spec.checkpoint_dir or os.environ.get(CACHE_ENV)
        if not path or not os.path.isdir(path):
            raise FileNotFoundError(
                f"pretrained extractor checkpoint directory not found: {path!r} "
                f"(set checkpoint_dir or ${CACHE_ENV})"
            )
        self.model = Wav2Vec2Model.from_pretrained(path, local_files_only=True)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.spec = spec
        self._dim = self.model.config.hidden_size

    @property
    def dim(self) -> int:
        return self._dim

    def train(self, mode: bool = True):
        # weights and dropout stay in inference mode
        super().train(mode)
        self.model.eval()
        return self

    def forward(self, waves: Tensor) -> Tensor:
        dtype = next(self.model.parameters()).dtype
        return self.model(waves.to(dtype)).last_hidden_state.to(waves.dtype)


def build_extractor(spec: ExtractorSpec) -> nn.Module:
    extractor = PretrainedExtractor(spec) if spec.kind == "pretrained" else ScratchExtractor(spec)
    if spec.frozen:
        for p in extractor.parameters():
            p.requires_grad_(False)
    return extractor


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_batch(x) -> Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x)
    return t.float() if t.dtype not in (torch.float32, torch.float64) else t


def extract_features(wave, extractor: nn.Module) -> Tensor:
    """Feature sequence ``frames x dim`` for one 16 kHz waveform (inference mode)."""
    x = _as_batch(getattr(wave, "samples", wave))
    if x.ndim != 1:
        raise ValueError(f"expected a single waveform, got shape {tuple(x.shape)}")
    if frontend_frames(x.shape[0]) < 1:
        raise ValueError(f"waveform of {x.shape[0]} samples is too short for one output frame")
    with torch.no_grad():
        return extractor(x[None].to(_param_dtype(extractor, x.dtype)))[0]


def _param_dtype(module, default):
    p = next(module.parameters(), None)
    return default if p is None else p.dtype


def extract_ecog(channels, extractor: nn.Module) -> Tensor:
    """Stack per-channel features into Z: ``channels x frames x dim``.

    ``channels`` holds 16 kHz, normalised channel signals (a 2-D array or a
    sequence of equal-length vectors). Gradients flow unless the caller
    disables them.
    """
    if isinstance(channels, (list, tuple)):
        lengths = {len(c) for c in channels}
        if len(lengths) > 1:
            raise ValueError(f"ECoG channels disagree on length: {sorted(lengths)}")
        channels = np.stack([np.asarray(c) for c in channels])
    x = _as_batch(getattr(channels, "samples", channels))
    if x.ndim != 2:
        raise ValueError(f"expected channels x samples, got shape {tuple(x.shape)}")
    if frontend_frames(x.shape[1]) < 1:
        raise ValueError(f"recording of {x.shape[1]} samples is too short for one output frame")
    return extractor(x.to(_param_dtype(extractor, x.dtype)))


def extract_speech_latent(wave, extractor: nn.Module, ecog_frames: Optional[int] = None) -> Tensor:
    """S for a speech waveform; never carries gradient into the extractor."""
    s = extract_features(wave, extractor)
    if ecog_frames is not None:
        s = match_frames(s, ecog_frames)
    return s


def match_frames(seq: Tensor, frames: int) -> Tensor:
    """Trim ``seq`` (frames first) to ``frames`` when it is exactly one longer."""
    n = seq.shape[0]
    if abs(n - frames) > 1:
        raise ValueError(f"frame count mismatch: {n} vs {frames} (more than one frame apart)")
    return seq[:frames]


def align_pair(c: Tensor, s: Tensor, dim: int = 0):
    """Trim the longer of two sequences at the end when they differ by one frame."""
    n = min(c.shape[dim], s.shape[dim])
    if abs(c.shape[dim] - s.shape[dim]) > 1:
        raise ValueError(
            f"frame count mismatch between ECoG ({c.shape[dim]}) and speech ({s.shape[dim]}) latents"
        )
    return c.narrow(dim, 0, n), s.narrow(dim, 0, n)
