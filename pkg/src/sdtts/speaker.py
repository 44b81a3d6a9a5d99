"""Speaker adaptation: style encoder, timbre embedders, variance adapter,
length regulation and the AdaIN mel decoder."""

from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .content import alignment_matrix

# --------------------------------------------------------------------------
# style


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


class StyleEncoder(nn.Module):
    """Prompt mel (B, T, F) -> e_sty (B, ceil(T / 4), D_s).

    Two stride-2 convolutions, sinusoidal positional encoding and
    self-attention; no temporal averaging, so the time axis is kept.
    """

    stride = 4

    def __init__(self, n_mels, d_style, n_layers, n_heads):
        super().__init__()
        self.inp = nn.Linear(n_mels, d_style)
        self.down = nn.ModuleList(nn.Conv1d(d_style, d_style, 3, stride=2, padding=1) for _ in range(2))
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d_style, n_heads, 2 * d_style, dropout=0.0, batch_first=True)
            for _ in range(n_layers)
        )
        self.d_style = d_style

    @staticmethod
    def output_lengths(lengths: torch.Tensor) -> torch.Tensor:
        for _ in range(2):
            lengths = torch.div(lengths + 1, 2, rounding_mode="floor")
        return lengths

    def forward(self, mel, frame_mask):
        lengths = frame_mask.sum(1)
        x = F.leaky_relu(self.inp(mel), 0.2) * frame_mask[..., None]
        x = x.transpose(1, 2)
        mask = frame_mask
        for conv in self.down:
            x = F.leaky_relu(conv(x), 0.2)
            mask = mask[:, ::2]
            x = x * mask[:, None, :]
        out_mask = torch.arange(x.shape[-1])[None, :] < self.output_lengths(lengths)[:, None]
        x = x.transpose(1, 2) + sinusoidal_positions(x.shape[-1], self.d_style)[None]
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=~out_mask)
        return x * out_mask[..., None], out_mask


# --------------------------------------------------------------------------
# timbre

_EMBEDDERS: dict[str, Callable[..., "TimbreEmbedder"]] = {}


def register_embedder(name: str):
    def deco(cls):
        _EMBEDDERS[name] = cls
        return cls

    return deco


def build_embedder(name: str, **kwargs) -> "TimbreEmbedder":
    try:
        factory = _EMBEDDERS[name]
    except KeyError:
        raise KeyError(f"no timbre embedder registered as {name!r}; known: {sorted(_EMBEDDERS)}") from None
    return factory(**kwargs)


class TimbreEmbedder(nn.Module):
    """Frozen speaker embedder: mel (T, F) or padded batch -> (D_raw,) vectors.

    Subclasses implement :meth:`embed_batch`; they must not own trainable
    parameters.
    """

    dim: int

    def embed_batch(self, mel: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, mel, frame_mask=None):
        single = mel.dim() == 2
        if single:
            mel = mel[None]
        if frame_mask is None:
            frame_mask = torch.ones(mel.shape[:2], dtype=torch.bool)
        out = self.embed_batch(mel, frame_mask)
        return out[0] if single else out

    def embed(self, mel) -> np.ndarray:
        """Convenience numpy path for evaluation code."""
        frames = mel.frames if hasattr(mel, "frames") else mel
        with torch.no_grad():
            return self(torch.tensor(np.asarray(frames), dtype=torch.float32)).numpy().astype(np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@register_embedder("stub")
class StubEmbedder(TimbreEmbedder):
    """Fixed seeded random projection of per-bin mel mean and std over time."""

    def __init__(self, n_mels: int, dim: int, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(2 * n_mels, dim, generator=g) / math.sqrt(2 * n_mels)
        self.register_buffer("projection", w)
        self.dim = dim
        self.n_mels = n_mels

    def embed_batch(self, mel, frame_mask):
        m = frame_mask[..., None].to(mel.dtype)
        n = m.sum(1).clamp(min=1.0)
        mean = (mel * m).sum(1) / n
        var = (((mel - mean[:, None]) * m) ** 2).sum(1) / n
        stats = torch.cat([mean, torch.sqrt(var + 1e-5)], dim=-1)
        return stats @ self.projection.to(mel.dtype)


# --------------------------------------------------------------------------
# variance adapter


class AttributePredictor(nn.Module):
    def __init__(self, d_in, channels, kernel_size=3):
        super().__init__()
        self.conv1 = nn.Conv1d(d_in, channels, kernel_size, padding=kernel_size // 2)
        self.norm1 = nn.LayerNorm(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.norm2 = nn.LayerNorm(channels)
        self.out = nn.Linear(channels, 1)

    def forward(self, x, mask):
        m = mask[..., None].float()
        h = self.norm1(F.relu(self.conv1((x * m).transpose(1, 2))).transpose(1, 2)) * m
        h = self.norm2(F.relu(self.conv2(h.transpose(1, 2))).transpose(1, 2)) * m
        return self.out(h).squeeze(-1) * mask


class VarianceAdapter(nn.Module):
    """Style-conditioned duration / pitch / energy predictors.

    Content input is detached, so predictor losses never reach the content
    path; the style encoder is trained through these losses.
    """

    def __init__(self, d_model, d_style, channels, n_heads):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, kdim=d_style, vdim=d_style, batch_first=True)
        self.norm = nn.LayerNorm(d_model)
        self.duration = AttributePredictor(d_model, channels)
        self.pitch = AttributePredictor(d_model, channels)
        self.energy = AttributePredictor(d_model, channels)

    def attend(self, e_con, e_sty, style_mask):
        out, _ = self.cross_attn(e_con, e_sty, e_sty, key_padding_mask=~style_mask, need_weights=False)
        return out

    def forward(self, e_con, mask, e_sty, style_mask):
        x = e_con.detach()
        x = self.norm(x + self.attend(x, e_sty, style_mask)) * mask[..., None]
        return self.duration(x, mask), self.pitch(x, mask), self.energy(x, mask)


def durations_from_log(log_dur: torch.Tensor) -> torch.Tensor:
    """exp, round half up, clamp >= 1."""
    return torch.floor(torch.exp(log_dur) + 0.5).clamp(min=1).long()


def length_regulate(e_con: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row i of e_con (L, D) durations[i] times -> (sum(durations), D)."""
    d = torch.as_tensor(durations, dtype=torch.long)
    if d.dim() != 1 or d.shape[0] != e_con.shape[0]:
        raise ValueError(f"need {e_con.shape[0]} durations, got shape {tuple(d.shape)}")
    if bool((d < 1).any()):
        raise ValueError("durations must be positive")
    return torch.repeat_interleave(e_con, d, dim=0)


def expand_batch(x: torch.Tensor, durations: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Batched length regulation: (B, L, *) with (B, L) durations -> (B, T, *)."""
    align = alignment_matrix(durations, n_frames).to(x.dtype)
    if x.dim() == 2:
        return (align.transpose(1, 2) @ x[..., None]).squeeze(-1)
    return align.transpose(1, 2) @ x


# --------------------------------------------------------------------------
# decoder


class AdaIN(nn.Module):
    """Masked instance norm over time, then gamma * x + beta from e_spk.

    gamma = 1 + W_g e_spk + b_g and beta = W_b e_spk + b_b.
    """

    eps = 1e-5

    def __init__(self, channels, d_spk):
        super().__init__()
        self.affine = nn.Linear(d_spk, 2 * channels)

    def style(self, e_spk):
        gamma, beta = self.affine(e_spk).chunk(2, dim=-1)
        return 1.0 + gamma, beta

    def forward(self, x, m, e_spk):
        # x: (B, C, T); m: (B, 1, T)
        n = m.sum(-1, keepdim=True).clamp(min=1.0)
        mean = (x * m).sum(-1, keepdim=True) / n
        var = (((x - mean) * m) ** 2).sum(-1, keepdim=True) / n
        x_hat = (x - mean) / torch.sqrt(var + self.eps)
        gamma, beta = self.style(e_spk)
        return (gamma[..., None] * x_hat + beta[..., None]) * m


class AdaINResBlock(nn.Module):
    def __init__(self, channels, d_spk, dilation):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.norm1 = AdaIN(channels, d_spk)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)
        self.norm2 = AdaIN(channels, d_spk)

    def forward(self, x, m, e_spk, trace=None):
        y = self.norm1(self.conv1(x) * m, m, e_spk)
        if trace is not None:
            trace.append((y, self.norm1, self.conv1))
        y = F.leaky_relu(y, 0.2)
        y = self.norm2(self.conv2(y) * m, m, e_spk)
        if trace is not None:
            trace.append((y, self.norm2, self.conv2))
        return F.leaky_relu(x + y, 0.2)


class MelDecoder(nn.Module):
    """Frame features H (B, T, D) + timbre e_spk (B, D_spk) -> mel (B, T, F).

    Residual blocks with dilations 1, 2, 4, ... each carry two AdaIN layers.
    """

    def __init__(self, d_model, channels, n_mels, d_spk, n_blocks):
        super().__init__()
        self.inp = nn.Conv1d(d_model, channels, 3, padding=1)
        self.blocks = nn.ModuleList(AdaINResBlock(channels, d_spk, 2**i) for i in range(n_blocks))
        self.out = nn.Conv1d(channels, n_mels, 3, padding=1)

    def forward(self, h, frame_mask, e_spk, trace=None):
        m = frame_mask[:, None, :].float()
        x = self.inp(h.transpose(1, 2) * m) * m
        for block in self.blocks:
            x = block(x, m, e_spk, trace) * m
        return (self.out(x) * m).transpose(1, 2)
