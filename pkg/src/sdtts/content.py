"""Content extraction: linguistic encoder, phoneme-level mel encoder,
variational posterior, volume-preserving flow and content fusion.

All modules work on padded batches with boolean masks (True = valid).
Shapes: phoneme axis L, frame axis T, batch B.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def alignment_matrix(durations: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Hard phoneme-to-frame assignment, shape (B, L, T), entries in {0, 1}.

    Padded phonemes must carry duration 0.
    """
    ends = torch.cumsum(durations, dim=1)
    starts = ends - durations
    t = torch.arange(n_frames, device=durations.device)[None, None, :]
    return ((t >= starts[..., None]) & (t < ends[..., None])).float()


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with a learned bias per clipped relative offset."""

    def __init__(self, d_model: int, n_heads: int, window: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.window = window
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.rel_bias = nn.Parameter(torch.zeros(n_heads, 2 * window + 1))
        nn.init.normal_(self.rel_bias, std=0.02)

    def forward(self, x, mask):
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        pos = torch.arange(n, device=x.device)
        offset = (pos[None, :] - pos[:, None]).clamp(-self.window, self.window) + self.window
        scores = scores + self.rel_bias[:, offset][None]
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FFTBlock(nn.Module):
    def __init__(self, d_model, n_heads, d_ffn, window, kernel_size=3):
        super().__init__()
        self.attn = RelativeSelfAttention(d_model, n_heads, window)
        self.norm1 = nn.LayerNorm(d_model)
        self.conv1 = nn.Conv1d(d_model, d_ffn, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(d_ffn, d_model, kernel_size, padding=kernel_size // 2)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, mask):
        m = mask[..., None].float()
        x = self.norm1(x + self.attn(x, mask)) * m
        y = self.conv2(F.relu(self.conv1(x.transpose(1, 2))) * m.transpose(1, 2)).transpose(1, 2)
        return self.norm2(x + y) * m


class LinguisticEncoder(nn.Module):
    """Phoneme ids (B, L) -> e_ling (B, L, D)."""

    def __init__(self, vocab_size, d_model, n_layers, n_heads, d_ffn, window):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.embed.weight, std=d_model**-0.5)
        self.blocks = nn.ModuleList(FFTBlock(d_model, n_heads, d_ffn, window) for _ in range(n_layers))
        self.scale = math.sqrt(d_model)

    def forward(self, ids, mask):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError(f"phoneme id out of vocabulary [0, {self.vocab_size})")
        x = self.embed(ids) * self.scale * mask[..., None]
        for block in self.blocks:
            x = block(x, mask)
        return x


class ResBlock2d(nn.Module):
    """Residual 2-D block over (time, mel); halves the mel axis, keeps time."""

    def __init__(self, c_in, c_out, kernel_time):
        super().__init__()
        kt = kernel_time
        self.conv1 = nn.Conv2d(c_in, c_out, (kt, 3), stride=(1, 2), padding=(kt // 2, 1))
        self.conv2 = nn.Conv2d(c_out, c_out, (kt, 3), padding=(kt // 2, 1))
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=(1, 2))

    def forward(self, x, m):
        y = F.leaky_relu(self.conv1(x), 0.2) * m
        y = self.conv2(y) * m
        return F.leaky_relu(y + self.skip(x) * m, 0.2)


class MelEncoder(nn.Module):
    """Frame-level 2-D ResNet followed by per-phoneme average pooling.

    Downsampling acts on the mel axis only so the frame grid stays aligned with
    the phoneme durations.  Temporal receptive field of a frame feature is
    ``1 + (kernel_time - 1) * (1 + 2 * n_blocks)`` frames; with
    ``kernel_time=1`` (pointwise mode) each frame feature depends on that frame
    alone, so a phoneme's pooled row depends only on its own frames.
    """

    def __init__(self, n_mels, d_model, channels, n_blocks, kernel_time):
        super().__init__()
        kt = kernel_time
        if kt < 1 or kt % 2 == 0:
            raise ValueError("kernel_time must be a positive odd integer")
        self.stem = nn.Conv2d(1, channels, (kt, 3), padding=(kt // 2, 1))
        self.blocks = nn.ModuleList(ResBlock2d(channels, channels, kt) for _ in range(n_blocks))
        f = n_mels
        for _ in range(n_blocks):
            f = (f + 1) // 2
        self.proj = nn.Linear(channels * f, d_model)
        self.receptive_field = 1 + (kt - 1) * (1 + 2 * n_blocks)

    def frame_features(self, mel, frame_mask):
        """(B, T, n_mels) -> (B, T, D)."""
        m = frame_mask[:, None, :, None].float()
        x = F.leaky_relu(self.stem(mel[:, None] * m), 0.2) * m
        for block in self.blocks:
            x = block(x, m)
        b, c, t, f = x.shape
        return self.proj(x.permute(0, 2, 1, 3).reshape(b, t, c * f)) * frame_mask[..., None]

    def forward(self, mel, frame_mask, durations):
        feats = self.frame_features(mel, frame_mask)
        align = alignment_matrix(durations, mel.shape[1]).to(feats.dtype)
        counts = align.sum(-1, keepdim=True).clamp(min=1.0)
        return (align / counts) @ feats


class ResConv1d(nn.Module):
    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x, m):
        y = F.leaky_relu(self.conv1(x) * m, 0.2)
        return x + self.conv2(y) * m


class PosteriorEncoder(nn.Module):
    """e_mel (B, L, D) -> (mu, logvar), each (B, L, D_z); logvar clamped."""

    def __init__(self, d_model, d_latent, n_layers, logvar_min=-9.0, logvar_max=2.0):
        super().__init__()
        self.blocks = nn.ModuleList(ResConv1d(d_model) for _ in range(n_layers))
        self.head = nn.Conv1d(d_model, 2 * d_latent, 1)
        self.logvar_min = logvar_min
        self.logvar_max = logvar_max

    def forward(self, e_mel, mask):
        m = mask[:, None, :].float()
        x = e_mel.transpose(1, 2) * m
        for block in self.blocks:
            x = block(x, m)
        mu, logvar = (self.head(x) * m).transpose(1, 2).chunk(2, dim=-1)
        return mu, logvar.clamp(self.logvar_min, self.logvar_max)


def sample_latent(mu, logvar, noise_scale: float = 1.0, generator: torch.Generator | None = None):
    """z = mu + noise_scale * exp(logvar / 2) * eps."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if noise_scale == 0:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + noise_scale * torch.exp(0.5 * logvar) * eps


class AdditiveCoupling(nn.Module):
    """z_b <- z_b + shift(z_a, cond).  Unit Jacobian determinant.

    ``swap`` selects which part is transformed; alternating layers swap roles
    in place, so no permutation is needed between layers.
    """

    def __init__(self, d_latent, d_cond, hidden, swap: bool, kernel_size=3):
        super().__init__()
        self.split = d_latent // 2
        self.swap = swap
        n_a = d_latent - self.split if swap else self.split
        n_b = d_latent - n_a
        self.pre = nn.Conv1d(n_a + d_cond, hidden, kernel_size, padding=kernel_size // 2)
        self.mid = nn.Conv1d(hidden, hidden, kernel_size, padding=kernel_size // 2)
        self.post = nn.Conv1d(hidden, n_b, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _parts(self, z):
        a, b = z[..., : self.split], z[..., self.split:]
        return (b, a) if self.swap else (a, b)

    def _join(self, a, b):
        return torch.cat([b, a], dim=-1) if self.swap else torch.cat([a, b], dim=-1)

    def shift(self, a, cond, mask):
        m = mask[:, None, :].float()
        h = torch.cat([a, cond], dim=-1).transpose(1, 2) * m
        h = F.leaky_relu(self.pre(h), 0.2) * m
        h = F.leaky_relu(self.mid(h), 0.2) * m
        return (self.post(h) * m).transpose(1, 2)

    def forward(self, z, cond, mask):
        a, b = self._parts(z)
        return self._join(a, b + self.shift(a, cond, mask))

    def inverse(self, z, cond, mask):
        a, b = self._parts(z)
        return self._join(a, b - self.shift(a, cond, mask))


class VPFlow(nn.Module):
    """Stack of conditioned additive couplings mapping the posterior latent
    toward a standard normal given e_ling.  log|det J| is identically zero."""

    def __init__(self, d_latent, d_cond, hidden, n_steps):
        super().__init__()
        self.layers = nn.ModuleList(
            AdditiveCoupling(d_latent, d_cond, hidden, swap=bool(i % 2)) for i in range(n_steps)
        )

    def forward(self, z, cond, mask):
        _check_rows(z, cond)
        for layer in self.layers:
            z = layer(z, cond, mask)
        return z

    def inverse(self, z, cond, mask):
        _check_rows(z, cond)
        for layer in reversed(self.layers):
            z = layer.inverse(z, cond, mask)
        return z


class ContentFusion(nn.Module):
    """e_con = e_ling + Proj(z)."""

    def __init__(self, d_latent, d_model):
        super().__init__()
        self.proj = nn.Linear(d_latent, d_model)

    def forward(self, e_ling, z, mask):
        _check_rows(z, e_ling)
        return (e_ling + self.proj(z)) * mask[..., None]


def _check_rows(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
