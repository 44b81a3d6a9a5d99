"""Training losses and the PatchGAN discriminator."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import LossWeights


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


def _masked_mean(x, mask):
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m[..., None]
    m = m.expand_as(x)
    return (x * m).sum() / m.sum()


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rec(mel_hat, mel, mask=None):
    """Mean absolute error over valid (frame, bin) entries."""
    _check_shapes(mel_hat, mel)
    return _masked_mean((mel_hat - mel).abs(), mask)


def loss_kl(mu, logvar, mask=None):
    """KL(N(mu, exp(logvar)) || N(0, I)), averaged over valid positions and dims."""
    _check_shapes(mu, logvar)
    return _masked_mean(0.5 * (torch.exp(logvar) + mu**2 - 1.0 - logvar), mask)


def loss_pred(pred, target, mask=None):
    _check_shapes(pred, target)
    return _masked_mean((pred - target) ** 2, mask)


def loss_adv_d(real_scores, fake_scores):
    """LSGAN discriminator loss: mean((real - 1)^2) + mean(fake^2)."""
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores**2).mean()


def loss_adv_g(fake_scores):
    return ((fake_scores - 1.0) ** 2).mean()


def loss_cyc(e_hat, e, include_positive: bool = False):
    """Cyclic contrastive timbre loss.

    -1/B * sum_i log( exp(cos(e_hat_i, e_i)) / sum_{j != i} exp(cos(e_hat_i, e_j)) )

    The denominator holds negatives only (no temperature), so the value can be
    negative.  ``include_positive`` switches to the usual InfoNCE denominator.
    """
    _check_shapes(e_hat, e)
    if e_hat.dim() != 2 or e_hat.shape[0] < 2:
        raise ValueError("loss_cyc needs a (B, D) batch with B >= 2")
    n_hat = e_hat.norm(dim=1)
    n_e = e.norm(dim=1)
    if bool((n_hat == 0).any()) or bool((n_e == 0).any()):
        raise ValueError("loss_cyc: zero-norm embedding, cosine undefined")
    cos = (e_hat / n_hat[:, None]) @ (e / n_e[:, None]).T
    pos = cos.diagonal()
    if include_positive:
        denom = torch.logsumexp(cos, dim=1)
    else:
        eye = torch.eye(cos.shape[0], dtype=torch.bool)
        denom = torch.logsumexp(cos.masked_fill(eye, float("-inf")), dim=1)
    return (denom - pos).mean()


class PatchDiscriminator(nn.Module):
    """PatchGAN over (T, F): strided 4x4 convs halve both axes per layer.

    With ``n_layers`` strided layers the score grid is (T / 2**n, F / 2**n)
    for sizes divisible by 2**n; inputs shorter than 2**n frames are rejected.
    No normalization layers.
    """

    def __init__(self, channels: int = 32, n_layers: int = 4):
        super().__init__()
        layers = []
        c_in = 1
        for i in range(n_layers):
            c_out = channels * min(2**i, 8)
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(c_in, 1, 3, padding=1)
        self.min_size = 2**n_layers

    def forward(self, mel):
        """(T, F) or (B, T, F) -> (T', F') or (B, T', F') patch scores."""
        single = mel.dim() == 2
        x = mel[None] if single else mel
        if x.shape[1] < self.min_size or x.shape[2] < self.min_size:
            raise ValueError(
                f"input {tuple(x.shape[1:])} smaller than discriminator receptive field {self.min_size}"
            )
        x = x[:, None]
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        x = self.head(x)[:, 0]
        return x[0] if single else x


@dataclass
class LossReport:
    rec: float = 0.0
    kl: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    pred_duration: float = 0.0
    pred_pitch: float = 0.0
    pred_energy: float = 0.0
    cyc: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return dataclasses.asdict(self)


# LossReport field -> LossWeights field
WEIGHT_OF = {
    "rec": "rec",
    "kl": "kl",
    "adv_g": "adv",
    "pred_duration": "pred_duration",
    "pred_pitch": "pred_pitch",
    "pred_energy": "pred_energy",
    "cyc": "cyc",
}


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum of generator loss components -> (scalar tensor, LossReport).

    ``components`` maps LossReport field names to scalar tensors (or floats);
    ``adv_d`` is reported but not part of the generator total.
    """
    report = LossReport()
    total = 0.0
    for name, value in components.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
        setattr(report, name, v)
        if name in WEIGHT_OF:
            total = total + getattr(weights, WEIGHT_OF[name]) * value
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    report.total = float(total.detach())
    return total, report
