"""The acoustic model: content extraction + speaker adaptation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .content import (
    ContentFusion,
    LinguisticEncoder,
    MelEncoder,
    PosteriorEncoder,
    VPFlow,
    sample_latent,
    sequence_mask,
)
from .data import MelSpectrogram, PhonemeSequence, Utterance
from .speaker import (
    MelDecoder,
    StyleEncoder,
    VarianceAdapter,
    build_embedder,
    durations_from_log,
    expand_batch,
)


@dataclass
class Batch:
    """Padded training batch.  Masks are True on valid positions."""

    phonemes: torch.Tensor  # (B, L) long
    phone_mask: torch.Tensor  # (B, L) bool
    durations: torch.Tensor  # (B, L) long, 0 on padding
    pitch: torch.Tensor  # (B, L)
    energy: torch.Tensor  # (B, L)
    mel: torch.Tensor  # (B, T, F) ground-truth target
    frame_mask: torch.Tensor  # (B, T) bool
    content_mel: torch.Tensor  # (B, T, F) mel fed to the mel encoder
    prompt_mel: torch.Tensor  # (B, Tp, F)
    prompt_mask: torch.Tensor  # (B, Tp) bool
    uids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.phonemes.shape[0]


def _pad(arrays: Sequence[np.ndarray], dtype) -> torch.Tensor:
    n = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n) + arrays[0].shape[1:], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return torch.from_numpy(out)


def collate(
    targets: Sequence[Utterance],
    prompts: Sequence[Utterance],
    content_mels: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Build a padded batch.  ``content_mels`` defaults to the targets' own mels."""
    if content_mels is None:
        content_mels = [u.mel.frames for u in targets]
    for u, c in zip(targets, content_mels):
        if c.shape != u.mel.frames.shape:
            raise ValueError(f"content mel for {u.uid} has shape {c.shape}, target {u.mel.frames.shape}")
    n_ph = torch.tensor([len(u.phonemes) for u in targets])
    n_fr = torch.tensor([u.mel.n_frames for u in targets])
    n_pr = torch.tensor([p.mel.n_frames for p in prompts])
    return Batch(
        phonemes=_pad([np.array(u.phonemes.ids) for u in targets], np.int64),
        phone_mask=sequence_mask(n_ph),
        durations=_pad([np.array(u.annotations.durations) for u in targets], np.int64),
        pitch=_pad([np.array(u.annotations.pitch) for u in targets], np.float32),
        energy=_pad([np.array(u.annotations.energy) for u in targets], np.float32),
        mel=_pad([u.mel.frames for u in targets], np.float32),
        frame_mask=sequence_mask(n_fr),
        content_mel=_pad(list(content_mels), np.float32),
        prompt_mel=_pad([p.mel.frames for p in prompts], np.float32),
        prompt_mask=sequence_mask(n_pr),
        uids=tuple(u.uid for u in targets),
    )


def _frames_tensor(mel) -> torch.Tensor:
    if isinstance(mel, torch.Tensor):
        return mel
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    return torch.tensor(np.asarray(frames), dtype=torch.float32)


class ZeroShotTTS(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.ling_encoder = LinguisticEncoder(
            cfg.vocab_size, d, cfg.ling_layers, cfg.ling_heads, cfg.ling_ffn, cfg.rel_window
        )
        self.mel_encoder = MelEncoder(cfg.n_mels, d, cfg.mel_enc_channels, cfg.mel_enc_blocks, cfg.mel_enc_kernel_time)
        self.posterior = PosteriorEncoder(d, cfg.d_latent, cfg.posterior_layers, cfg.logvar_min, cfg.logvar_max)
        self.flow = VPFlow(cfg.d_latent, d, cfg.flow_hidden, cfg.flow_steps)
        self.fusion = ContentFusion(cfg.d_latent, d)
        # direct e_mel fusion (fuse_sampled_latent=False); untested alternative
        self.mel_fusion = None if cfg.fuse_sampled_latent else nn.Linear(d, d)
        self.style_encoder = StyleEncoder(cfg.n_mels, cfg.d_style, cfg.style_layers, cfg.style_heads)
        self.timbre_proj = nn.Linear(cfg.d_raw, cfg.d_spk)
        self.variance_adapter = VarianceAdapter(d, cfg.d_style, cfg.predictor_channels, cfg.adapter_heads)
        self.pitch_embed = nn.Linear(1, d)
        self.energy_embed = nn.Linear(1, d)
        self.decoder = MelDecoder(d, cfg.dec_channels, cfg.n_mels, cfg.d_spk, cfg.dec_blocks)
        self.embedder = build_embedder(cfg.embedder, n_mels=cfg.n_mels, dim=cfg.d_raw, seed=cfg.embedder_seed)
        self.embedder.requires_grad_(False)

    # content path -----------------------------------------------------------

    def content_parameters(self):
        mods = [self.ling_encoder, self.mel_encoder, self.posterior, self.flow, self.fusion]
        return [p for m in mods for p in m.parameters()]

    def encode_content(self, batch: Batch, noise_scale: float = 1.0, generator=None) -> dict:
        e_ling = self.ling_encoder(batch.phonemes, batch.phone_mask)
        e_mel = self.mel_encoder(batch.content_mel, batch.frame_mask, batch.durations)
        mu, logvar = self.posterior(e_mel, batch.phone_mask)
        z = sample_latent(mu, logvar, noise_scale, generator) * batch.phone_mask[..., None]
        if self.mel_fusion is not None:
            e_con = (e_ling + self.mel_fusion(e_mel)) * batch.phone_mask[..., None]
        else:
            e_con = self.fusion(e_ling, z, batch.phone_mask)
        mu_flow = self.flow(mu, e_ling, batch.phone_mask)
        return {"e_ling": e_ling, "e_mel": e_mel, "mu": mu, "logvar": logvar, "z": z, "mu_flow": mu_flow, "e_con": e_con}

    def prior_content(self, phonemes, phone_mask, noise_scale: float = 1.0, generator=None) -> dict:
        """Text-only content: z = flow^-1(noise_scale * eps | e_ling)."""
        e_ling = self.ling_encoder(phonemes, phone_mask)
        shape = e_ling.shape[:-1] + (self.cfg.d_latent,)
        eps = torch.zeros(shape)
        if noise_scale > 0:
            eps = noise_scale * torch.randn(shape, generator=generator)
        z = self.flow.inverse(eps * phone_mask[..., None], e_ling, phone_mask)
        return {"e_ling": e_ling, "z": z, "e_con": self.fusion(e_ling, z, phone_mask)}

    # speaker path -----------------------------------------------------------

    def speaker_condition(self, prompt_mel, prompt_mask):
        e_sty, style_mask = self.style_encoder(prompt_mel, prompt_mask)
        raw = self.embedder(prompt_mel, prompt_mask)
        return e_sty, style_mask, raw, self.timbre_proj(raw)

    def decode(self, e_con, phone_mask, durations, pitch, energy, e_spk, trace=None):
        n_frames = int(durations.sum(1).max())
        frame_mask = sequence_mask(durations.sum(1), n_frames)
        h = expand_batch(e_con, durations, n_frames)
        h = h + self.pitch_embed(expand_batch(pitch * phone_mask, durations, n_frames)[..., None])
        h = h + self.energy_embed(expand_batch(energy * phone_mask, durations, n_frames)[..., None])
        return self.decoder(h, frame_mask, e_spk, trace), frame_mask

    def forward(self, batch: Batch, noise_scale: float = 1.0, generator=None) -> dict:
        """Teacher-forced training pass."""
        out = self.encode_content(batch, noise_scale, generator)
        e_sty, style_mask, raw, e_spk = self.speaker_condition(batch.prompt_mel, batch.prompt_mask)
        dur_hat, pitch_hat, energy_hat = self.variance_adapter(out["e_con"], batch.phone_mask, e_sty, style_mask)
        mel_hat, _ = self.decode(out["e_con"], batch.phone_mask, batch.durations, batch.pitch, batch.energy, e_spk)
        out.update(
            e_sty=e_sty,
            raw_spk=raw,
            e_spk=e_spk,
            dur_hat=dur_hat,
            pitch_hat=pitch_hat,
            energy_hat=energy_hat,
            mel_hat=mel_hat,
        )
        return out

    @torch.no_grad()
    def infer(
        self,
        phonemes: PhonemeSequence | Sequence[int],
        prompt: MelSpectrogram | Utterance,
        durations: Sequence[int] | None = None,
        noise_scale: float = 0.0,
        seed: int = 0,
    ) -> tuple[np.ndarray, dict]:
        """Text + prompt -> mel frames (T, F).

        With ``durations`` the duration predictor output is replaced by the
        given frame counts, so T == sum(durations) exactly.
        """
        ids = list(phonemes.ids if isinstance(phonemes, PhonemeSequence) else phonemes)
        prompt_mel = prompt.mel if isinstance(prompt, Utterance) else prompt
        if prompt_mel is None:
            raise ValueError("a prompt mel is required")
        if durations is not None and len(durations) != len(ids):
            raise ValueError(f"got {len(durations)} durations for {len(ids)} phonemes")
        was_training = self.training
        self.eval()
        try:
            g = torch.Generator().manual_seed(seed)
            ph = torch.tensor([ids], dtype=torch.long)
            mask = torch.ones_like(ph, dtype=torch.bool)
            content = self.prior_content(ph, mask, noise_scale, g)
            pm = torch.from_numpy(np.array(prompt_mel.frames, dtype=np.float32))[None]
            e_sty, style_mask, _, e_spk = self.speaker_condition(pm, torch.ones(pm.shape[:2], dtype=torch.bool))
            dur_hat, pitch_hat, energy_hat = self.variance_adapter(content["e_con"], mask, e_sty, style_mask)
            if durations is None:
                dur = durations_from_log(dur_hat)
            else:
                dur = torch.tensor([list(durations)], dtype=torch.long)
                if bool((dur < 1).any()):
                    raise ValueError("forced durations must be >= 1")
            mel, _ = self.decode(content["e_con"], mask, dur, pitch_hat, energy_hat, e_spk)
        finally:
            self.train(was_training)
        info = {"durations": dur[0].tolist(), "pitch": pitch_hat[0].tolist(), "energy": energy_hat[0].tolist()}
        return mel[0].numpy(), info

    # single-utterance operations ------------------------------------------------
    # Unbatched (L, D) / (T, F) views over the batched modules above.

    @staticmethod
    def _ones(n):
        return torch.ones(1, n, dtype=torch.bool)

    def encode_linguistic(self, phonemes) -> torch.Tensor:
        ids = torch.as_tensor(list(getattr(phonemes, "ids", phonemes)), dtype=torch.long)[None]
        return self.ling_encoder(ids, self._ones(ids.shape[1]))[0]

    def encode_mel_phoneme(self, mel, durations) -> torch.Tensor:
        frames = _frames_tensor(mel)
        d = torch.as_tensor(list(durations), dtype=torch.long)
        if int(d.sum()) != frames.shape[0]:
            raise ValueError(f"sum(durations)={int(d.sum())} but mel has {frames.shape[0]} frames")
        return self.mel_encoder(frames[None], self._ones(frames.shape[0]), d[None])[0]

    def posterior_of(self, e_mel):
        mu, logvar = self.posterior(e_mel[None], self._ones(e_mel.shape[0]))
        return mu[0], logvar[0]

    def flow_forward(self, z, cond):
        return self.flow(z[None], cond[None], self._ones(z.shape[0]))[0]

    def flow_inverse(self, z, cond):
        return self.flow.inverse(z[None], cond[None], self._ones(z.shape[0]))[0]

    def fuse_content(self, e_ling, z):
        return self.fusion(e_ling[None], z[None], self._ones(z.shape[0]))[0]

    def encode_style(self, mel) -> torch.Tensor:
        frames = _frames_tensor(mel)
        return self.style_encoder(frames[None], self._ones(frames.shape[0]))[0][0]

    def encode_timbre(self, mel) -> torch.Tensor:
        return self.embedder(_frames_tensor(mel))

    def project_timbre(self, raw) -> torch.Tensor:
        if raw.shape[-1] != self.cfg.d_raw:
            raise ValueError(f"timbre vector has {raw.shape[-1]} dims, expected {self.cfg.d_raw}")
        return self.timbre_proj(raw)

    def predict_attributes(self, e_con, e_sty):
        out = self.variance_adapter(e_con[None], self._ones(e_con.shape[0]), e_sty[None], self._ones(e_sty.shape[0]))
        return tuple(o[0] for o in out)

    def decode_mel(self, e_con, e_spk, pitch, energy, durations, trace=None):
        """Length-regulate e_con (L, D) by ``durations`` and decode to (T, F)."""
        d = torch.as_tensor(list(durations), dtype=torch.long)[None]
        if bool((d < 1).any()):
            raise ValueError("durations must be positive")
        pitch = torch.as_tensor(pitch, dtype=e_con.dtype)[None]
        energy = torch.as_tensor(energy, dtype=e_con.dtype)[None]
        if not (pitch.shape == energy.shape == d.shape and d.shape[1] == e_con.shape[0]):
            raise ValueError("pitch/energy/durations must each have one value per phoneme")
        mel, _ = self.decode(e_con[None], self._ones(e_con.shape[0]), d, pitch, energy, e_spk[None], trace)
        return mel[0]

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
