"""Two-stage self-distillation: teacher training, parallel-pair generation,
sigma-mixed batches and student training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, build_discriminator
from .config import DistillConfig, RunConfig
from .data import (
    Corpus,
    CorpusError,
    FORMAT_VERSION,
    MelSpectrogram,
    PhonemeSequence,
    Utterance,
    _atomic_write,
    read_manifest_lines,
    read_mel,
    write_mel,
)
from .model import ZeroShotTTS, collate
from .objectives import (
    LossReport,
    NonFiniteLoss,
    loss_adv_d,
    loss_adv_g,
    loss_cyc,
    loss_kl,
    loss_pred,
    loss_rec,
    total_loss,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, component: str):
        super().__init__(f"training diverged at step {step}: non-finite {component}")
        self.step = step
        self.component = component


class DistillError(ValueError):
    pass


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class ParallelPair:
    source: Utterance
    synthetic_mel: MelSpectrogram
    prompt_uid: str
    speakers: tuple[str, str]

    def __post_init__(self):
        if self.synthetic_mel.n_frames != self.source.mel.n_frames:
            raise DistillError(
                f"pair {self.source.uid}: synthetic mel has {self.synthetic_mel.n_frames} frames, "
                f"source has {self.source.mel.n_frames}"
            )
        if self.speakers[0] == self.speakers[1]:
            raise DistillError(f"pair {self.source.uid}: prompt speaker equals source speaker")


@dataclass
class PairManifest:
    pairs: list[ParallelPair]

    def __len__(self):
        return len(self.pairs)

    def by_uid(self) -> dict[str, ParallelPair]:
        return {p.source.uid: p for p in self.pairs}

    def save(self, path: str | Path, mel_dir: str = "synth") -> Path:
        path = Path(path)
        lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "pairs"})]
        for p in self.pairs:
            locator = f"{mel_dir}/{p.source.uid}.mel"
            write_mel(p.synthetic_mel, path.parent / locator)
            lines.append(
                json.dumps(
                    {
                        "source": p.source.uid,
                        "synthetic_mel": locator,
                        "prompt": p.prompt_uid,
                        "speaker": p.speakers[0],
                        "prompt_speaker": p.speakers[1],
                        "frames": p.synthetic_mel.n_frames,
                    }
                )
            )
        _atomic_write(path, ("\n".join(lines) + "\n").encode())
        return path


def load_pairs(path: str | Path, dataset: Corpus) -> PairManifest:
    path = Path(path)
    pairs = []
    for rec in read_manifest_lines(path, "pairs"):
        try:
            source = dataset.get(rec["source"])
        except KeyError:
            raise CorpusError(f"{path}: pair source {rec['source']!r} not in dataset") from None
        mel = read_mel(path.parent / rec["synthetic_mel"])
        if mel.n_frames != rec["frames"]:
            raise CorpusError(f"{path}: frame count of {rec['synthetic_mel']} disagrees with manifest")
        pairs.append(ParallelPair(source, mel, rec["prompt"], (rec["speaker"], rec["prompt_speaker"])))
    return PairManifest(pairs)


def synthesize(
    model: ZeroShotTTS | Checkpoint,
    phonemes: PhonemeSequence | Sequence[int],
    prompt: Utterance | MelSpectrogram,
    forced_durations: Sequence[int] | None = None,
    seed: int = 0,
    noise_scale: float = 1.0,
) -> MelSpectrogram:
    """Text + prompt speech -> mel.

    The content latent comes from the flow prior.  ``forced_durations``
    replaces the duration predictor so the output has exactly
    ``sum(forced_durations)`` frames.
    """
    if isinstance(model, Checkpoint):
        model = model.model
    if prompt is None:
        raise ValueError("synthesize needs a prompt")
    frames, _ = model.infer(phonemes, prompt, durations=forced_durations, noise_scale=noise_scale, seed=seed)
    ref = prompt.mel if isinstance(prompt, Utterance) else prompt
    return MelSpectrogram(frames, hop_length=ref.hop_length, sample_rate=ref.sample_rate)


def generate_parallel_pairs(
    teacher: ZeroShotTTS | Checkpoint,
    dataset: Corpus,
    config: DistillConfig,
    out_path: str | Path | None = None,
) -> PairManifest:
    """One teacher rendering per source utterance, prompted by a different
    speaker (uniform over that speaker-complement), timed by the source's
    annotated durations."""
    if len(set(u.speaker for u in dataset)) < 2:
        raise DistillError("parallel pairs need at least 2 speakers (no different-speaker prompt exists)")
    rng = np.random.default_rng(config.pair_seed)
    utts = list(dataset)
    pairs = []
    for i, src in enumerate(utts):
        others = [u for u in utts if u.speaker != src.speaker]
        prompt = others[int(rng.integers(len(others)))]
        mel = synthesize(
            teacher,
            src.phonemes,
            prompt,
            forced_durations=src.annotations.durations,
            seed=config.pair_seed * 100003 + i,
            noise_scale=config.pair_noise_scale,
        )
        pairs.append(ParallelPair(src, mel, prompt.uid, (src.speaker, prompt.speaker)))
    manifest = PairManifest(pairs)
    if out_path is not None:
        manifest.save(out_path)
    return manifest


# --------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class TrainItem:
    target: Utterance
    prompt: Utterance
    content: np.ndarray  # mel fed to the content branch


def mix_batch(
    items: Sequence[TrainItem],
    pairs: Mapping[str, ParallelPair],
    sigma: float,
    rng: np.random.Generator,
) -> tuple[list[TrainItem], np.ndarray]:
    """Replace the content mel of floor(sigma * B) uniformly chosen items by
    their teacher rendering.  Targets and prompts are left untouched."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    b = len(items)
    k = math.floor(sigma * b)
    mask = np.zeros(b, dtype=bool)
    if k == 0:
        return list(items), mask
    chosen = rng.choice(b, size=k, replace=False)
    mask[chosen] = True
    out = list(items)
    for i in chosen:
        item = items[i]
        try:
            pair = pairs[item.target.uid]
        except KeyError:
            raise DistillError(f"no parallel pair for selected item {item.target.uid!r}") from None
        out[i] = TrainItem(item.target, item.prompt, pair.synthetic_mel.frames)
    return out, mask


class BatchSampler:
    """Seeded batch + prompt selection shared by both training stages."""

    def __init__(self, dataset: Corpus, batch_size: int, seed: int, prompt_policy: str = "same-speaker"):
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.dataset = list(dataset)
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 7])
        self.policy = prompt_policy
        groups = {}
        for i, u in enumerate(self.dataset):
            groups.setdefault(u.speaker, []).append(i)
        self.groups = groups

    def prompt_for(self, idx: int) -> Utterance:
        u = self.dataset[idx]
        others = [j for j in self.groups[u.speaker] if j != idx]
        if self.policy == "self" or not others:
            return u
        return self.dataset[others[int(self.rng.integers(len(others)))]]

    def next(self) -> list[TrainItem]:
        n = len(self.dataset)
        idx = self.rng.choice(n, size=self.batch_size, replace=n < self.batch_size)
        return [TrainItem(self.dataset[i], self.prompt_for(i), self.dataset[i].mel.frames) for i in idx]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[LossReport]
    masks: list[np.ndarray] = field(default_factory=list)


def init_models(cfg: RunConfig):
    torch.manual_seed(cfg.train.seed)
    model = ZeroShotTTS(cfg.model)
    disc = build_discriminator(cfg)
    return model, disc


def _crop_for_disc(mel_hat, mel, lengths, min_size, rng):
    """Equal-length windows (common length, multiple of min_size) per item."""
    win = (int(lengths.min()) // min_size) * min_size
    fake, real = [], []
    for b, n in enumerate(lengths.tolist()):
        off = int(rng.integers(n - win + 1))
        fake.append(mel_hat[b, off : off + win])
        real.append(mel[b, off : off + win])
    return torch.stack(fake), torch.stack(real)


def train_step(model, disc, opt_g, opt_d, batch, cfg: RunConfig, noise_gen, crop_rng) -> LossReport:
    w = cfg.train.weights
    model.train()
    out = model(batch, noise_scale=cfg.train.noise_scale, generator=noise_gen)
    mel_hat = out["mel_hat"]
    fmask, pmask = batch.frame_mask, batch.phone_mask

    fake, real = _crop_for_disc(mel_hat, batch.mel, fmask.sum(1), disc.min_size, crop_rng)
    components = {
        "rec": loss_rec(mel_hat, batch.mel, fmask),
        "kl": loss_kl(out["mu_flow"], out["logvar"], pmask),
        "adv_g": loss_adv_g(disc(fake)),
        "pred_duration": loss_pred(out["dur_hat"], torch.log(batch.durations.clamp(min=1).float()), pmask),
        "pred_pitch": loss_pred(out["pitch_hat"], batch.pitch, pmask),
        "pred_energy": loss_pred(out["energy_hat"], batch.energy, pmask),
    }
    if batch.size >= 2:
        e_hat = model.embedder(mel_hat, fmask)
        e_ref = model.embedder(batch.mel, fmask)
        components["cyc"] = loss_cyc(e_hat, e_ref)
    total, report = total_loss(components, w)
    opt_g.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    opt_g.step()

    d_loss = loss_adv_d(disc(real), disc(fake.detach()))
    if not math.isfinite(float(d_loss.detach())):
        raise NonFiniteLoss("adv_d", float(d_loss.detach()))
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.train.grad_clip)
    opt_d.step()
    report.adv_d = float(d_loss.detach())
    return report


def _optimizers(model, disc, cfg: RunConfig):
    t = cfg.train
    opt_g = torch.optim.AdamW(model.parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay)
    warm = max(1, t.warmup_steps)
    schedules = [torch.optim.lr_scheduler.LambdaLR(o, lambda s: min(1.0, (s + 1) / warm)) for o in (opt_g, opt_d)]
    return opt_g, opt_d, schedules


def _run(
    dataset: Corpus,
    cfg: RunConfig,
    pairs: PairManifest | None,
    sigma: float,
    log_path: str | Path | None,
    on_step: Callable[[int, LossReport], None] | None,
    stage: str,
) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model, disc = init_models(cfg)
    opt_g, opt_d, schedules = _optimizers(model, disc, cfg)
    batch_size = cfg.distill.batch_size if stage == "student" else cfg.train.batch_size
    sampler = BatchSampler(dataset, batch_size, cfg.train.seed, cfg.train.prompt_policy)
    noise_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
    crop_rng = np.random.default_rng([cfg.train.seed, 11])
    mix_rng = np.random.default_rng([cfg.distill.pair_seed, 13])
    pair_map = pairs.by_uid() if pairs is not None else {}
    reports, masks = [], []
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(1, cfg.train.steps + 1):
            items = sampler.next()
            if stage == "student":
                items, mask = mix_batch(items, pair_map, sigma, mix_rng)
                masks.append(mask)
            batch = collate([i.target for i in items], [i.prompt for i in items], [i.content for i in items])
            t0 = time.perf_counter()
            try:
                report = train_step(model, disc, opt_g, opt_d, batch, cfg, noise_gen, crop_rng)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(step, exc.component) from exc
            for s in schedules:
                s.step()
            reports.append(report)
            if log_fh is not None:
                rec = {"stage": stage, "step": step, **report.to_dict(), "wall": time.perf_counter() - t0}
                if masks:
                    rec["replaced"] = int(masks[-1].sum())
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(step, report)
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = Checkpoint(cfg, model, disc, step=cfg.train.steps, seed=cfg.train.seed, extra={"stage": stage})
    return TrainResult(ckpt, reports, masks)


def train_teacher(dataset: Corpus, cfg: RunConfig, log_path=None, on_step=None) -> TrainResult:
    """Stage 1: reconstruct each utterance from its own text + mel, prompted
    by the same speaker."""
    return _run(dataset, cfg, None, 0.0, log_path, on_step, "teacher")


def train_student(
    dataset: Corpus, pairs: PairManifest, cfg: RunConfig, log_path=None, on_step=None
) -> TrainResult:
    """Stage 2: fresh model (seeded init, never the teacher's weights); the
    content mel of floor(sigma * B) items per batch comes from the pairs."""
    sigma = cfg.distill.sigma
    if sigma > 0:
        covered = pairs.by_uid()
        missing = [u.uid for u in dataset if u.uid not in covered]
        if missing:
            raise DistillError(f"pair manifest does not cover {len(missing)} utterances, e.g. {missing[0]!r}")
    return _run(dataset, cfg, pairs, sigma, log_path, on_step, "student")
