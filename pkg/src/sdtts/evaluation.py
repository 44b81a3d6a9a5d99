"""Objective metrics (SIM, CER, RTF), embedding export and the sigma sweep."""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import MelSpectrogram, SyntheticVoices, Utterance, _atomic_write, phonemes_to_text

Synthesizer = Callable[[Sequence[int], Utterance], MelSpectrogram]


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def model_synthesizer(model, seed: int = 0, noise_scale: float = 0.0) -> Synthesizer:
    """Adapt a model/checkpoint to the ``(phonemes, prompt) -> mel`` protocol."""
    from .distill import synthesize

    def synth(phonemes, prompt):
        return synthesize(model, phonemes, prompt, seed=seed, noise_scale=noise_scale)

    return synth


def _as_synth(model) -> Synthesizer:
    if callable(model) and not hasattr(model, "infer") and not hasattr(model, "model"):
        return model
    return model_synthesizer(model)


def _frames(mel):
    return mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)


class SynthesisFailed(RuntimeError):
    pass


def eval_sim(model, prompts: Sequence[Utterance], texts: Sequence[Sequence[int]], embedder) -> float:
    """Mean cosine(embed(synth(text, prompt)), embed(prompt)) over all pairs."""
    synth = _as_synth(model)
    sims = []
    for p in prompts:
        ref = embedder.embed(_frames(p.mel))
        for k, text in enumerate(texts):
            try:
                mel = synth(text, p)
            except Exception as exc:
                raise SynthesisFailed(f"synthesis failed for prompt {p.uid!r}, text #{k}: {exc}") from exc
            sims.append(cosine_sim(embedder.embed(_frames(mel)), ref))
    if not sims:
        raise ValueError("eval_sim needs at least one prompt and one text")
    return float(np.mean(sims))


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost edit distance (two-row dynamic programme)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference: Sequence, hypothesis: Sequence) -> float:
    if len(reference) == 0:
        raise ValueError("CER needs a non-empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


class SyntheticTranscriber:
    """Reads phoneme symbols back out of synthetic-corpus style mels.

    Each frame is projected onto the content subspace (removing speaker,
    pitch and energy, which live in the smooth subspace), labelled with the
    closest phoneme pattern, and runs are collapsed.  Runs shorter than
    ``min_run`` frames are dropped as glitches.
    """

    def __init__(self, voices: SyntheticVoices, min_run: int = 2):
        self.voices = voices
        self.projector = voices.content_projector()
        self.templates = voices.content @ self.projector.T
        self.min_run = min_run

    def labels(self, mel) -> np.ndarray:
        x = _frames(mel).astype(np.float64) @ self.projector.T
        d = ((x[:, None, :] - self.templates[None]) ** 2).sum(-1)
        return d.argmin(1)

    def transcribe(self, mel) -> str:
        ids, run = [], 0
        labels = self.labels(mel)
        for t, lab in enumerate(labels):
            run = run + 1 if t and lab == labels[t - 1] else 1
            if run == self.min_run and (not ids or ids[-1] != lab):
                ids.append(int(lab))
        return phonemes_to_text(ids)

    __call__ = transcribe


def eval_cer(model, texts: Sequence[Sequence[int]], prompts: Sequence[Utterance], transcriber) -> float:
    """Mean per-item CER of transcriber(synth(text, prompt)) vs the text."""
    synth = _as_synth(model)
    scores = []
    for text in texts:
        ref = phonemes_to_text(text)
        for p in prompts:
            hyp = transcriber(synth(text, p))
            scores.append(cer(ref, hyp))
    if not scores:
        raise ValueError("eval_cer needs at least one prompt and one text")
    return float(np.mean(scores))


@dataclass
class RTFMeasurement:
    rtf: float  # median over timed repeats
    runs: list[float]  # per-repeat RTF
    audio_seconds: float
    n_warmup: int
    note: str = "mel-level synthesis only; vocoder excluded; model loading excluded"


def audio_seconds(n_frames: int, hop_length: int, sample_rate: int) -> float:
    return n_frames * hop_length / sample_rate


def measure_rtf(model, items: Sequence[tuple[Sequence[int], Utterance]], repeats: int = 3, warmup: int = 1) -> RTFMeasurement:
    """Wall-clock synthesis time / synthesized audio duration.

    Each repeat synthesizes every item once; the reported RTF is the median
    over repeats.  Warm-up passes are run first and not timed.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    synth = _as_synth(model)
    for _ in range(warmup):
        for text, prompt in items:
            synth(text, prompt)
    runs = []
    total_audio = 0.0
    for _ in range(repeats):
        elapsed, audio = 0.0, 0.0
        for text, prompt in items:
            t0 = time.perf_counter()
            mel = synth(text, prompt)
            elapsed += time.perf_counter() - t0
            audio += audio_seconds(mel.n_frames, mel.hop_length, mel.sample_rate)
        if audio <= 0:
            raise ValueError("synthesized audio has zero duration")
        runs.append(elapsed / audio)
        total_audio = audio
    return RTFMeasurement(statistics.median(runs), runs, total_audio, warmup)


# --------------------------------------------------------------------------
# embedding export


@dataclass(frozen=True)
class EmbeddingRow:
    flag: str  # "real" | "synthetic"
    speaker: str
    vector: np.ndarray


def export_embeddings(
    model,
    utterances: Sequence[Utterance],
    embedder,
    out_path: str | Path,
    texts: Sequence[Sequence[int]] | None = None,
) -> list[EmbeddingRow]:
    """Write one row per real utterance plus, when ``model`` is given, one
    synthetic row per utterance (that utterance used as the prompt).

    ``texts`` default to each utterance's own phonemes.  Format: a header
    line ``flag speaker e0 e1 ...`` then space-separated rows.
    """
    rows = [EmbeddingRow("real", u.speaker, embedder.embed(u.mel.frames)) for u in utterances]
    if model is not None:
        synth = _as_synth(model)
        for k, u in enumerate(utterances):
            text = u.phonemes.ids if texts is None else texts[k % len(texts)]
            rows.append(EmbeddingRow("synthetic", u.speaker, embedder.embed(_frames(synth(text, u)))))
    write_embeddings(rows, out_path)
    return rows


def write_embeddings(rows: Sequence[EmbeddingRow], out_path: str | Path) -> None:
    dim = len(rows[0].vector) if rows else 0
    lines = [" ".join(["flag", "speaker"] + [f"e{i}" for i in range(dim)])]
    for r in rows:
        v = np.asarray(r.vector, dtype=np.float32)
        lines.append(" ".join([r.flag, r.speaker] + [repr(float(x)) for x in v]))
    _atomic_write(Path(out_path), ("\n".join(lines) + "\n").encode())


def read_embeddings(path: str | Path) -> list[EmbeddingRow]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        flag, speaker, *vals = line.split()
        rows.append(EmbeddingRow(flag, speaker, np.array([float(v) for v in vals], dtype=np.float32)))
    return rows


def centroid_distance(rows: Iterable[EmbeddingRow]) -> float:
    """Mean over speakers of || centroid(real) - centroid(synthetic) ||,
    on unit-normalized embeddings."""
    groups: dict[tuple[str, str], list[np.ndarray]] = {}
    for r in rows:
        v = np.asarray(r.vector, dtype=np.float64)
        groups.setdefault((r.speaker, r.flag), []).append(v / np.linalg.norm(v))
    speakers = sorted({s for s, f in groups if (s, "real") in groups and (s, "synthetic") in groups})
    if not speakers:
        raise ValueError("need real and synthetic rows for at least one speaker")
    d = [
        np.linalg.norm(np.mean(groups[(s, "real")], 0) - np.mean(groups[(s, "synthetic")], 0))
        for s in speakers
    ]
    return float(np.mean(d))


# --------------------------------------------------------------------------
# sigma sweep


@dataclass
class EvalReport:
    sim_mean: float
    cer: float
    rtf: float
    n_items: int

    def __post_init__(self):
        if not -1.0 <= self.sim_mean <= 1.0:
            raise ValueError("sim_mean outside [-1, 1]")
        if self.cer < 0 or self.rtf <= 0 or self.n_items < 1:
            raise ValueError("invalid EvalReport values")


@dataclass
class SweepRow:
    sigma: float
    report: EvalReport
    centroid_distance: float | None = None

    def to_dict(self):
        return {"sigma": self.sigma, **dataclasses.asdict(self.report), "centroid_distance": self.centroid_distance}


class SweepError(RuntimeError):
    def __init__(self, sigma, exc):
        super().__init__(f"sigma={sigma}: {exc}")
        self.sigma = sigma


def evaluate(model, prompts, texts, embedder, transcriber, rtf_repeats: int = 1) -> EvalReport:
    synth = _as_synth(model)
    sim = eval_sim(synth, prompts, texts, embedder)
    c = eval_cer(synth, texts, prompts, transcriber)
    rtf = measure_rtf(synth, [(texts[0], prompts[0])], repeats=rtf_repeats, warmup=1).rtf
    return EvalReport(sim, c, rtf, len(prompts) * len(texts))


def sigma_sweep(
    dataset,
    sigmas: Sequence[float],
    cfg,
    *,
    teacher=None,
    pairs=None,
    prompts: Sequence[Utterance] = (),
    texts: Sequence[Sequence[int]] = (),
    embedder=None,
    transcriber=None,
    export_dir: str | Path | None = None,
) -> list[SweepRow]:
    """Train one student per sigma and evaluate SIM / CER on held-out prompts.

    A teacher and its pair manifest are trained/generated first unless given.
    With ``export_dir``, embeddings for each student are exported as
    ``emb_sigma<sigma>.txt`` and the real/synthetic centroid distance is
    recorded.
    """
    from .distill import generate_parallel_pairs, train_student, train_teacher

    sigmas = list(sigmas)
    for s in sigmas:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"sigma {s} outside [0, 1]")
    if not sigmas:
        return []
    if teacher is None:
        teacher = train_teacher(dataset, cfg).checkpoint
    if pairs is None:
        pairs = generate_parallel_pairs(teacher, dataset, cfg.distill)
    rows = []
    for s in sigmas:
        try:
            run_cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, sigma=s))
            student = train_student(dataset, pairs, run_cfg).checkpoint
            report = evaluate(student, prompts, texts, embedder, transcriber)
            dist = None
            if export_dir is not None:
                out = Path(export_dir) / f"emb_sigma{s:g}.txt"
                dist = centroid_distance(export_embeddings(student, prompts, embedder, out, texts=texts))
        except Exception as exc:
            raise SweepError(s, exc) from exc
        rows.append(SweepRow(s, report, dist))
    return rows


def write_sweep_table(rows: Sequence[SweepRow], path: str | Path) -> None:
    lines = ["sigma sim_mean cer rtf n_items centroid_distance"]
    for r in rows:
        d = r.to_dict()
        lines.append(" ".join(str(d[k]) for k in lines[0].split()))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())
