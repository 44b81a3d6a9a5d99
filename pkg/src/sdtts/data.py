"""Corpus data types, manifest and mel-sidecar I/O, and the synthetic corpus.

Manifest files are JSON lines: a header ``{"format_version": 1, ...}`` followed
by one record per utterance.  Each record points at a mel sidecar file (path
relative to the manifest) holding a 20-byte header ``<4sIIII`` = (magic, T, F,
hop_length, sample_rate) and then T*F little-endian float32 values, row-major.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
MEL_MAGIC = b"SDM1"
_MEL_HEADER = struct.Struct("<4sIIII")

DEFAULT_HOP = 256
DEFAULT_SR = 16000


class CorpusError(ValueError):
    """A manifest or utterance that cannot be loaded or violates an invariant."""


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray  # (T, F) float32 log-amplitude
    hop_length: int = DEFAULT_HOP
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, order="C")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n_frames * self.hop_length / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, MelSpectrogram):
            return NotImplemented
        return (
            self.hop_length == other.hop_length
            and self.sample_rate == other.sample_rate
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass(frozen=True)
class PhonemeSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class AttributeAnnotations:
    durations: tuple[int, ...]
    pitch: tuple[float, ...]
    energy: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "durations", tuple(int(d) for d in self.durations))
        object.__setattr__(self, "pitch", tuple(float(p) for p in self.pitch))
        object.__setattr__(self, "energy", tuple(float(e) for e in self.energy))


@dataclass(frozen=True)
class Utterance:
    uid: str
    speaker: str
    mel: MelSpectrogram
    phonemes: PhonemeSequence
    annotations: AttributeAnnotations
    text: str = ""


def validate_utterance(utt: Utterance, n_mels: int | None = None, vocab_size: int | None = None) -> None:
    """Raise :class:`CorpusError` naming the entry and the broken invariant."""

    def fail(msg):
        raise CorpusError(f"entry {utt.uid!r}: {msg}")

    if not utt.speaker:
        fail("speaker label is empty")
    frames = utt.mel.frames
    if frames.ndim != 2 or frames.shape[0] < 1:
        fail(f"mel must be a T x F matrix with T >= 1, got shape {frames.shape}")
    if n_mels is not None and frames.shape[1] != n_mels:
        fail(f"mel has {frames.shape[1]} bins, expected {n_mels}")
    if not np.all(np.isfinite(frames)):
        fail("mel contains non-finite values")
    ids = utt.phonemes.ids
    if len(ids) < 1:
        fail("phoneme sequence is empty")
    if min(ids) < 0 or (vocab_size is not None and max(ids) >= vocab_size):
        fail(f"phoneme id outside [0, {vocab_size})")
    ann = utt.annotations
    if not (len(ann.durations) == len(ann.pitch) == len(ann.energy) == len(ids)):
        fail("durations/pitch/energy/phonemes lengths differ")
    if min(ann.durations) < 1:
        fail("every duration must be >= 1")
    if sum(ann.durations) != frames.shape[0]:
        fail(f"sum(durations)={sum(ann.durations)} but mel has T={frames.shape[0]} frames")
    if any(p < 0 or not np.isfinite(p) for p in ann.pitch):
        fail("pitch values must be finite and non-negative")
    if any(e < 0 or not np.isfinite(e) for e in ann.energy):
        fail("energy values must be finite and non-negative")


class Corpus(Sequence[Utterance]):
    """Immutable, ordered collection of validated utterances."""

    def __init__(self, utterances: Iterable[Utterance], n_mels: int | None = None, vocab_size: int | None = None):
        utts = tuple(utterances)
        seen = set()
        for u in utts:
            if u.uid in seen:
                raise CorpusError(f"duplicate utterance locator {u.uid!r}")
            seen.add(u.uid)
            validate_utterance(u, n_mels=n_mels, vocab_size=vocab_size)
        self._utts = utts
        self._by_uid = {u.uid: u for u in utts}

    def __getitem__(self, i):
        return self._utts[i]

    def __len__(self):
        return len(self._utts)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self._utts)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self._utts == other._utts

    def get(self, uid: str) -> Utterance:
        return self._by_uid[uid]

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self._utts})

    def by_speaker(self) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {}
        for u in self._utts:
            out.setdefault(u.speaker, []).append(u)
        return out


# --------------------------------------------------------------------------
# sidecar + manifest I/O


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mel(mel: MelSpectrogram, path: str | Path) -> None:
    t, f = mel.frames.shape
    header = _MEL_HEADER.pack(MEL_MAGIC, t, f, mel.hop_length, mel.sample_rate)
    _atomic_write(Path(path), header + mel.frames.astype("<f4").tobytes())


def read_mel(path: str | Path) -> MelSpectrogram:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorpusError(f"mel file not found: {path}") from None
    if len(raw) < _MEL_HEADER.size:
        raise CorpusError(f"mel file {path} is truncated")
    magic, t, f, hop, sr = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise CorpusError(f"mel file {path} has bad magic {magic!r}")
    body = raw[_MEL_HEADER.size:]
    if len(body) != 4 * t * f:
        raise CorpusError(f"mel file {path}: expected {t}x{f} floats, found {len(body) // 4}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float32)
    return MelSpectrogram(frames, hop_length=hop, sample_rate=sr)


def _record(utt: Utterance, locator: str) -> dict:
    ann = utt.annotations
    return {
        "id": utt.uid,
        "speaker": utt.speaker,
        "text": utt.text,
        "mel": locator,
        "phonemes": list(utt.phonemes.ids),
        "durations": list(ann.durations),
        "pitch": list(ann.pitch),
        "energy": list(ann.energy),
    }


def write_corpus(corpus: Iterable[Utterance], manifest_path: str | Path, mel_dir: str = "mels") -> Path:
    """Write sidecar mels plus a manifest; returns the manifest path."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "corpus"})]
    for utt in corpus:
        locator = f"{mel_dir}/{utt.uid}.mel"
        write_mel(utt.mel, root / locator)
        lines.append(json.dumps(_record(utt, locator)))
    _atomic_write(manifest_path, ("\n".join(lines) + "\n").encode())
    return manifest_path


def read_manifest_lines(path: Path, kind: str) -> list[dict]:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise CorpusError(f"manifest not found: {path}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: parse failure: {exc.msg}") from None
    if not rows or not isinstance(rows[0], dict) or "format_version" not in rows[0]:
        raise CorpusError(f"{path}: missing format_version header")
    header = rows[0]
    if header["format_version"] != FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported format_version {header['format_version']}")
    if header.get("kind", kind) != kind:
        raise CorpusError(f"{path}: expected a {kind} manifest, found {header.get('kind')!r}")
    return rows[1:]


def load_corpus(manifest_path: str | Path, n_mels: int | None = None, vocab_size: int | None = None) -> Corpus:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    utts = []
    for rec in read_manifest_lines(manifest_path, "corpus"):
        try:
            uid = rec["id"]
            mel = read_mel(root / rec["mel"])
            utts.append(
                Utterance(
                    uid=uid,
                    speaker=rec["speaker"],
                    mel=mel,
                    phonemes=PhonemeSequence(rec["phonemes"]),
                    annotations=AttributeAnnotations(rec["durations"], rec["pitch"], rec["energy"]),
                    text=rec.get("text", ""),
                )
            )
        except KeyError as exc:
            raise CorpusError(f"{manifest_path}: entry {rec.get('id')!r} missing field {exc}") from None
    return Corpus(utts, n_mels=n_mels, vocab_size=vocab_size)


# --------------------------------------------------------------------------
# synthetic corpus


def phonemes_to_text(ids: Iterable[int]) -> str:
    """One printable symbol per phoneme id (used as the reference transcript)."""
    return "".join(chr(0x41 + i) if i < 26 else chr(0x100 + i) for i in ids)


def _smooth_basis(n_mels: int, k: int) -> np.ndarray:
    """Orthonormal low-order cosine basis over the mel axis, shape (k, n_mels)."""
    grid = (np.arange(n_mels) + 0.5) / n_mels
    basis = np.stack([np.cos(np.pi * j * grid) for j in range(k)])
    q, _ = np.linalg.qr(basis.T)
    return q.T


@dataclass(frozen=True)
class SyntheticVoices:
    """Spectral templates behind :func:`make_synthetic_corpus`.

    Speaker identity, energy and pitch live in a smooth low-order subspace of
    the mel axis; phoneme patterns live in its orthogonal complement.  A
    transcriber can therefore remove the speaker exactly by projection, and a
    statistics-based embedder sees mostly the speaker.
    """

    n_mels: int = 16
    vocab_size: int = 12
    seed: int = 0
    n_smooth: int = 4
    content_scale: float = 0.8
    noise: float = 0.05
    level: float = -2.0
    basis: np.ndarray = field(init=False, repr=False)
    content: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        basis = _smooth_basis(self.n_mels, self.n_smooth)
        rng = np.random.default_rng([self.seed, 0])
        raw = rng.standard_normal((self.vocab_size, self.n_mels))
        raw -= (raw @ basis.T) @ basis
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        content = raw * self.content_scale * np.sqrt(self.n_mels / 2)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "content", content)

    def speaker(self, index: int) -> dict:
        rng = np.random.default_rng([self.seed, 1, index])
        coef = rng.uniform(-1.0, 1.0, self.n_smooth) * np.array([2.0] + [1.5] * (self.n_smooth - 1))
        return {
            "template": coef @ self.basis * np.sqrt(self.n_mels),
            "rate": rng.uniform(2.5, 5.5),
            "pitch": rng.uniform(0.5, 1.5),
            "energy": rng.uniform(0.3, 1.0),
        }

    def content_projector(self) -> np.ndarray:
        return np.eye(self.n_mels) - self.basis.T @ self.basis


def _render(voices: SyntheticVoices, spk: dict, ids, durations, pitch, energy, rng) -> np.ndarray:
    rows = []
    tilt = voices.basis[1] * np.sqrt(voices.n_mels) * 0.5
    for p, d, f0, en in zip(ids, durations, pitch, energy):
        frame = voices.level + spk["template"] + voices.content[p] + en + f0 * tilt
        rows.append(np.repeat(frame[None, :], d, axis=0))
    mel = np.concatenate(rows, axis=0)
    mel += voices.noise * rng.standard_normal(mel.shape)
    return mel.astype(np.float32)


def make_synthetic_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    seed: int,
    *,
    n_mels: int = 16,
    vocab_size: int = 12,
    first_speaker: int = 0,
    min_phonemes: int = 4,
    max_phonemes: int = 10,
    min_frames: int = 16,
) -> Corpus:
    """Deterministic toy corpus of parameterized speakers.

    Speakers with index ``first_speaker .. first_speaker + n_speakers - 1`` are
    drawn; the phoneme patterns depend on ``seed`` only, so held-out speakers
    for the same seed share the content inventory.  Adjacent phonemes never
    repeat and every duration is at least 2, so run-length decoding of a clean
    rendering recovers the phoneme sequence.
    """
    if n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("n_speakers and utts_per_speaker must be positive")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    voices = SyntheticVoices(n_mels=n_mels, vocab_size=vocab_size, seed=seed)
    utts = []
    for s in range(first_speaker, first_speaker + n_speakers):
        spk = voices.speaker(s)
        rng = np.random.default_rng([seed, 2, s])
        for u in range(utts_per_speaker):
            n = int(rng.integers(min_phonemes, max_phonemes + 1))
            ids = [int(rng.integers(vocab_size))]
            while len(ids) < n:
                nxt = int(rng.integers(vocab_size - 1))
                ids.append(nxt if nxt < ids[-1] else nxt + 1)
            while True:
                durations = np.maximum(2, np.rint(spk["rate"] + rng.normal(0, 1.0, n))).astype(int)
                if durations.sum() >= min_frames:
                    break
            pitch = np.clip(spk["pitch"] + 0.25 * rng.standard_normal(n), 0.0, None)
            energy = np.clip(spk["energy"] + 0.2 * rng.standard_normal(n), 0.0, None)
            frames = _render(voices, spk, ids, durations, pitch, energy, rng)
            utts.append(
                Utterance(
                    uid=f"spk{s:03d}_{u:03d}",
                    speaker=f"spk{s:03d}",
                    mel=MelSpectrogram(frames),
                    phonemes=PhonemeSequence(ids),
                    annotations=AttributeAnnotations(durations.tolist(), pitch.tolist(), energy.tolist()),
                    text=phonemes_to_text(ids),
                )
            )
    return Corpus(utts, n_mels=n_mels, vocab_size=vocab_size)
