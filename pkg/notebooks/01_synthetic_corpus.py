"""
A synthetic speech corpus
=========================

Mels here are rendered from per-speaker spectral envelopes, so speaker
identity and phoneme content live in separable subspaces.  That is what
lets the toy models learn something in a couple of minutes on a CPU.
"""

# %%
import numpy as np
from sdtts.data import make_synthetic_corpus, write_corpus, load_corpus

corpus = make_synthetic_corpus(n_speakers=4, utts_per_speaker=8, seed=0)
print(len(corpus), "utterances from", len(corpus.speakers), "speakers")

# %%
u = corpus[0]
print(u.uid, u.speaker, u.text)
print("phonemes ", u.phonemes.ids)
print("durations", u.annotations.durations, "sum", sum(u.annotations.durations))
print("mel", u.mel.frames.shape)

# per-frame pitch and energy come along as phoneme-level annotations
print(np.round(u.annotations.pitch, 2))

# %%
# round trip through the on-disk manifest
import tempfile, pathlib

tmp = pathlib.Path(tempfile.mkdtemp())
write_corpus(corpus, tmp / "manifest.jsonl")
again = load_corpus(tmp / "manifest.jsonl")
assert [x.uid for x in again] == [x.uid for x in corpus]
assert again[0].mel == corpus[0].mel
