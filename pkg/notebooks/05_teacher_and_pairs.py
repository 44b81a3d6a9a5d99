"""
A short teacher run and parallel pair generation
================================================

The acceptance suite trains for 2,000 steps.  Here 200 are enough to see
the reconstruction loss fall.
"""

# %%
import dataclasses
import numpy as np
from sdtts.config import preset
from sdtts.data import make_synthetic_corpus
from sdtts.distill import generate_parallel_pairs, synthesize, train_teacher

cfg = preset("toy")
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=200))
corpus = make_synthetic_corpus(4, 8, seed=0)

result = train_teacher(corpus, cfg)
rec = [r.rec for r in result.reports]
print("L_rec", round(rec[0], 3), "->", round(float(np.mean(rec[-20:])), 3))

# %%
# each real utterance gets a twin in another speaker's voice, same timing
pairs = generate_parallel_pairs(result.checkpoint, corpus, cfg.distill)
p = pairs.pairs[0]
print(p.source.uid, p.speakers, p.source.mel.n_frames, p.synthetic_mel.n_frames)
assert all(q.synthetic_mel.n_frames == q.source.mel.n_frames for q in pairs.pairs)

# %%
# free synthesis with predicted durations
mel = synthesize(result.checkpoint, corpus[3].phonemes.ids, corpus[9], seed=0, noise_scale=0.0)
print(mel.n_frames, "frames")
