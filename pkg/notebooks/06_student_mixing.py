"""
Mixing synthetic pairs into student batches
===========================================
"""

# %%
import numpy as np
from sdtts.data import MelSpectrogram, make_synthetic_corpus
from sdtts.distill import TrainItem, mix_batch

corpus = make_synthetic_corpus(1, 64, seed=1, min_frames=16)
items = [TrainItem(u, u, u.mel.frames) for u in corpus]


class Pair:
    def __init__(self, mel):
        self.synthetic_mel = mel


pairs = {u.uid: Pair(MelSpectrogram(-u.mel.frames)) for u in corpus}
rng = np.random.default_rng(0)

# floor(sigma * B) content inputs are swapped, every batch
for sigma in (0.0, 0.5, 0.8, 1.0):
    counts = {int(mix_batch(items, pairs, sigma, rng)[1].sum()) for _ in range(100)}
    print(sigma, counts)

# %%
# only the content input changes; target and prompt stay real
out, mask = mix_batch(items[:8], pairs, 0.5, rng)
for o, i, m in zip(out, items, mask):
    assert o.target is i.target and o.prompt is i.prompt
    assert np.array_equal(o.content, -i.content if m else i.content)
