"""
Speaker path: style, timbre, variance adapter and the AdaIN decoder
===================================================================
"""

# %%
import torch
from sdtts.config import preset
from sdtts.data import make_synthetic_corpus
from sdtts.evaluation import cosine_sim
from sdtts.model import ZeroShotTTS
from sdtts.speaker import length_regulate

torch.manual_seed(0)
cfg = preset("toy").model
model = ZeroShotTTS(cfg).eval()
corpus = make_synthetic_corpus(3, 4, seed=1)

# %%
# the style sequence is 4x shorter than the prompt
prompt = corpus[0].mel
print(prompt.n_frames, "->", model.encode_style(prompt).shape)

# %%
# the frozen stub embedder already separates speakers on this corpus
emb = model.embedder
a, b, c = corpus[0], corpus[1], corpus[4]
print("same speaker ", cosine_sim(emb.embed(a.mel.frames), emb.embed(b.mel.frames)))
print("other speaker", cosine_sim(emb.embed(a.mel.frames), emb.embed(c.mel.frames)))

# %%
# length regulation repeats each phoneme row by its duration
x = torch.arange(3.0)[:, None]
print(length_regulate(x, [2, 3, 1]).squeeze(-1))

# %%
# predict duration / pitch / energy, then decode with the prompt's timbre
with torch.no_grad():
    e_con = model.encode_linguistic(corpus[2].phonemes.ids)
    e_sty = model.encode_style(prompt)
    log_d, pitch, energy = model.predict_attributes(e_con, e_sty)
    e_spk = model.project_timbre(model.encode_timbre(prompt))
    durations = corpus[2].annotations.durations
    trace = []
    mel = model.decode_mel(e_con, e_spk, pitch, energy, durations, trace=trace)
print(mel.shape)

# every AdaIN output has per-channel mean beta and std |gamma|
y, adain, _ = trace[0]
gamma, beta = adain.style(e_spk[None])
print(float((y[0].mean(-1) - beta[0]).abs().max()), float((y[0].std(-1, unbiased=False) - gamma[0].abs()).abs().max()))
