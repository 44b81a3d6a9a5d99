"""
Content path: text, pooled mel features and the flow prior
==========================================================
"""

# %%
import torch
from sdtts.config import preset
from sdtts.data import make_synthetic_corpus
from sdtts.model import ZeroShotTTS

torch.manual_seed(0)
cfg = preset("toy").model
model = ZeroShotTTS(cfg).eval()
u = make_synthetic_corpus(2, 2, seed=0)[0]

# %%
# phoneme-level linguistic features, and mel features pooled to phonemes
torch.set_grad_enabled(False)
e_ling = model.encode_linguistic(u.phonemes.ids)
e_mel = model.encode_mel_phoneme(u.mel, u.annotations.durations)
print(e_ling.shape, e_mel.shape)

# %%
# posterior over the latent, then through the flow
mu, logvar = model.posterior_of(e_mel)
print("logvar range", float(logvar.min()), float(logvar.max()))

# the flow starts as the identity because its output layers are zero
z = torch.randn(len(u.phonemes.ids), cfg.d_latent)
print("identity at init:", torch.equal(model.flow_forward(z, e_ling), z))

# give it some weights and check that it inverts
for layer in model.flow.layers:
    layer.post.reset_parameters()
y = model.flow_forward(z, e_ling)
back = model.flow_inverse(y, e_ling)
print("moved by", float((y - z).abs().max()), "round trip error", float((back - z).abs().max()))

# %%
# fusion adds a projection of z onto the linguistic features
e_con = model.fuse_content(e_ling, z)
print(e_con.shape)
