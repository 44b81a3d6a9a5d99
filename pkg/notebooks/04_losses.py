"""
Training objectives
===================
"""

# %%
import torch

torch.set_grad_enabled(False)
from sdtts.config import LossWeights
from sdtts.objectives import PatchDiscriminator, loss_adv_d, loss_adv_g, loss_cyc, loss_kl, loss_rec, total_loss

# %%
# cyclic timbre loss: positives in the numerator, negatives only below
eye = torch.eye(2)
print(float(loss_cyc(eye, eye)))          # -1
print(float(loss_cyc(eye[[0, 0]], eye[[0, 0]])))  # 0

# %%
print(float(loss_kl(torch.zeros(3, 4), torch.zeros(3, 4))))  # 0 for a standard normal
print(float(loss_rec(torch.ones(5, 4), torch.zeros(5, 4))))  # 1

# %%
# a PatchGAN over (time, mel) with LSGAN targets
torch.manual_seed(0)
disc = PatchDiscriminator(channels=8, n_layers=3)
real, fake = torch.randn(32, 16), torch.randn(32, 16)
print(disc(real).shape)
print(float(loss_adv_d(disc(real), disc(fake))), float(loss_adv_g(disc(fake))))

# %%
parts = {"rec": torch.tensor(0.5), "kl": torch.tensor(2.0), "adv_g": torch.tensor(0.3)}
total, report = total_loss(parts, LossWeights())
print(float(total), report)
