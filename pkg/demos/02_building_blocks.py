# %% [markdown]
# # The building blocks, checked by hand
#
# Everything trains through a small reverse-mode autodiff engine over numpy
# arrays. Before trusting a training curve it is worth poking at the pieces:
# gradients, low-rank adapters, the FreeU feature transform and the noise
# schedule.

# %%
import numpy as np

from dc4cr import lora
from dc4cr import numerics as nx
from dc4cr.diffusion import DiffusionSchedule, predict_x0, q_sample
from dc4cr.net import FREEU_DEFAULT, UNet, UNetConfig
from dc4cr.numerics import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# ## Gradients agree with finite differences
#
# `grad_check` compares backprop against central differences and reports the
# worst relative error. Here: a strided convolution followed by SiLU.

# %%
x = Tensor(rng.normal(size=(2, 3, 8, 8)))
k = Tensor(rng.normal(size=(4, 3, 3, 3)))
f = lambda t: nx.silu(nx.conv2d(x, t, stride=2, padding=1)).sum()
print("conv2d + silu, kernel grad error:", nx.grad_check(f, k))

# %% [markdown]
# ## LoRA is a low-rank additive patch
#
# A fresh adapter has B = 0 and changes nothing. Once trained, merging it into
# the base weight gives the same forward pass as keeping it separate, and
# alpha scales the patch linearly.

# %%
base = Tensor(rng.normal(size=(6, 27)))
adapter = lora.new_adapter((6, 27), r=2, alpha=0.7, seed=1)
print("fresh adapter is identity:", np.array_equal(lora.effective_weight(base, adapter).data, base.data))
adapter.B.data = rng.normal(size=adapter.B.shape)
print("rank of the patch:", np.linalg.matrix_rank(adapter.delta()))
merged = lora.merge(base, adapter)
print("unmerge restores base (max err):", np.abs(lora.unmerge(merged, adapter).data - base.data).max())

# %% [markdown]
# ## FreeU rescales decoder features
#
# With identity parameters the network output is bit-for-bit unchanged. The
# (0.9, 0.4, 1.1, 1.1) setting visibly moves it.

# %%
net = UNet(UNetConfig(seed=0))
xt = Tensor(rng.normal(size=(1, 3, 16, 16)))
cond = net.cond_matrix(["thin"])
plain = net(xt, [50], cond).data
tuned = net(xt, [50], cond, freeu=FREEU_DEFAULT).data
print("FreeU mean |change| on an untrained net:", np.abs(tuned - plain).mean())

# %% [markdown]
# ## The noise schedule
#
# Two hundred steps, ending close to pure noise. Noising is exactly
# invertible when the true noise is known, which is what training exploits:
# the network predicts the noise, and the clean image follows algebraically.

# %%
sched = DiffusionSchedule(T=200)
print("alpha_bar at t = 0, 100, 199:", sched.alpha_bars[[0, 100, 199]].round(5))
x0 = rng.uniform(-1, 1, (1, 3, 8, 8))
eps = rng.standard_normal(x0.shape)
xt = q_sample(sched, x0, 120, eps)
print("inversion error:", np.abs(predict_x0(sched, xt, 120, eps) - x0).max())
