# %% [markdown]
# # Training a tiny cloud remover and using it
#
# This walks the command-line workflow from Python: make a corpus, group it,
# train with the curriculum, then remove clouds with each prompt. The corpus
# here is deliberately small (16x16 images, about 2000 steps) so the script
# finishes in roughly two minutes. On seed 2 the thin test tiles go from
# about 14.8 dB as delivered to about 15.8 dB after removal.

# %%
import tempfile
import time
from pathlib import Path

import numpy as np

from dc4cr import metrics
from dc4cr.diffusion import SampleConfig, TrainConfig, Trainer, evaluate, remove_clouds
from dc4cr.grouping import group_corpus, make_stage_plan
from dc4cr.synthcloud import gen_corpus

root = Path(tempfile.mkdtemp(prefix="dc4cr_train_"))
manifest = gen_corpus(seed=2, n=80, size=16, thin_fraction=0.5, out_dir=root / "corpus")
annotated, grouping, _ = group_corpus(manifest, k=3, seed=0)
print("group sizes:", grouping.sizes())

# %% [markdown]
# ## Train
#
# The control branch, FreeU and the style term are on. Learning rate is
# higher than the usual fine-tuning default because nothing here is
# pretrained.

# %%
cfg = TrainConfig(epochs=300, lr=1e-3, T=100, seed=0)
plan = make_stage_plan(grouping, cfg.epochs)
print("stage plan:", plan.stages)
start = time.time()
trainer = Trainer(annotated, cfg, enable=("control", "freeu", "style_loss"))
trainer.run(plan)
losses = [h["loss"] for h in trainer.history]
print(f"{trainer.step_count} steps in {time.time() - start:.0f}s; "
      f"loss {np.mean(losses[:20]):.4f} -> {np.mean(losses[-20:]):.4f}")

# %% [markdown]
# ## Remove clouds from the thin test images

# %%
report = evaluate(annotated, trainer.net, trainer.schedule, SampleConfig(), "test", cloud_type="thin")
thin_test = [e for e in annotated.split("test") if e.cloud_type == "thin"]
baseline = np.mean([metrics.psnr(*e.load()) for e in thin_test])
print(f"thin test PSNR: cloudy {baseline:.2f} dB -> output {report.summary()['psnr_mean']:.2f} dB")

# %% [markdown]
# ## The prompt matters
#
# The same cloudy image with the thin prompt and with the thick prompt gives
# two different reconstructions.

# %%
cloudy, clean = thin_test[0].load()
outs = {p: remove_clouds(trainer.net, trainer.schedule, [cloudy], SampleConfig(prompt=p))[0] for p in ("thin", "thick")}
for p, img in outs.items():
    print(f"prompt {p:5s}: PSNR {metrics.psnr(img, clean):.2f} dB")
print("outputs differ:", outs["thin"] != outs["thick"])
