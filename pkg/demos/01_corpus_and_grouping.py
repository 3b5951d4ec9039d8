# %% [markdown]
# # A synthetic cloudy-terrain corpus, and how hard each pair is
#
# Real cloud-removal data is scarce, so we make our own. Each pair is a
# fractal "terrain" image and the same image with a procedural cloud layer
# composited on top. Thin clouds are semi-transparent haze; thick clouds are
# opaque blobs with soft edges.
#
# Run with `python demos/01_corpus_and_grouping.py`. Takes a few seconds.

# %%
import tempfile
from pathlib import Path

import numpy as np

from dc4cr import metrics
from dc4cr.grouping import group_corpus, make_stage_plan
from dc4cr.synthcloud import composite, gen_cloud, gen_corpus, gen_terrain

# %% [markdown]
# ## One pair, two cloud types
#
# The alpha maps are what make a cloud "thin" or "thick". Thin alpha never
# exceeds 0.6; thick alpha saturates over a sizeable area.

# %%
clean = gen_terrain(seed=4, size=64)
for kind in ("thin", "thick"):
    alpha, colour = gen_cloud(seed=4, size=64, cloud_type=kind)
    cloudy = composite(clean, alpha, colour)
    print(
        f"{kind:5s} alpha max {alpha.max():.2f} mean {alpha.mean():.2f} "
        f"opaque {np.mean(alpha >= 0.95):5.1%} | "
        f"PSNR {metrics.psnr(cloudy, clean):5.2f} dB  SSIM {metrics.ssim(cloudy, clean):.3f}  "
        f"PD {metrics.perceptual_distance(cloudy, clean):.4f}"
    )

# %% [markdown]
# ## A whole corpus
#
# `gen_corpus` writes PNGs plus a JSON-lines manifest with an 80/20
# train/test split. The same seed always produces byte-identical files.

# %%
root = Path(tempfile.mkdtemp(prefix="dc4cr_demo_"))
manifest = gen_corpus(seed=1, n=60, size=32, thin_fraction=0.5, out_dir=root / "corpus")
print(f"\n{len(manifest.split('train'))} train / {len(manifest.split('test'))} test pairs in {root / 'corpus'}")
print((root / "corpus" / "manifest.jsonl").read_text().splitlines()[0])

# %% [markdown]
# ## Complexity groups
#
# Each training pair gets a score, MSE + (1 - SSIM) between cloudy and clean.
# k-means on the two terms splits the set into groups, renumbered so group 1
# is the easiest. Training then walks the groups in order, spending epochs in
# proportion to group size.

# %%
annotated, result, (ids, mses, ssims) = group_corpus(manifest, k=3, seed=0)
for g in (1, 2, 3):
    members = [e for e in annotated.split("train") if e.group == g]
    thin_share = np.mean([e.cloud_type == "thin" for e in members])
    mean_score = np.mean([e.score for e in members])
    print(f"group {g}: {len(members):2d} pairs, mean score {mean_score:.3f}, thin share {thin_share:.0%}")

plan = make_stage_plan(result, total_epochs=50)
print("stage plan (groups, epochs):", plan.stages)
