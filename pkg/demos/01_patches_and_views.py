"""
From detections to augmented lesion views
=========================================

Generate a handful of synthetic fundus images, keep the confident
detections, turn each one into a 128x128 window and draw two random
views from it.  The views are written as PNGs next to this script's
output directory so they can be inspected by eye.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from lesioncl import imageops as io
from lesioncl import patches, synth
from lesioncl.contrastive import make_view_batch
from lesioncl.train import ImageStore

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="lesioncl-views-"))

# a small population; every planted lesion also appears as a scored detection
samples = synth.generate(synth.SynthConfig(count=8, seed=3))
paths = synth.export(samples, out / "data")
recs = patches.read_detections(paths["detections"])
for t in (0.7, 0.8, 0.9):
    _, stats = patches.filter_by_confidence(recs, t)
    print(f"threshold {t}: {stats.num_images} images, {stats.num_lesions} lesions")

# windows live in a 512x512 frame and always cover their lesion
specs = patches.build_patch_dataset(recs, 0.8, seed=0, root=out / "data")
spec = specs[0]
print("first window", spec.window.coords, "covers lesion:", patches.window_covers(spec))

# two views per patch, a pure function of (seed, step, patch index, view)
store = ImageStore()
batch = make_view_batch(specs[:4], store, io.AugmentConfig(), seed=0)
print("views", batch.views.shape, "partner of each row", batch.partner)
for i, v in enumerate(batch.views):
    io.write_image(out / f"view{i}.png", v)

again = make_view_batch(specs[:4], store, io.AugmentConfig(), seed=0)
print("re-drawn views identical:", np.array_equal(batch.views, again.views))
print("wrote", out)
