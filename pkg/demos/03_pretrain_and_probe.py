"""
Pretrain on lesion patches, then probe
======================================

A shrunken version of the lesion vs whole-image vs random comparison.
Scale is small enough to finish in a minute or two on one core, so the
kappas are noisy; the point is the shape of the pipeline.
"""

import sys
import tempfile
from pathlib import Path

from lesioncl import cli

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="lesioncl-compare-"))

cfg = cli.RunConfig.from_dict({
    "synth": {"count": 160},
    "test_count": 60,
    "train": {"epochs": 4},
    "fractions": [0.25, 1.0],
})
print(cli.make_dataset(cfg, out / "data"))

res = cli.run_compare(out / "data", cfg, cells=[("linear", 0.25), ("linear", 1.0)], out=out / "run")
for m, summary in res["pretraining"].items():
    print(m, {k: summary[k] for k in ("steps", "final_mean_loss", "final_contrastive_acc")})
print(cli.format_grid(res["grid"], [0.25, 1.0]))
