"""
The contrastive loss and its gradients
======================================

A few properties worth seeing with your own eyes: the loss only depends
on directions, identical embeddings give the closed form 2N log(2N-1),
and every hand-written gradient agrees with central differences.
"""

import math

import numpy as np

from lesioncl import contrastive as cl
from lesioncl.verify import run_suite

rng = np.random.default_rng(0)
n, tau = 4, 0.07
z = rng.normal(size=(2 * n, 16))
partner = cl.interleaved_partner(n)

rep = cl.ntxent_loss(z, partner, tau)
print(f"loss total {rep.total:.4f}  mean {rep.mean:.4f}")

# rescaling rows leaves the loss unchanged
scaled = cl.ntxent_loss(z * rng.uniform(0.1, 10, size=(2 * n, 1)), partner, tau)
print("row scaling changes the loss by", abs(scaled.total - rep.total))

# all rows equal: every logit ties
flat = cl.ntxent_loss(np.ones((2 * n, 16)), partner, tau)
print(f"identical rows {flat.total:.6f} vs {2 * n * math.log(2 * n - 1):.6f}")

# the finite-difference suite behind `lesioncl gradcheck`
for c in run_suite(0):
    print(f"{c.name:28s} {c.size:6d} params  rel err {c.max_rel_error:.1e}")
