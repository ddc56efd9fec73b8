"""Finite-difference checks of the hand-written gradients.

Everything runs in float64 with central differences.  The error measure is
``max|fd - analytic| / max(max|fd|, max|analytic|)`` per tensor, so a check
on a tensor whose gradient is all zero compares against the 1e-12 floor.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .contrastive import interleaved_partner, ntxent, ntxent_loss
from .model import TINY, ArchDescriptor, forward_features, forward_projection, init_params

H = 1e-5
TOL = 1e-4


@dataclass(frozen=True)
class GradCheck:
    name: str
    max_rel_error: float
    size: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOL


def rel_error(fd: np.ndarray, an: np.ndarray) -> float:
    scale = max(float(np.abs(fd).max()), float(np.abs(an).max()), 1e-12)
    return float(np.abs(fd - an).max()) / scale


def check_loss_grad(n: int = 4, d: int = 8, tau: float = 0.5, seed: int = 0) -> GradCheck:
    """Analytic dL/dZ of the contrastive loss against differences of the loss itself."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2 * n, d))
    partner = interleaved_partner(n)
    _, an = ntxent_loss(z, partner, tau, with_grad=True)
    fd = nx.finite_diff_grad(lambda a: ntxent_loss(a, partner, tau).total, z, H)
    return GradCheck(f"loss wrt Z (N={n}, d={d}, tau={tau})", rel_error(fd, an), z.size)


def check_model_grads(arch: ArchDescriptor = TINY, n: int = 2, side: int = 12, tau: float = 0.5,
                      seed: int = 0) -> list[GradCheck]:
    """Every parameter of encoder + head through the loss, one finite difference per entry."""
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed, dtype=np.float64)
    x = nx.Tensor(rng.uniform(0.0, 1.0, size=(2 * n, 3, side, side)))
    partner = interleaved_partner(n)

    def loss_value() -> float:
        z = forward_projection(params, forward_features(params, arch, x))
        return ntxent(z, partner, tau, reduction="sum")[0].data.item()

    with nx.Tape() as tape:
        z = forward_projection(params, forward_features(params, arch, x))
        loss, _ = ntxent(z, partner, tau, reduction="sum")
    grads = nx.backward(tape, loss, params.values())
    out = []
    for name, t in params.items():
        def f(a, t=t):
            old = t.data
            t.data = a
            try:
                return loss_value()
            finally:
                t.data = old

        fd = nx.finite_diff_grad(f, t.data.copy(), H)
        out.append(GradCheck(f"{arch.head}:{name}", rel_error(fd, grads[id(t)]), t.data.size))
    return out


def run_suite(seed: int = 0) -> list[GradCheck]:
    checks = [check_loss_grad(n, d, tau, seed + i)
              for i, (n, d, tau) in enumerate([(1, 3, 0.07), (2, 3, 0.5), (4, 16, 0.07), (8, 16, 0.5)])]
    for head in ("relu", "mlp"):
        checks += check_model_grads(replace(TINY, head=head), seed=seed)
    return checks
