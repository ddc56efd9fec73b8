"""Two-view batches and the normalized-temperature cross-entropy loss.

Views ``2k`` and ``2k+1`` come from patch ``k``; each is the other's
positive and every remaining view in the batch is a negative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .imageops import AugmentConfig, derive_rng, make_view
from .patches import PatchSpec


@dataclass
class ViewBatch:
    views: np.ndarray  # (2N, H, W, 3)
    partner: np.ndarray  # (2N,) int
    patch_ids: list[str]

    @property
    def size(self) -> int:
        return len(self.partner)


@dataclass(frozen=True)
class LossReport:
    total: float
    mean: float
    accuracy: float


def interleaved_partner(n: int) -> np.ndarray:
    """Pairing map for ``2n`` interleaved views: 0<->1, 2<->3, ..."""
    return np.arange(2 * n) ^ 1


def make_view_batch(
    patches: Sequence[PatchSpec],
    image_lookup: Callable[[PatchSpec], np.ndarray],
    cfg: AugmentConfig,
    seed: int,
    step: int = 0,
    patch_index: Sequence[int] | None = None,
    anchor_lesion: bool = True,
) -> ViewBatch:
    """Two independently augmented views per patch.

    View ``v`` of patch ``k`` draws from ``derive_rng(seed, step, idx_k, v)``
    where ``idx_k`` is the patch's dataset index, so a batch is a pure
    function of its arguments.
    """
    if not patches:
        raise ValueError("need at least one patch")
    idx = list(range(len(patches))) if patch_index is None else list(patch_index)
    views = []
    for k, spec in enumerate(patches):
        src = image_lookup(spec)
        anchor = spec.lesion.center if anchor_lesion else None
        for v in (0, 1):
            rng = derive_rng(seed, step, idx[k], v)
            views.append(make_view(src, spec.window.coords, cfg, rng, anchor=anchor))
    return ViewBatch(np.stack(views), interleaved_partner(len(patches)), [p.image_id for p in patches])


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0).tolist()
        raise ValueError(f"zero embedding rows {bad}")
    return z / norms, norms


def ntxent_loss(z, partner, tau: float, with_grad: bool = False):
    """Sum over all views of ``-log softmax`` of the positive logit.

    Logits are cosine similarities over ``tau`` with the self-similarity
    excluded from every denominator.  Returns a :class:`LossReport`, or
    ``(report, dL_total/dZ)`` when ``with_grad`` is set.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z)
    partner = np.asarray(partner)
    m = z.shape[0]
    if m < 2 or m % 2:
        raise ValueError(f"need an even number >= 2 of rows, got {m}")
    u, norms = _unit_rows(z)
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    rows = np.arange(m)
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    denom = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    terms = lse - logits[rows, partner]
    total = float(terms.sum())
    report = LossReport(total, total / m, _accuracy(logits, partner) if m >= 4 else 1.0)
    if not with_grad:
        return report
    p = e / denom
    p[rows, partner] -= 1.0
    gu = (p + p.T) @ u / tau
    gz = (gu - u * (gu * u).sum(axis=1, keepdims=True)) / norms
    return report, gz


def _accuracy(logits: np.ndarray, partner: np.ndarray) -> float:
    # argmax returns the first maximum: ties go to the lowest index
    return float(np.mean(logits.argmax(axis=1) == partner))


def contrastive_accuracy(z, partner) -> float:
    """Fraction of rows whose most cosine-similar other row is their positive."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < 4:
        raise ValueError("accuracy needs at least one negative per row (2N >= 4)")
    u, _ = _unit_rows(z)
    sims = u @ u.T
    np.fill_diagonal(sims, -np.inf)
    return _accuracy(sims, np.asarray(partner))


def ntxent(z: nx.Tensor, partner, tau: float, reduction: str = "mean") -> tuple[nx.Tensor, LossReport]:
    """Tape-recorded loss node; ``reduction`` is ``"mean"`` or ``"sum"``."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"bad reduction {reduction!r}")
    report, gz = ntxent_loss(z.data, partner, tau, with_grad=True)
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0
    value = report.mean if reduction == "mean" else report.total
    out = np.asarray(value, dtype=z.dtype)

    def vjp(g):
        return ((g * scale * gz).astype(z.dtype),)

    return nx.custom_op("ntxent", (z,), out, vjp), report
