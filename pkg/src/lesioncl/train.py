"""Contrastive pretraining with plain SGD and a cosine learning-rate schedule."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .contrastive import make_view_batch, ntxent
from .imageops import AugmentConfig, derive_rng, read_image, resize_bilinear, to_uint8
from .model import ArchDescriptor, Checkpoint, ParamSet, forward_features, forward_projection, init_params
from .patches import FRAME, BBox, PatchSpec

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "total_loss", "mean_loss", "contrastive_acc", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    initial_lr: float = 0.001
    tau: float = 0.07
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables intermediate checkpoints
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    arch: ArchDescriptor = field(default_factory=ArchDescriptor)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("pretraining needs batch_size >= 2 (at least one negative per view)")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("augment", "arch")}
        d["augment"] = self.augment.to_dict()
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "arch" in d:
            d["arch"] = ArchDescriptor.from_dict(d["arch"])
        return cls(**d)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("train log steps must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path, include_time: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r["step"], repr(r["lr"]), repr(r["total_loss"]), repr(r["mean_loss"]),
                            repr(r["contrastive_acc"]), r["wall_ms"] if include_time else 0])


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """In-place ``theta -= lr * grad``; parameters without a gradient stay put."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if lr:
            p.data -= np.asarray(lr * g, dtype=p.dtype)
    return params


class ImageStore:
    """Source images resized to the 512x512 patch frame, kept as uint8."""

    def __init__(self, frame: int = FRAME):
        self.frame = frame
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            img = read_image(path)
            arr = to_uint8(resize_bilinear(img, self.frame, self.frame))
            self._cache[path] = arr
        return arr

    def __call__(self, spec: PatchSpec) -> np.ndarray:
        return self.get(spec.image_path)

    def __len__(self) -> int:
        return len(self._cache)


def whole_image_specs(paths: Sequence[tuple[str, str]], frame: int = FRAME) -> list[PatchSpec]:
    """Pseudo-patches spanning entire images, for the whole-image baseline."""
    full = BBox(0.0, 0.0, float(frame), float(frame), "image", 1.0)
    return [PatchSpec(image_id, full, full, path) for image_id, path in paths]


def batch_to_input(views: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, H, W, 3) images to a contiguous (N, 3, H, W) network input."""
    return np.ascontiguousarray(views.transpose(0, 3, 1, 2), dtype=dtype)


def contrastive_step(params: ParamSet, arch: ArchDescriptor, x: np.ndarray, partner, tau: float):
    """Loss report and per-parameter gradients of the mean loss for one batch."""
    with nx.Tape() as tape:
        h = forward_features(params, arch, nx.Tensor(x))
        z = forward_projection(params, h)
        loss, report = ntxent(z, partner, tau, reduction="mean")
    g = nx.backward(tape, loss, params.values())
    return report, {name: g[id(t)] for name, t in params.items()}


def pretrain(
    cfg: TrainConfig,
    specs: Sequence[PatchSpec],
    images: Callable[[PatchSpec], np.ndarray],
    out_dir: str | Path | None = None,
    anchor_lesion: bool = True,
    dtype=np.float32,
    deterministic_log: bool = False,
    max_steps: int | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Run ``epochs * (len(specs) // batch_size)`` SGD steps on the contrastive loss.

    ``max_steps`` replaces that budget with an exact step count, taking as
    many epochs as needed; runs on datasets of different size can then be
    given the same number of updates.  Batches are drawn from a per-epoch
    permutation; the trailing partial batch is dropped.  With ``out_dir`` the
    final checkpoint and CSV log are written there (plus intermediate
    checkpoints if configured).
    """
    from .model import save_checkpoint

    n = cfg.batch_size
    if n > len(specs):
        raise TrainingError(f"batch size {n} exceeds the {len(specs)} available patches")
    per_epoch = len(specs) // n
    if max_steps is None:
        total, epochs = cfg.epochs * per_epoch, cfg.epochs
    elif max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    else:
        total, epochs = max_steps, math.ceil(max_steps / per_epoch)
    params = init_params(cfg.arch, cfg.seed, dtype=dtype)
    train_log = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(epochs):
        order = derive_rng(cfg.seed, 0xE90C, epoch).permutation(len(specs))
        for b in range(min(per_epoch, total - step)):
            t0 = time.perf_counter()
            idx = order[b * n : (b + 1) * n]
            batch = make_view_batch(
                [specs[i] for i in idx], images, cfg.augment, cfg.seed, step, idx, anchor_lesion=anchor_lesion
            )
            x = batch_to_input(batch.views, dtype)
            try:
                report, grads = contrastive_step(params, cfg.arch, x, batch.partner, cfg.tau)
            except ValueError as exc:
                raise TrainingError(f"step {step} (epoch {epoch}): {exc}") from exc
            if not math.isfinite(report.total) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite loss/gradient at step {step} (epoch {epoch}): loss={report.total}")
            lr = cosine_lr(step, total, cfg.initial_lr)
            sgd_step(params, grads, lr)
            wall = 0 if deterministic_log else int(round((time.perf_counter() - t0) * 1000))
            train_log.append(step=step, lr=lr, total_loss=report.total, mean_loss=report.mean,
                             contrastive_acc=report.accuracy, wall_ms=wall)
            step += 1
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{step:06d}.ckpt", Checkpoint(cfg.arch, params, cfg.seed, step))
        if train_log.rows:
            log.debug("epoch %d mean loss %.4f", epoch, train_log.rows[-1]["mean_loss"])
    ckpt = Checkpoint(cfg.arch, params, cfg.seed, step)
    if out is not None:
        save_checkpoint(out / "final.ckpt", ckpt)
        train_log.write_csv(out / "train_log.csv")
    return ckpt, train_log
