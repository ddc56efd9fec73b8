"""Downstream grading: linear probe, fine-tuning and quadratic weighted kappa."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .imageops import derive_rng
from .model import ArchDescriptor, Checkpoint, ParamSet, forward_features, init_params
from .train import batch_to_input, cosine_lr, sgd_step

FRACTIONS = (0.01, 0.05, 0.10, 0.25, 1.0)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, 3) float
    grades: np.ndarray  # (N,) int
    num_classes: int = 5

    def __post_init__(self):
        self.grades = np.asarray(self.grades, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("labeled dataset is empty")
        if len(self.images) != len(self.grades):
            raise ValueError("images and grades differ in length")
        if self.grades.min() < 0 or self.grades.max() >= self.num_classes:
            raise ValueError(f"grades must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.grades)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.grades[idx], self.num_classes)


@dataclass(frozen=True)
class EvalConfig:
    lr: float = 0.01  # classifier
    epochs: int = 100
    batch_size: int = 0  # 0: full batch
    seed: int = 0
    standardize: bool = True
    feature_batch: int = 64
    # fine-tuning only
    encoder_lr: float = 0.01
    probe_epochs: int = 0  # classifier warm start on frozen features
    clip_norm: float = 0.0  # encoder gradient norm cap, 0 disables

    def __post_init__(self):
        if self.lr < 0 or self.encoder_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ProbeHead:
    weight: np.ndarray  # (K, d_h)
    bias: np.ndarray  # (K,)
    shift: np.ndarray  # (d_h,) feature standardization, folded in front
    scale: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.shift) * self.scale) @ self.weight.T + self.bias


@dataclass
class EvalReport:
    protocol: str
    fraction: float
    kappa: float
    accuracy: float
    confusion: list[list[int]]
    num_train: int = 0
    num_test: int = 0
    input_size: int = 0
    config: dict = field(default_factory=dict)
    checkpoint_hash: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


# -- metric ----------------------------------------------------------------


def confusion_matrix(true, pred, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(true), np.asarray(pred)), 1)
    return m


def quadratic_weighted_kappa(pred, true, k: int) -> float:
    """Cohen's kappa with (i-j)^2 disagreement weights over ``k`` ordered grades."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("kappa needs at least one sample")
    if k < 2:
        return 1.0
    if min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= k:
        raise ValueError(f"grades must lie in [0, {k})")
    # integer numerator and denominator make the value exactly symmetric
    # and independent of sample order
    counts = confusion_matrix(true, pred, k)
    g = np.arange(k, dtype=np.int64)
    w = (g[:, None] - g[None, :]) ** 2
    n = int(pred.size)
    disagree = int((w * counts).sum()) * n
    chance = int((w * np.outer(counts.sum(axis=1), counts.sum(axis=0))).sum())
    if chance == 0:
        return 1.0
    return 1.0 - disagree / chance


# -- data ------------------------------------------------------------------


def sample_partial(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Uniform sample without replacement of ``round(fraction * len(ds))`` items."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = int(round(fraction * len(ds)))
    if n < 1:
        raise ValueError(f"fraction {fraction} of {len(ds)} items selects nothing")
    idx = derive_rng(seed, 0x9A27, int(round(fraction * 1e6))).permutation(len(ds))[:n]
    return ds.subset(idx)


def extract_features(params: ParamSet, arch: ArchDescriptor, images: np.ndarray, batch: int = 64) -> np.ndarray:
    dtype = params["f.conv0.weight"].dtype
    out = []
    for i in range(0, len(images), batch):
        x = batch_to_input(images[i : i + batch], dtype)
        out.append(forward_features(params, arch, nx.Tensor(x)).data)
    return np.concatenate(out).astype(np.float64)


def _standardizer(feats: np.ndarray, enabled: bool):
    """Per-feature z-score; constant features get a zero scale."""
    d = feats.shape[1]
    if not enabled:
        return np.zeros(d), np.ones(d)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    return mu, np.where(sd > 1e-12, 1.0 / np.where(sd > 1e-12, sd, 1.0), 0.0)


def softmax_xent(logits: nx.Tensor, labels: np.ndarray) -> nx.Tensor:
    """Mean softmax cross-entropy as a single tape node."""
    z = logits.data
    n = z.shape[0]
    mx = z.max(axis=1, keepdims=True)
    e = np.exp(z - mx)
    p = e / e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g * d / n).astype(z.dtype),)

    return nx.custom_op("softmax_xent", (logits,), np.asarray(loss, dtype=z.dtype), vjp)


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    if batch_size <= 0 or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_probe(feats: np.ndarray, labels: np.ndarray, k: int, cfg: EvalConfig) -> ProbeHead:
    shift, scale = _standardizer(feats, cfg.standardize)
    x = nx.Tensor((feats - shift) * scale)
    w = nx.Tensor(np.zeros((k, feats.shape[1])), requires_grad=True)
    b = nx.Tensor(np.zeros(k), requires_grad=True)
    n = len(labels)
    per_epoch = 1 if cfg.batch_size <= 0 or cfg.batch_size >= n else math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, derive_rng(cfg.seed, 0x9B0E, epoch)):
            with nx.Tape() as tape:
                loss = softmax_xent(nx.affine(nx.Tensor(x.data[idx]), w, b), labels[idx])
            g = nx.backward(tape, loss, [w, b])
            lr = cosine_lr(step, total, cfg.lr)
            w.data -= lr * g[id(w)]
            b.data -= lr * g[id(b)]
            step += 1
    return ProbeHead(w.data, b.data, shift, scale)


def predict(logits: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=1)  # ties -> lowest class


def _report(protocol, fraction, pred, true, k, n_train, input_size, cfg, ckpt_hash) -> EvalReport:
    cm = confusion_matrix(true, pred, k)
    return EvalReport(
        protocol, float(fraction), quadratic_weighted_kappa(pred, true, k), float(np.mean(pred == true)),
        cm.tolist(), n_train, len(true), input_size, cfg.to_dict(), ckpt_hash,
    )


def _encoder_of(ckpt: Checkpoint) -> ParamSet:
    enc = ckpt.params.encoder().astype(np.float32)
    expected = {k for k in ckpt.arch.param_shapes() if k.startswith("f.")}
    if set(enc) != expected:
        raise ValueError(f"checkpoint encoder tensors {sorted(enc)} do not match its architecture")
    return enc


def linear_eval(ckpt: Checkpoint, train: LabeledDataset, test: LabeledDataset, cfg: EvalConfig | None = None,
                fraction: float = 1.0) -> EvalReport:
    """Frozen encoder (head dropped) + linear classifier on cached features."""
    cfg = cfg or EvalConfig()
    enc = _encoder_of(ckpt)
    ftr = extract_features(enc, ckpt.arch, train.images, cfg.feature_batch)
    fte = extract_features(enc, ckpt.arch, test.images, cfg.feature_batch)
    if ftr.shape[1] != ckpt.arch.d_h:
        raise ValueError(f"feature dim {ftr.shape[1]} != d_h {ckpt.arch.d_h}")
    probe = train_probe(ftr, train.grades, train.num_classes, cfg)
    pred = predict(probe.logits(fte))
    return _report("linear", fraction, pred, test.grades, test.num_classes, len(train),
                   train.images.shape[1], cfg, ckpt.digest())


def transfer_eval(ckpt: Checkpoint, train: LabeledDataset, test: LabeledDataset, cfg: EvalConfig | None = None,
                  fraction: float = 1.0) -> EvalReport:
    """Fine-tune encoder and linear classifier jointly from the checkpoint.

    With ``cfg.probe_epochs`` the classifier is first fitted on frozen
    features, as in :func:`linear_eval`.  Joint training then runs for
    ``cfg.epochs`` with the classifier stepping at ``cfg.lr`` and the encoder
    at ``cfg.encoder_lr`` on one cosine schedule.  Feature standardization is
    computed from the initial encoder and then held fixed.  Standardizing a
    handful of samples can put very large gains on near-constant features,
    so ``cfg.clip_norm`` caps the encoder gradient norm.
    """
    cfg = cfg or EvalConfig()
    arch = ckpt.arch
    enc = _encoder_of(ckpt).copy()
    k = train.num_classes
    ftr0 = extract_features(enc, arch, train.images, cfg.feature_batch)
    if cfg.probe_epochs:
        warm = train_probe(ftr0, train.grades, k, replace(cfg, epochs=cfg.probe_epochs))
        shift, scale, w0, b0 = warm.shift, warm.scale, warm.weight, warm.bias
    else:
        shift, scale = _standardizer(ftr0, cfg.standardize)
        w0, b0 = np.zeros((k, arch.d_h)), np.zeros(k)
    shift_t = nx.Tensor(shift.astype(np.float32))
    scale_t = nx.Tensor(scale.astype(np.float32))
    w = nx.Tensor(w0.astype(np.float32), requires_grad=True, name="probe.weight")
    b = nx.Tensor(b0.astype(np.float32), requires_grad=True, name="probe.bias")
    head = ParamSet({"probe.weight": w, "probe.bias": b})
    trainable = ParamSet(enc)
    trainable.update(head)
    n = len(train)
    per_epoch = 1 if cfg.batch_size <= 0 or cfg.batch_size >= n else math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, derive_rng(cfg.seed, 0x7F1E, epoch)):
            x = nx.Tensor(batch_to_input(train.images[idx], np.float32))
            with nx.Tape() as tape:
                h = forward_features(enc, arch, x)
                hs = nx.mul(nx.add(h, nx.Tensor(-shift_t.data)), scale_t)
                loss = softmax_xent(nx.affine(hs, w, b), train.grades[idx])
            g = nx.backward(tape, loss, trainable.values())
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
            frac = cosine_lr(step, total, 1.0)
            ge = {name: g[id(t)] for name, t in enc.items()}
            if cfg.clip_norm:
                norm = math.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in ge.values()))
                if norm > cfg.clip_norm:
                    ge = {name: v * (cfg.clip_norm / norm) for name, v in ge.items()}
            sgd_step(enc, ge, frac * cfg.encoder_lr)
            sgd_step(head, {name: g[id(t)] for name, t in head.items()}, frac * cfg.lr)
            step += 1
    fte = extract_features(enc, arch, test.images, cfg.feature_batch)
    probe = ProbeHead(w.data.astype(np.float64), b.data.astype(np.float64), shift, scale)
    pred = predict(probe.logits(fte))
    return _report("transfer", fraction, pred, test.grades, test.num_classes, len(train),
                   train.images.shape[1], cfg, ckpt.digest())


def random_checkpoint(arch: ArchDescriptor, seed: int) -> Checkpoint:
    """Untrained encoder, for the random-frozen and supervised-from-scratch baselines."""
    return Checkpoint(arch, init_params(arch, seed, dtype=np.float32), seed, 0)
