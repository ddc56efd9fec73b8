"""Synthetic fundus-like images with planted lesions and fake detections.

A dim orange disc on black stands in for the retina.  Lesions are small
anti-aliased ellipses of two kinds whose colours differ from the background
mostly in hue.  The grade is a function of the lesion count, so grading is
ordinal and its evidence covers only a few percent of the image.  Each image
also gets a simulated detector output: every true lesion with a confidence
in [0.6, 1.0] plus Poisson false positives scored in [0.3, 0.7).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageops import derive_rng, read_image, write_image
from .patches import BBox, DetectionRecord, write_detections

# (R, G, B) offsets added to the local background colour
LESION_COLORS = {
    "exudate": (0.10, 0.20, -0.02),
    "hemorrhage": (0.02, -0.14, -0.06),
}


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    count: int = 100
    grades: int = 3
    # inclusive lesion-count range per grade; must be ordered and disjoint
    lesion_counts: tuple[tuple[int, int], ...] = ((0, 1), (2, 4), (5, 8))
    lesion_classes: tuple[str, ...] = ("exudate", "hemorrhage")
    radius_range: tuple[float, float] = (4.0, 10.0)
    disc_color: tuple[float, float, float] = (0.55, 0.27, 0.12)
    brightness_jitter: float = 0.25
    noise_range: tuple[float, float] = (0.01, 0.05)
    illumination: float = 0.15
    confidence_range: tuple[float, float] = (0.6, 1.0)
    false_positive_rate: float = 1.0
    false_positive_conf: tuple[float, float] = (0.3, 0.7)
    max_lesion_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_counts", tuple(tuple(int(v) for v in r) for r in self.lesion_counts))
        for name in ("lesion_classes", "radius_range", "disc_color", "noise_range",
                     "confidence_range", "false_positive_conf"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if len(self.lesion_counts) != self.grades:
            raise ValueError(f"{self.grades} grades but {len(self.lesion_counts)} lesion-count ranges")
        prev_hi = -1
        for lo, hi in self.lesion_counts:
            if lo > hi or lo <= prev_hi:
                raise ValueError(f"lesion-count ranges must be ordered and disjoint: {self.lesion_counts}")
            prev_hi = hi
        unknown = set(self.lesion_classes) - set(LESION_COLORS)
        if unknown:
            raise ValueError(f"unknown lesion classes {sorted(unknown)}")

    def grade_for_count(self, n: int) -> int:
        for g, (lo, hi) in enumerate(self.lesion_counts):
            if lo <= n <= hi:
                return g
        raise ValueError(f"lesion count {n} not covered by any grade range")

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Lesion:
    box: BBox
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float


@dataclass
class SynthSample:
    image_id: str
    image: np.ndarray
    grade: int
    lesions: list[Lesion]
    detection: DetectionRecord
    disc: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))  # cx, cy, radius

    @property
    def lesion_boxes(self) -> list[BBox]:
        return [l.box for l in self.lesions]


def _ellipse_coverage(xx, yy, cx, cy, rx, ry, angle):
    """Approximate per-pixel area coverage of a rotated ellipse (1px ramp)."""
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    rho = np.sqrt(u * u + v * v)
    # distance to the boundary in pixels, measured along the minor scale
    return np.clip((1.0 - rho) * min(rx, ry) + 0.5, 0.0, 1.0)


def _place_lesions(rng, cfg: SynthConfig, n: int, disc, size: int) -> list[tuple]:
    dcx, dcy, dr = disc
    placed: list[tuple] = []
    budget = cfg.max_lesion_fraction * math.pi * dr * dr
    for _ in range(n):
        for _attempt in range(200):
            rx = rng.uniform(*cfg.radius_range)
            ry = rx * rng.uniform(0.7, 1.0)
            ang = rng.uniform(0.0, math.pi)
            rad = math.sqrt(rng.uniform(0.0, 1.0)) * (dr - 1.5 * cfg.radius_range[1] - 2)
            th = rng.uniform(0.0, 2 * math.pi)
            cx, cy = dcx + rad * math.cos(th), dcy + rad * math.sin(th)
            ok = all(math.hypot(cx - p[0], cy - p[1]) > p[2] + rx + 2.0 for p in placed)
            area = sum(math.pi * p[2] * p[3] for p in placed) + math.pi * rx * ry
            if ok and area < budget and rx < cx < size - rx and rx < cy < size - rx:
                placed.append((cx, cy, rx, ry, ang))
                break
        else:
            raise SynthError(f"could not place {n} lesions without overlap after bounded retries")
    return placed


def _render_one(cfg: SynthConfig, index: int) -> SynthSample:
    size = cfg.image_size
    rng = derive_rng(cfg.seed, 0x5E9, index)
    grade = int(rng.integers(cfg.grades))
    lo, hi = cfg.lesion_counts[grade]
    n = int(rng.integers(lo, hi + 1))
    scale = size / 256.0
    disc_r = rng.uniform(0.42, 0.47) * size
    disc = (size / 2 + rng.uniform(-4, 4) * scale, size / 2 + rng.uniform(-4, 4) * scale, disc_r)

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64) + 0.5, np.arange(size, dtype=np.float64) + 0.5, indexing="ij")
    base = np.array(cfg.disc_color) * (1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter))
    base = base * (1.0 + rng.uniform(-0.1, 0.1, size=3))
    gdir = rng.uniform(0, 2 * math.pi)
    ramp = ((xx - size / 2) * math.cos(gdir) + (yy - size / 2) * math.sin(gdir)) / (size / 2)
    illum = 1.0 + cfg.illumination * rng.uniform(0.0, 1.0) * ramp
    img = base[None, None, :] * illum[..., None]

    placed = _place_lesions(rng, cfg, n, disc, size)
    lesions = []
    for cx, cy, rx, ry, ang in placed:
        cls = cfg.lesion_classes[int(rng.integers(len(cfg.lesion_classes)))]
        cov = _ellipse_coverage(xx, yy, cx, cy, rx, ry, ang)
        tint = np.array(LESION_COLORS[cls]) * rng.uniform(0.8, 1.2)
        img = img + cov[..., None] * tint[None, None, :]
        ext = math.hypot(rx * math.cos(ang), ry * math.sin(ang)), math.hypot(rx * math.sin(ang), ry * math.cos(ang))
        box = BBox(max(cx - ext[0], 0.0), max(cy - ext[1], 0.0), min(cx + ext[0], size), min(cy + ext[1], size),
                   cls, 1.0)
        lesions.append(Lesion(box, cx, cy, rx, ry, ang))

    sigma = rng.uniform(*cfg.noise_range)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    disc_cov = _ellipse_coverage(xx, yy, disc[0], disc[1], disc_r, disc_r, 0.0)
    img = np.clip(img * disc_cov[..., None], 0.0, 1.0)

    boxes = [
        BBox(l.box.x_min, l.box.y_min, l.box.x_max, l.box.y_max, l.box.class_label,
             float(rng.uniform(*cfg.confidence_range)))
        for l in lesions
    ]
    for _ in range(int(rng.poisson(cfg.false_positive_rate))):
        r = rng.uniform(*cfg.radius_range)
        rad = math.sqrt(rng.uniform(0, 1)) * (disc_r - r - 2)
        th = rng.uniform(0, 2 * math.pi)
        cx, cy = disc[0] + rad * math.cos(th), disc[1] + rad * math.sin(th)
        cls = cfg.lesion_classes[int(rng.integers(len(cfg.lesion_classes)))]
        conf = float(rng.uniform(*cfg.false_positive_conf))
        boxes.append(BBox(max(cx - r, 0.0), max(cy - r, 0.0), min(cx + r, size), min(cy + r, size), cls, conf))
    image_id = f"img{index:05d}"
    rec = DetectionRecord(image_id, f"{image_id}.png", size, size, tuple(boxes))
    return SynthSample(image_id, img, cfg.grade_for_count(n), lesions, rec, disc)


def generate(cfg: SynthConfig) -> list[SynthSample]:
    """Deterministic in ``cfg.seed``; sample ``i`` uses its own derived stream."""
    return [_render_one(cfg, i) for i in range(cfg.count)]


def lesion_fraction(sample: SynthSample) -> float:
    """Rendered lesion area over disc area."""
    r = sample.disc[2]
    return sum(math.pi * l.rx * l.ry for l in sample.lesions) / (math.pi * r * r)


def export(samples: Sequence[SynthSample], out_dir) -> dict[str, Path]:
    """PNG per sample, ``labels.csv`` (path, grade) and ``detections.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        try:
            write_image(out / f"{s.image_id}.png", s.image)
        except OSError as exc:
            raise OSError(f"cannot write {out / s.image_id}.png: {exc}") from exc
    labels = out / "labels.csv"
    with open(labels, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "grade"])
        for s in samples:
            w.writerow([f"{s.image_id}.png", s.grade])
    dets = out / "detections.jsonl"
    write_detections(dets, [s.detection for s in samples])
    return {"labels": labels, "detections": dets}


def read_labels(path) -> list[tuple[Path, int]]:
    """Labeled-dataset CSV; relative paths resolve against the CSV's folder."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = Path(row["path"])
            rows.append((p if p.is_absolute() else path.parent / p, int(row["grade"])))
    return rows


def load_labeled_images(path, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Read a labels CSV into ``(N, size, size, 3)`` float32 images and grades."""
    from .imageops import resize_bilinear

    rows = read_labels(path)
    imgs = np.stack([resize_bilinear(read_image(p), size, size).astype(np.float32) for p, _ in rows])
    return imgs, np.array([g for _, g in rows], dtype=np.int64)
