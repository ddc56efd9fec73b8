"""Lesion boxes from detector output turned into fixed 128x128 patch windows.

Pipeline per record: drop boxes below a confidence threshold, rescale the
boxes into the 512x512 frame, then centre a 128x128 window on each lesion
and shift it at random while it still covers the lesion.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imageops import PATCH_SIDE, derive_rng

FRAME = 512
QUANT = 256


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_label: str = "lesion"
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.coords}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def to_json(self) -> dict:
        return {
            "x1": self.x_min,
            "y1": self.y_min,
            "x2": self.x_max,
            "y2": self.y_max,
            "class": self.class_label,
            "conf": self.confidence,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BBox":
        return cls(
            float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]),
            str(d.get("class", "lesion")), float(d.get("conf", 1.0)),
        )


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    image_path: str
    width: int
    height: int
    boxes: tuple[BBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise ValueError(f"{self.image_id}: box {b.coords} outside {self.width}x{self.height}")

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "path": self.image_path,
            "width": self.width,
            "height": self.height,
            "boxes": [b.to_json() for b in self.boxes],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectionRecord":
        return cls(
            str(d["image_id"]), str(d["path"]), int(d["width"]), int(d["height"]),
            tuple(BBox.from_json(b) for b in d.get("boxes", [])),
        )


@dataclass(frozen=True)
class PatchSpec:
    image_id: str
    window: BBox
    lesion: BBox
    image_path: str = ""

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "path": self.image_path,
            "window": list(self.window.coords),
            "lesion": self.lesion.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PatchSpec":
        x1, y1, x2, y2 = d["window"]
        return cls(str(d["image_id"]), BBox(x1, y1, x2, y2), BBox.from_json(d["lesion"]), str(d.get("path", "")))


@dataclass(frozen=True)
class FilterStats:
    threshold: float
    num_images: int
    num_lesions: int

    def row(self) -> str:
        return f"{self.threshold:>9.2f} {self.num_images:>9d} {self.num_lesions:>9d}"


# -- IO --------------------------------------------------------------------


def read_detections(path) -> list[DetectionRecord]:
    path = Path(path)
    recs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                recs.append(DetectionRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
    return recs


def write_detections(path, recs: Iterable[DetectionRecord]) -> None:
    with open(path, "w") as fh:
        for r in recs:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_manifest(path) -> list[PatchSpec]:
    with open(path) as fh:
        return [PatchSpec.from_json(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, specs: Iterable[PatchSpec]) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_json()) + "\n")


# -- geometry --------------------------------------------------------------


def filter_by_confidence(
    recs: Sequence[DetectionRecord], threshold: float, classes: Iterable[str] | None = None
) -> tuple[list[DetectionRecord], FilterStats]:
    """Keep boxes with ``confidence >= threshold`` (optionally of given classes)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    allowed = None if classes is None else set(classes)
    kept = []
    for r in recs:
        boxes = tuple(
            b for b in r.boxes if b.confidence >= threshold and (allowed is None or b.class_label in allowed)
        )
        if boxes:
            kept.append(replace(r, boxes=boxes))
    stats = FilterStats(threshold, len(kept), sum(len(r.boxes) for r in kept))
    return kept, stats


def rescale_boxes(rec: DetectionRecord, target: int = FRAME) -> DetectionRecord:
    if rec.width <= 0 or rec.height <= 0:
        raise ValueError(f"{rec.image_id}: non-positive original extent")
    sx, sy = target / rec.width, target / rec.height
    boxes = tuple(
        replace(b, x_min=b.x_min * sx, y_min=b.y_min * sy, x_max=b.x_max * sx, y_max=b.y_max * sy)
        for b in rec.boxes
    )
    return replace(rec, width=target, height=target, boxes=boxes)


def shift_range(lo: float, hi: float, side: float = PATCH_SIDE) -> tuple[float, float]:
    """Feasible window starts covering the interval ``[lo, hi]``.

    If the interval is longer than ``side`` the range collapses onto the
    window centred on the interval midpoint.
    """
    if hi - lo <= side:
        return hi - side, lo
    start = (lo + hi) / 2.0 - side / 2.0
    return start, start


def expand_and_shift(box: BBox, rng: np.random.Generator | None, image_id: str = "", frame: int = FRAME, image_path: str = "") -> PatchSpec:
    """128x128 window around ``box``; with ``rng=None`` the window is centred."""
    starts = []
    for lo, hi in ((box.x_min, box.x_max), (box.y_min, box.y_max)):
        a, b = shift_range(lo, hi)
        # starts live on a 1/256 px grid so that start + 128 is exact
        qa, qb = math.ceil(a * QUANT) / QUANT, math.floor(b * QUANT) / QUANT
        if qb < qa:
            qa = qb = round((a + b) / 2.0 * QUANT) / QUANT
        if rng is None or qb == qa:
            s = round(((lo + hi) / 2.0 - PATCH_SIDE / 2.0) * QUANT) / QUANT
            s = min(max(s, qa), qb)
        else:
            s = math.floor(rng.uniform(qa, qb) * QUANT) / QUANT
        starts.append(min(max(s, 0.0), float(frame - PATCH_SIDE)))
    x0, y0 = starts
    window = BBox(x0, y0, x0 + PATCH_SIDE, y0 + PATCH_SIDE, "window", 1.0)
    return PatchSpec(image_id, window, box, image_path)


def build_patch_dataset(
    recs: Sequence[DetectionRecord],
    threshold: float,
    seed: int,
    classes: Iterable[str] | None = None,
    check_files: bool = True,
    root: str | Path | None = None,
) -> list[PatchSpec]:
    """filter -> rescale -> expand_and_shift, ordered by (image_id, box index).

    Each record gets its own generator derived from ``seed`` and a hash of its
    image id, so the result depends neither on input order nor on which other
    records survive the filter.
    """
    kept, _ = filter_by_confidence(recs, threshold, classes)
    kept.sort(key=lambda r: r.image_id)
    specs = []
    for idx, rec in enumerate(kept):
        path = Path(rec.image_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        if check_files and not path.exists():
            raise FileNotFoundError(f"image for {rec.image_id} not found: {path}")
        rng = derive_rng(seed, _stable_key(rec.image_id))
        scaled = rescale_boxes(rec)
        for box in scaled.boxes:
            specs.append(expand_and_shift(box, rng, rec.image_id, image_path=str(path)))
    return specs


def _stable_key(text: str) -> int:
    # platform-independent (unlike hash())
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def window_covers(spec: PatchSpec) -> bool:
    """Coverage rule: whole lesion when it fits in 128x128, else its centre."""
    w, l = spec.window, spec.lesion
    eps = 1e-9
    if l.width <= PATCH_SIDE and l.height <= PATCH_SIDE:
        return (
            w.x_min <= l.x_min + eps and w.y_min <= l.y_min + eps
            and w.x_max >= l.x_max - eps and w.y_max >= l.y_max - eps
        )
    cx, cy = l.center
    return w.x_min - eps <= cx <= w.x_max + eps and w.y_min - eps <= cy <= w.y_max + eps
