"""Float RGB images, bilinear resampling and the four view augmentations.

Images are ``(H, W, 3)`` float arrays with values in [0, 1].  All random
operators take an explicit :class:`numpy.random.Generator`; nothing here
touches global random state.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
PATCH_SIDE = 128


@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    rotation: bool = True
    color_distortion: bool = True
    gray_scaling: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.2)
    gray_prob: float = 0.2
    brightness: tuple[float, float] = (-0.4, 0.4)
    contrast: tuple[float, float] = (-0.4, 0.4)
    saturation: tuple[float, float] = (-0.4, 0.4)
    hue: tuple[float, float] = (-0.1, 0.1)
    # network input side; 128 matches the patch window
    view_size: int = PATCH_SIDE

    def __post_init__(self):
        for name in ("crop_scale", "brightness", "contrast", "saturation", "hue"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: range ({lo}, {hi}) is not ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.gray_prob <= 1.0:
            raise ValueError(f"gray_prob must lie in [0, 1], got {self.gray_prob}")
        if self.crop_scale[0] <= 0:
            raise ValueError("crop_scale must be positive")
        if self.view_size < 1:
            raise ValueError("view_size must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def with_ops(self, ops: set[str] | frozenset[str]) -> "AugmentConfig":
        """Copy with exactly the named operators enabled."""
        names = ("crop", "rotation", "color_distortion", "gray_scaling")
        bad = set(ops) - set(names)
        if bad:
            raise ValueError(f"unknown operators {sorted(bad)}")
        d = asdict(self)
        for n in names:
            d[n] = n in ops
        return AugmentConfig(**d)


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


# -- conversion / IO -------------------------------------------------------


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG or binary PPM (P6) into a float image."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P6":
        return to_float(_read_ppm(path))
    from PIL import Image

    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB")))


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    data = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        h, w, _ = data.shape
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(data.tobytes())
        return
    from PIL import Image

    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return body.reshape(h, w, 3)


# -- resampling ------------------------------------------------------------


def _gather_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Sample ``img`` at real pixel coordinates (pixel centres at integers).

    ``fill=None`` clamps to the border; otherwise neighbours outside the
    raster contribute ``fill``.  8-bit sources are rescaled to [0, 1].
    """
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y1, x1 = y0 + 1, x0 + 1
    if fill is None:
        cy0, cy1 = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
        cx0, cx1 = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
        a, b = img[cy0, cx0], img[cy0, cx1]
        c, d = img[cy1, cx0], img[cy1, cx1]
    else:
        padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), constant_values=fill)
        cy0, cy1 = np.clip(y0, -1, h) + 1, np.clip(y1, -1, h) + 1
        cx0, cx1 = np.clip(x0, -1, w) + 1, np.clip(x1, -1, w) + 1
        a, b = padded[cy0, cx0], padded[cy0, cx1]
        c, d = padded[cy1, cx0], padded[cy1, cx1]
    if img.dtype == np.uint8:
        a, b, c, d = (v.astype(np.float64) / 255.0 for v in (a, b, c, d))
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    return top + (bot - top) * fy


def sample_window(img: np.ndarray, x0: float, y0: float, side_w: float, side_h: float, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample the window ``[x0, x0+side_w) x [y0, y0+side_h)``.

    Half-pixel-centre alignment: with integer ``x0, y0`` and sides equal to
    the output extents this is an exact pixel copy.
    """
    xs = x0 + (np.arange(out_w) + 0.5) * (side_w / out_w) - 0.5
    ys = y0 + (np.arange(out_h) + 0.5) * (side_h / out_h) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _gather_bilinear(img, yy, xx, fill=None)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    return sample_window(img, 0.0, 0.0, w, h, out_h, out_w)


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate by ``angle_deg`` about the image centre; uncovered pixels are 0."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    src_x = c * xx - s * yy + cx
    src_y = s * xx + c * yy + cy
    return _gather_bilinear(img, src_y, src_x, fill=0.0)


# -- colour ----------------------------------------------------------------


def gray(img: np.ndarray) -> np.ndarray:
    """Luma plane ``(H, W)``."""
    return img @ LUMA


def grayscale(img: np.ndarray) -> np.ndarray:
    lum = np.clip(gray(img), 0.0, 1.0)
    return np.repeat(lum[..., None], 3, axis=-1)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], -1),
        np.stack([q, v, p], -1),
        np.stack([p, v, t], -1),
        np.stack([p, q, v], -1),
        np.stack([t, p, v], -1),
        np.stack([v, p, q], -1),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, ch in enumerate(choices):
        out = np.where((i == k)[..., None], ch, out)
    return out


def adjust_brightness(img, b):
    return np.clip(img * (1.0 + b), 0.0, 1.0)


def adjust_contrast(img, c):
    m = gray(img).mean()
    return np.clip(m + (img - m) * (1.0 + c), 0.0, 1.0)


def adjust_saturation(img, s):
    lum = gray(img)[..., None]
    return np.clip(lum + (img - lum) * (1.0 + s), 0.0, 1.0)


def adjust_hue(img, h):
    """Rotate hue by ``h`` of a full turn (h=1/3 is 120 degrees)."""
    if h == 0:
        return img.copy()
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + h) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_distort_with(img: np.ndarray, b: float, c: float, s: float, h: float) -> np.ndarray:
    """Brightness, contrast, saturation then hue, with explicit factors."""
    out = adjust_brightness(img, b)
    out = adjust_contrast(out, c)
    out = adjust_saturation(out, s)
    return adjust_hue(out, h)


def color_distort(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    s = rng.uniform(*cfg.saturation)
    h = rng.uniform(*cfg.hue)
    return color_distort_with(img, b, c, s, h)


# -- geometry --------------------------------------------------------------


def crop_window(
    img_h: int,
    img_w: int,
    window: tuple[float, float, float, float],
    anchor: tuple[float, float],
    scale: float,
    rng: np.random.Generator | None,
):
    """Choose a square crop of side ``round(side * scale)`` around ``window``.

    The crop is placed uniformly among positions that contain ``anchor``
    and stay inside the image.  With ``rng=None`` no shift is applied (the
    crop is centred on the window, then clamped).  Sides larger than the
    image are clamped to the image extent.  Returns ``(x0, y0, side_w, side_h)``.
    """
    x1, y1, x2, y2 = window
    ax, ay = anchor
    side = max(1, int(round((x2 - x1) * scale)))
    side_w = min(side, img_w)
    side_h = min(side, img_h)
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0

    def place(center, a, length, extent):
        lo = max(a - length, 0.0)
        hi = min(a, extent - length)
        if rng is None:
            return min(max(center - length / 2.0, lo), hi)
        return rng.uniform(lo, hi) if hi > lo else lo

    x0 = place(cx, ax, side_w, img_w)
    y0 = place(cy, ay, side_h, img_h)
    return x0, y0, side_w, side_h


def crop_resize(
    src: np.ndarray,
    window: tuple[float, float, float, float],
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
    anchor: tuple[float, float] | None = None,
    scale: float | None = None,
) -> np.ndarray:
    """Random zoom crop around a patch window, resized to ``cfg.view_size``.

    ``anchor`` (default: window centre) is the point every crop must
    contain, normally the lesion-box centre.  ``scale`` overrides the draw
    from ``cfg.crop_scale``; with ``scale=1`` and ``rng=None`` the result is
    the plain window.
    """
    cfg = cfg or AugmentConfig()
    if anchor is None:
        anchor = ((window[0] + window[2]) / 2.0, (window[1] + window[3]) / 2.0)
    if scale is None:
        scale = rng.uniform(*cfg.crop_scale)
    h, w = src.shape[:2]
    x0, y0, sw, sh = crop_window(h, w, window, anchor, scale, rng)
    out = sample_window(src, x0, y0, sw, sh, cfg.view_size, cfg.view_size)
    return np.clip(out, 0.0, 1.0)


def extract_window(src: np.ndarray, window, out_size: int = PATCH_SIDE) -> np.ndarray:
    x1, y1, x2, y2 = window
    return sample_window(src, x1, y1, x2 - x1, y2 - y1, out_size, out_size)


def make_view(
    src: np.ndarray,
    window,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    anchor: tuple[float, float] | None = None,
) -> np.ndarray:
    """One random view: crop -> rotation -> colour distortion -> gray scaling."""
    if cfg.crop:
        view = crop_resize(src, window, rng, cfg, anchor=anchor)
    else:
        view = extract_window(src, window, cfg.view_size)
    if cfg.rotation:
        view = rotate(view, rng.uniform(0.0, 360.0))
    if cfg.color_distortion:
        view = color_distort(view, rng, cfg)
    if cfg.gray_scaling and rng.random() < cfg.gray_prob:
        view = grayscale(view)
    return np.clip(view, 0.0, 1.0)
