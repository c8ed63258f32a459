"""Pure image operations over grayscale score pages.

Images are 2-D uint8 numpy arrays (row-major, intensities in [0, 255]).
Every function returns a new array and never mutates its input, so all
operations here are safe to call from multiple threads; pages are the
intended unit of parallelism.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ImageError

logger = logging.getLogger(__name__)

# ITU-R 601 luma weights for RGB -> gray conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Intensity below which a pixel counts as ink throughout this module.
DARK_THRESHOLD = 128


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ImageError(
                f"degenerate bounding box ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def area(self) -> int:
        return self.width * self.height

    def intersection_area(self, other: "BoundingBox") -> int:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(0, w) * max(0, h)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]))


@dataclass(frozen=True)
class DogConfig:
    """Scale-space difference-of-Gaussians detector settings."""

    sigma_min: float = 10.0
    sigma_max: float = 50.0
    threshold: float = 0.1
    num_scales: int = 10
    invert: bool = True  # ink is dark on light paper

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ImageError(f"need 0 < sigma_min < sigma_max, got [{self.sigma_min}, {self.sigma_max}]")
        if self.threshold <= 0:
            raise ImageError(f"threshold must be positive, got {self.threshold}")
        if self.num_scales < 2:
            raise ImageError(f"num_scales must be >= 2, got {self.num_scales}")

    def sigmas(self) -> np.ndarray:
        return np.geomspace(self.sigma_min, self.sigma_max, self.num_scales)


@dataclass(frozen=True)
class Blob:
    """A detected ink region: center, characteristic scale, peak response."""

    cx: int
    cy: int
    sigma: float
    response: float

    @property
    def radius(self) -> float:
        return self.sigma * math.sqrt(2.0)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation recipe.

    Saturation jitter is listed in the recipe but is a no-op on grayscale
    input, so only brightness and contrast jitters are applied.
    """

    max_rotation_deg: float = 10.0
    flip_prob: float = 0.5
    jitter_factor: float = 0.25
    blur_kernel: int = 3
    blur_sigma: float = 1.5
    contrast_boost: float = 1.5
    target_size: tuple = (256, 256)
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("max_rotation_deg", "flip_prob", "jitter_factor", "blur_sigma", "contrast_boost"):
            if getattr(self, name) < 0:
                raise ImageError(f"{name} must be non-negative")
        if tuple(self.target_size) != (256, 256):
            raise ImageError(f"target_size is fixed at 256x256, got {self.target_size}")


def as_gray(image) -> np.ndarray:
    """Validate and return a 2-D uint8 image array (no copy when already valid)."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ImageError(f"expected a non-empty 2-D grayscale array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and (arr.min() < 0 or arr.max() > 255):
            raise ImageError("intensities outside [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def load_image(path) -> np.ndarray:
    """Load a PNG/TIFF image as grayscale uint8; RGB is converted by luma weights."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L",):
                return np.asarray(im, dtype=np.uint8)
            if im.mode in ("I", "I;16", "F"):
                arr = np.asarray(im, dtype=np.float64)
                hi = arr.max() if arr.size else 0
                scale = 255.0 / hi if hi > 255 else 1.0
                return np.clip(arr * scale, 0, 255).astype(np.uint8)
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
            gray = rgb @ np.array(LUMA_WEIGHTS)
            return np.floor(gray + 0.5).clip(0, 255).astype(np.uint8)
    except (OSError, ValueError) as e:
        raise ImageError(f"cannot read image {path}: {e}") from e


def save_image(image, path) -> None:
    Image.fromarray(as_gray(image), mode="L").save(path)


def _vertical_run_lengths(dark: np.ndarray) -> np.ndarray:
    """Lengths of all maximal vertical dark runs, over the whole image."""
    h, w = dark.shape
    sep = np.zeros((1, w), dtype=bool)
    flat = np.vstack([sep, dark, sep]).T.reshape(-1)
    delta = np.diff(flat.astype(np.int8))
    starts = np.flatnonzero(delta == 1)
    ends = np.flatnonzero(delta == -1)
    return ends - starts


def estimate_line_thickness(dark: np.ndarray) -> int:
    """Most common vertical dark-run length: staff lines dominate the histogram."""
    lengths = _vertical_run_lengths(dark)
    if lengths.size == 0:
        return 0
    counts = np.bincount(lengths)
    return int(np.argmax(counts))


def _group_row_runs(flags: np.ndarray) -> list:
    """Consecutive True row indices as (start, stop) half-open bands."""
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    stops = np.concatenate([idx[breaks] + 1, [idx[-1] + 1]])
    return list(zip(starts.tolist(), stops.tolist()))


def _band_background(img: np.ndarray, dark: np.ndarray, r0: int, r1: int, margin: int) -> int:
    lo = max(0, r0 - margin)
    hi = min(img.shape[0], r1 + margin)
    light = img[lo:hi][~dark[lo:hi]]
    if light.size == 0:
        return 255
    return int(np.median(light))


_VERTICAL_CONNECTIVITY = np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]], dtype=int)


def remove_staff_lines(page, est_line_thickness="auto") -> np.ndarray:
    """Suppress printed staff lines, leaving handwritten ink untouched.

    Line rows are rows whose dark-pixel density exceeds 50%. Within each band
    of line rows, vertical dark runs no taller than 1.5x the estimated line
    thickness are replaced with the local background intensity; taller runs
    (glyph strokes crossing the line) are kept, which is the glyph-continuity
    test.
    """
    img = as_gray(page)
    dark = img < DARK_THRESHOLD
    if not dark.any() or dark.all():
        logger.warning("remove_staff_lines: no staff lines found (uniform image)")
        return img.copy()

    if est_line_thickness == "auto":
        thickness = estimate_line_thickness(dark)
    else:
        thickness = int(est_line_thickness)
    if thickness <= 0:
        logger.warning("remove_staff_lines: no staff lines found (no measurable runs)")
        return img.copy()

    row_density = dark.mean(axis=1)
    bands = _group_row_runs(row_density > 0.5)
    if not bands:
        logger.warning("remove_staff_lines: no staff lines found (no dense rows)")
        return img.copy()

    h, w = img.shape
    spacings = [b[0] - a[0] for a, b in zip(bands, bands[1:])]
    spacing = int(np.median(spacings)) if spacings else 4 * thickness
    max_run = 1.5 * thickness
    window = int(math.ceil(max_run)) + 1

    out = img.copy()
    for r0, r1 in bands:
        lo = max(0, r0 - window)
        hi = min(h, r1 + window)
        win = dark[lo:hi]
        labels, n = ndimage.label(win, structure=_VERTICAL_CONNECTIVITY)
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())
        in_band = np.unique(labels[r0 - lo:r1 - lo])
        # Runs cut off by the window edge may be taller than measured: keep them.
        edge = set(np.unique(labels[0])) | set(np.unique(labels[-1])) if (lo > 0 or hi < h) else set()
        clear_ids = [
            k for k in in_band
            if k != 0 and sizes[k] <= max_run and not (k in edge and (lo > 0 or hi < h))
        ]
        if not clear_ids:
            continue
        fill = _band_background(img, dark, r0, r1, spacing)
        mask = np.isin(labels, clear_ids)
        out[lo:hi][mask] = fill
    return out


def detect_blobs(image, cfg: DogConfig = DogConfig()) -> list:
    """Scale-space DoG maxima above the response threshold, strongest first.

    The detector is deliberately greedy: false positives are acceptable, the
    tuning goal is to miss as little ink as possible.
    """
    img = as_gray(image)
    h, w = img.shape
    need = 2 * cfg.sigma_max
    if h < need or w < need:
        raise ImageError(
            f"image {w}x{h} too small for sigma_max={cfg.sigma_max} (needs >= {need:.0f} px per side)"
        )

    f = img.astype(np.float32) / 255.0
    if cfg.invert:
        f = 1.0 - f
    sigmas = cfg.sigmas()
    ratio = float(sigmas[1] / sigmas[0])
    smoothed = [ndimage.gaussian_filter(f, float(s), mode="nearest") for s in sigmas]
    # Normalizing each layer by (ratio - 1) makes the stack approximate the
    # scale-normalized Laplacian, so one threshold works across scales.
    dogs = np.stack(
        [(smoothed[i] - smoothed[i + 1]) / (ratio - 1.0) for i in range(len(sigmas) - 1)]
    )
    local_max = ndimage.maximum_filter(dogs, size=3, mode="constant", cval=-np.inf)
    peaks = np.argwhere((dogs >= local_max) & (dogs > cfg.threshold))

    blobs = [
        Blob(cx=int(x), cy=int(y), sigma=float(sigmas[s]), response=float(dogs[s, y, x]))
        for s, y, x in peaks
    ]
    blobs.sort(key=lambda b: (-b.response, b.cy, b.cx, b.sigma))
    return _suppress_overlaps(blobs)


def _suppress_overlaps(blobs: list) -> list:
    """Greedy non-max suppression: drop blobs whose center falls within the
    smaller radius of an already kept (stronger) blob."""
    kept = []
    for cand in blobs:
        ok = True
        for b in kept:
            d = math.hypot(cand.cx - b.cx, cand.cy - b.cy)
            if d < min(cand.radius, b.radius):
                ok = False
                break
        if ok:
            kept.append(cand)
    return kept


def blob_to_bbox(blob: Blob, image) -> BoundingBox:
    """Box of half-width ceil(sigma * sqrt(2)) around the center, clipped to the image."""
    img = as_gray(image)
    h, w = img.shape
    half = math.ceil(blob.sigma * math.sqrt(2.0))
    x0 = max(0, blob.cx - half)
    y0 = max(0, blob.cy - half)
    x1 = min(w, blob.cx + half)
    y1 = min(h, blob.cy + half)
    return BoundingBox(x0, y0, x1, y1)


def crop(image, box: BoundingBox) -> np.ndarray:
    img = as_gray(image)
    h, w = img.shape
    if box.x1 > w or box.y1 > h:
        raise ImageError(f"box {box.to_dict()} outside image {w}x{h}")
    return img[box.y0:box.y1, box.x0:box.x1].copy()


def rescale_intensity(image) -> np.ndarray:
    """Linear stretch of [min, max] onto [0, 255]; constant images map to all zeros."""
    img = as_gray(image)
    lo = int(img.min())
    hi = int(img.max())
    if lo == hi:
        return np.zeros_like(img)
    scaled = (img.astype(np.float64) - lo) * 255.0 / (hi - lo)
    return np.floor(scaled + 0.5).astype(np.uint8)  # round half up


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(image: np.ndarray, kernel: int = 3, sigma: float = 1.5) -> np.ndarray:
    """Separable Gaussian blur with an explicit (truncated, renormalized) kernel."""
    k = _gaussian_kernel1d(kernel, sigma)
    arr = np.asarray(image, dtype=np.float64)
    arr = ndimage.correlate1d(arr, k, axis=0, mode="nearest")
    arr = ndimage.correlate1d(arr, k, axis=1, mode="nearest")
    return arr


def _border_median(img: np.ndarray) -> float:
    border = np.concatenate([img[0, :], img[-1, :], img[1:-1, 0], img[1:-1, -1]]) \
        if img.shape[0] > 1 and img.shape[1] > 1 else img.ravel()
    return float(np.median(border))


def augment(image, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the full augmentation recipe; output is always 256x256 uint8.

    Random draws happen in a fixed order (rotation angle, flip coin,
    brightness factor, contrast factor), so the result is a pure function of
    (image, cfg, rng state).
    """
    img = as_gray(image).astype(np.float64)

    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    fill = _border_median(img)
    img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=fill)

    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]

    brightness = rng.uniform(1.0 - cfg.jitter_factor, 1.0 + cfg.jitter_factor)
    img = np.clip(img * brightness, 0.0, 255.0)
    contrast = rng.uniform(1.0 - cfg.jitter_factor, 1.0 + cfg.jitter_factor)
    mean = img.mean()
    img = np.clip(mean + (img - mean) * contrast, 0.0, 255.0)

    img = gaussian_blur(img, cfg.blur_kernel, cfg.blur_sigma)

    mean = img.mean()
    img = np.clip(mean + (img - mean) * cfg.contrast_boost, 0.0, 255.0)

    out_h, out_w = cfg.target_size
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    pil = pil.resize((out_w, out_h), Image.BILINEAR)
    resized = np.asarray(pil, dtype=np.float64)
    return np.floor(np.clip(resized, 0.0, 255.0) + 0.5).clip(0, 255).astype(np.uint8)


def resize(image, size: tuple) -> np.ndarray:
    """Plain bilinear resize to (height, width), used at inference time."""
    img = as_gray(image)
    out_h, out_w = size
    pil = Image.fromarray(img, mode="L").resize((out_w, out_h), Image.BILINEAR)
    return np.asarray(pil, dtype=np.uint8)
