"""Pixel-level quantification of filter strength and representative selection.

A filter's strength is the fraction of pixels it manipulates: filtered
images are subtracted from their originals, the per-filter mean difference
image is binarized with Otsu's method, and the foreground fraction lands
the filter in one of five 20%-wide bins.  Selection then takes an equal
number of filters from every bin, the quota being the size of the smallest
bin that holds at least two filters.

Otsu's threshold is computed in exact integer arithmetic (the between-class
variance of a 256-bin histogram is a ratio of integers), so the result is
bit-reproducible and identical to exhaustive search on every input.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    NoEligibleBin,
    OutOfRange,
    ValidationError,
)

N_BINS = 5
BIN_WIDTH = 0.2
DEFAULT_ANALYSIS_SIZE = 256

# Binarization modes: one Otsu pass on the per-filter mean difference image
# (default), or one pass per image pair with the ratios averaged.
MODE_MEAN = "mean"
MODE_PER_PAIR = "per_pair"


# ---------------------------------------------------------------------------
# Image containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrayImage:
    """8-bit single-channel image, row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.dtype != np.uint8:
            raise ValidationError(f"GrayImage needs a 2-D uint8 array, got {arr.shape} {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class RgbImage:
    """8-bit three-channel image, row-major (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValidationError(f"RgbImage needs an (h, w, 3) uint8 array, got {arr.shape} {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def load_image(path: str | Path) -> RgbImage:
    """Read a PNG or BMP file as RGB."""
    from PIL import Image

    with Image.open(path) as im:
        return RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a boolean foreground mask as a black/white PNG."""
    from PIL import Image

    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def resize_nearest(img: RgbImage, width: int, height: int) -> RgbImage:
    """Nearest-neighbor resize; source index = floor(dst * src_size / dst_size)."""
    if (img.width, img.height) == (width, height):
        return img
    rows = (np.arange(height) * img.height) // height
    cols = (np.arange(width) * img.width) // width
    return RgbImage(img.pixels[rows][:, cols])


# ---------------------------------------------------------------------------
# Differencing
# ---------------------------------------------------------------------------

def to_grayscale(img: RgbImage) -> GrayImage:
    """Channel mean per pixel: round((R+G+B)/3)."""
    s = img.pixels.astype(np.int32).sum(axis=2)
    # (2s+3)//6 == round(s/3); s/3 never lands exactly on .5 so no tie ambiguity
    return GrayImage(((2 * s + 3) // 6).astype(np.uint8))


def abs_diff(original: RgbImage, filtered: RgbImage) -> GrayImage:
    """Per-pixel mean over channels of the absolute difference, rounded."""
    if original.pixels.shape != filtered.pixels.shape:
        raise DimensionMismatch(
            f"image shapes differ: {original.pixels.shape} vs {filtered.pixels.shape}"
        )
    d = np.abs(original.pixels.astype(np.int32) - filtered.pixels.astype(np.int32)).sum(axis=2)
    return GrayImage(((2 * d + 3) // 6).astype(np.uint8))


def mean_diff(diffs: Sequence[GrayImage]) -> GrayImage:
    """Per-pixel arithmetic mean across difference images, rounded half-up."""
    if not diffs:
        raise EmptyInput("mean_diff needs at least one difference image")
    shape = diffs[0].pixels.shape
    for d in diffs[1:]:
        if d.pixels.shape != shape:
            raise DimensionMismatch(f"diff shapes differ: {shape} vs {d.pixels.shape}")
    total = np.zeros(shape, dtype=np.int64)
    for d in diffs:
        total += d.pixels
    k = len(diffs)
    return GrayImage(((2 * total + k) // (2 * k)).astype(np.uint8))


# ---------------------------------------------------------------------------
# Otsu binarization
# ---------------------------------------------------------------------------

def otsu_threshold_from_histogram(hist: Sequence[int]) -> int:
    """Threshold maximizing between-class variance over a 256-bin histogram.

    Background is intensity <= t, foreground intensity > t.  The variance
    w0*w1*(mu0-mu1)^2 equals (s0*n1 - s1*n0)^2 / (n^2 * n0 * n1) with integer
    pixel counts n0, n1 and intensity sums s0, s1, so candidates compare
    exactly by cross-multiplication.  Ties break toward the smallest t; a
    constant image returns its single intensity value.
    """
    h = [int(v) for v in hist]
    if len(h) != 256:
        raise ValidationError(f"histogram must have 256 bins, got {len(h)}")
    if any(v < 0 for v in h):
        raise ValidationError("histogram counts must be non-negative")
    n = sum(h)
    if n == 0:
        raise EmptyInput("empty histogram")

    nonzero = [i for i, v in enumerate(h) if v]
    if len(nonzero) == 1:
        return nonzero[0]  # degenerate: constant image

    s_total = sum(i * v for i, v in enumerate(h))
    best_t = 0
    best_num = -1  # best (s0*n1 - s1*n0)^2
    best_den = 1   # paired n0*n1
    n0 = 0
    s0 = 0
    for t in range(256):
        n0 += h[t]
        s0 += t * h[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_total - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        # exact fraction comparison: num/den > best_num/best_den
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def otsu_threshold(img: GrayImage) -> int:
    """Otsu threshold of a grayscale image (see otsu_threshold_from_histogram)."""
    hist = np.bincount(img.pixels.ravel(), minlength=256)
    return otsu_threshold_from_histogram(hist.tolist())


def manipulated_ratio(img: GrayImage, threshold: int) -> float:
    """Fraction of pixels strictly above the threshold."""
    return float(np.count_nonzero(img.pixels > threshold)) / img.pixels.size


def filter_strength_ratio(img: GrayImage, threshold: int) -> float:
    """Manipulated-pixel ratio with the degenerate cases interpreted.

    A constant difference image has no Otsu split: zero difference means an
    identity filter (ratio 0), while a uniform nonzero difference means the
    filter changed every pixel equally (ratio 1).  Non-constant images fall
    through to the plain count.
    """
    lo = int(img.pixels.min())
    if lo == int(img.pixels.max()):
        return 0.0 if lo == 0 else 1.0
    return manipulated_ratio(img, threshold)


def binarize(img: GrayImage, threshold: int) -> np.ndarray:
    """Boolean foreground mask (pixels strictly above the threshold)."""
    return img.pixels > threshold


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------

_BIN_UPPER = (0.2, 0.4, 0.6, 0.8)  # literals, not k*0.2: 3*0.2 > 0.6 in floats


def assign_bin(ratio: float) -> int:
    """Bin 1..5 for a manipulated-pixel ratio.

    Boundaries are lower-inclusive: [0,0.2) [0.2,0.4) [0.4,0.6) [0.6,0.8)
    [0.8,1.0]; ratio 1.0 lands in bin 5.
    """
    if not (0.0 <= ratio <= 1.0):
        raise OutOfRange(f"ratio must be in [0,1], got {ratio}")
    for k, upper in enumerate(_BIN_UPPER, start=1):
        if ratio < upper:
            return k
    return N_BINS


def bin_bounds(bin_id: int) -> tuple[float, float]:
    if not 1 <= bin_id <= N_BINS:
        raise OutOfRange(f"bin must be 1..{N_BINS}, got {bin_id}")
    return ((bin_id - 1) * BIN_WIDTH, bin_id * BIN_WIDTH if bin_id < N_BINS else 1.0)


# ---------------------------------------------------------------------------
# Per-filter analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffStats:
    """Result of quantifying one filter's pixel manipulation."""

    filter_id: str
    mean_diff: GrayImage
    otsu_threshold: int
    manipulated_ratio: float
    bin: int
    mode: str = MODE_MEAN

    def __post_init__(self) -> None:
        if self.mode not in (MODE_MEAN, MODE_PER_PAIR):
            raise ValidationError(f"unknown analysis mode {self.mode!r}")
        if not (0.0 <= self.manipulated_ratio <= 1.0):
            raise OutOfRange(f"ratio out of range: {self.manipulated_ratio}")
        if assign_bin(self.manipulated_ratio) != self.bin:
            raise ValidationError(
                f"bin {self.bin} inconsistent with ratio {self.manipulated_ratio}"
            )
        if self.mode == MODE_MEAN:
            expect = filter_strength_ratio(self.mean_diff, self.otsu_threshold)
            if expect != self.manipulated_ratio:
                raise ValidationError(
                    f"ratio {self.manipulated_ratio} != recount {expect} on mean_diff"
                )

    def to_json_dict(self) -> dict:
        return {
            "filter_id": self.filter_id,
            "otsu_threshold": self.otsu_threshold,
            "manipulated_ratio": self.manipulated_ratio,
            "bin": self.bin,
            "mode": self.mode,
        }


def analyze_filter(
    pairs: Sequence[tuple[RgbImage, RgbImage]],
    filter_id: str,
    mode: str = MODE_MEAN,
    analysis_size: int = DEFAULT_ANALYSIS_SIZE,
) -> DiffStats:
    """Quantify one filter from (original, filtered) image pairs.

    Images are resized to ``analysis_size`` square (nearest neighbor) unless
    every input already shares one common shape.  In ``mean`` mode the mean
    difference image is binarized once; in ``per_pair`` mode each difference
    image is binarized with its own threshold and the ratios are averaged
    (the reported threshold is still the mean image's, for the mask artifact).
    """
    if not pairs:
        raise EmptyInput(f"filter {filter_id!r}: no image pairs")
    if mode not in (MODE_MEAN, MODE_PER_PAIR):
        raise ValidationError(f"unknown analysis mode {mode!r}")

    shapes = {img.pixels.shape for o, f in pairs for img in (o, f)}
    if len(shapes) > 1:
        pairs = [
            (
                resize_nearest(o, analysis_size, analysis_size),
                resize_nearest(f, analysis_size, analysis_size),
            )
            for o, f in pairs
        ]

    diffs = [abs_diff(o, f) for o, f in pairs]
    mean_img = mean_diff(diffs)
    t_mean = otsu_threshold(mean_img)

    if mode == MODE_MEAN:
        ratio = filter_strength_ratio(mean_img, t_mean)
    else:
        ratios = [filter_strength_ratio(d, otsu_threshold(d)) for d in diffs]
        ratio = sum(ratios) / len(ratios)

    return DiffStats(
        filter_id=filter_id,
        mean_diff=mean_img,
        otsu_threshold=t_mean,
        manipulated_ratio=ratio,
        bin=assign_bin(ratio),
        mode=mode,
    )


# ---------------------------------------------------------------------------
# Quota-based selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionResult:
    """Chosen filter ids per bin under the equal-quota rule."""

    per_bin: dict[int, tuple[str, ...]]
    quota: int
    excluded_bins: tuple[int, ...]
    rng_seed: int

    @property
    def selected(self) -> tuple[str, ...]:
        out: list[str] = []
        for b in range(1, N_BINS + 1):
            out.extend(self.per_bin.get(b, ()))
        return tuple(out)

    def counts(self) -> dict[int, int]:
        return {b: len(self.per_bin.get(b, ())) for b in range(1, N_BINS + 1)}

    def to_json_dict(self) -> dict:
        return {
            "quota": self.quota,
            "excluded_bins": list(self.excluded_bins),
            "rng_seed": self.rng_seed,
            "per_bin": {str(b): list(ids) for b, ids in sorted(self.per_bin.items())},
        }


def select_filters(stats: Iterable[DiffStats], rng_seed: int) -> SelectionResult:
    """Equal-per-bin selection.

    Bins holding at most one filter are excluded; the quota is the size of
    the smallest remaining bin; that many filters are drawn uniformly at
    random, without replacement, from every remaining bin.
    """
    by_bin: dict[int, list[str]] = {b: [] for b in range(1, N_BINS + 1)}
    seen: set[str] = set()
    for s in stats:
        if s.filter_id in seen:
            raise ValidationError(f"duplicate filter_id {s.filter_id!r} in stats")
        seen.add(s.filter_id)
        by_bin[s.bin].append(s.filter_id)

    eligible = {b: ids for b, ids in by_bin.items() if len(ids) >= 2}
    if not eligible:
        raise NoEligibleBin("every bin holds at most one filter")
    excluded = tuple(b for b, ids in by_bin.items() if len(ids) == 1)
    quota = min(len(ids) for ids in eligible.values())

    rng = random.Random(rng_seed)
    per_bin: dict[int, tuple[str, ...]] = {}
    for b in range(1, N_BINS + 1):
        ids = eligible.get(b)
        if ids is None:
            continue
        per_bin[b] = tuple(sorted(rng.sample(sorted(ids), quota)))
    return SelectionResult(per_bin=per_bin, quota=quota, excluded_bins=excluded, rng_seed=rng_seed)


# ---------------------------------------------------------------------------
# JSON output
# ---------------------------------------------------------------------------

def write_stats_json(
    stats: Sequence[DiffStats],
    path: str | Path,
    selection: SelectionResult | None = None,
) -> None:
    doc: dict = {"filters": [s.to_json_dict() for s in sorted(stats, key=lambda s: s.filter_id)]}
    if selection is not None:
        doc["selection"] = selection.to_json_dict()
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_stats_json(path: str | Path) -> tuple[list[dict], dict | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc["filters"], doc.get("selection")
