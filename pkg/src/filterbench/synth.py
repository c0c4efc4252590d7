"""Synthetic identities, embeddings, images, and parametric filters.

The generator stands in for real face data when exercising the pipeline:
each subject gets a centroid drawn uniformly on the unit sphere and each
image perturbs it with tangent-space Gaussian noise of angular scale
``intra_subject_noise`` before renormalizing.  Generation is seeded per
subject, so output is bit-identical for any worker count.

Synthetic filters come with known ground truth: an embedding-space affine
blend x -> (1-s) x + s (A x + b) with seeded orthogonal A, additive
Gaussian noise, a color shift, and an occlusion block that covers an exact
pixel count.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data_model import DatasetManifest, EmbeddingStore, ImageRecord, Variant, make_key
from .errors import OutOfRange, ValidationError
from .pixel_analysis import RgbImage

FILTER_KINDS = ("identity", "affine", "noise", "color_shift", "occlusion")


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_subjects: int
    images_per_subject: int = 3
    dim: int = 512
    intra_subject_noise: float = 0.1   # angular sigma within a subject
    inter_subject_separation: float = 1.0  # declared spread; sanity check only
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 1 or self.images_per_subject < 1 or self.dim < 2:
            raise ValidationError("n_subjects, images_per_subject >= 1 and dim >= 2 required")
        if self.intra_subject_noise < 0:
            raise ValidationError("intra_subject_noise must be >= 0")
        if self.intra_subject_noise >= self.inter_subject_separation:
            warnings.warn(
                "intra-subject noise >= inter-subject separation: "
                "genuine/impostor separation is not guaranteed",
                stacklevel=2,
            )


def _subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(subject_index,))
    return np.random.Generator(np.random.PCG64(ss))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_embeddings(spec: SyntheticDatasetSpec) -> tuple[DatasetManifest, EmbeddingStore]:
    """Generate a manifest plus unit-norm original embeddings.

    Subject ids run s00000..; genders alternate M/F so even subject counts
    come out balanced.  With zero intra-subject noise all images of a
    subject share one vector.
    """
    records = []
    store = EmbeddingStore(dim=spec.dim)
    for i in range(spec.n_subjects):
        sid = f"s{i:05d}"
        gender = "M" if i % 2 == 0 else "F"
        rng = _subject_rng(spec.seed, i)
        centroid = _unit(rng.standard_normal(spec.dim))
        for j in range(spec.images_per_subject):
            image_id = f"{sid}_{j + 1:02d}"
            records.append(
                ImageRecord(image_id=image_id, subject_id=sid, session=j + 1, gender=gender)
            )
            if spec.intra_subject_noise == 0.0:
                vec = centroid
            else:
                g = rng.standard_normal(spec.dim)
                tangent = g - np.dot(g, centroid) * centroid
                # tangent norm is ~sqrt(dim); rescale so sigma_w reads as the
                # expected angular deviation in radians
                vec = _unit(centroid + spec.intra_subject_noise * tangent / np.sqrt(spec.dim))
            store.add(image_id, Variant.original(), vec.astype(np.float32))
    manifest = DatasetManifest(records, images_per_subject=spec.images_per_subject)
    return manifest, store


# ---------------------------------------------------------------------------
# Synthetic filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticFilterSpec:
    """A parametric filter with known ground truth.

    kind:
      identity     no-op
      affine       embedding blend x -> (1-s) x + s (A x + b), seeded A, b
      noise        embedding x -> x + sigma * g, g seeded per key
      color_shift  image channels shifted by delta_rgb, clamped
      occlusion    image block of exactly round(fraction * pixels) pixels
                   painted with a contrasting value
    """

    kind: str
    strength: float = 0.0       # affine blend weight s
    sigma: float = 0.0          # noise scale
    delta_rgb: tuple[int, int, int] = (0, 0, 0)
    fraction: float = 0.0       # occlusion pixel fraction
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in FILTER_KINDS:
            raise ValidationError(f"unknown filter kind {self.kind!r}")
        if self.kind == "affine" and self.strength < 0:
            raise OutOfRange(f"affine strength must be >= 0, got {self.strength}")
        if self.kind == "occlusion" and not (0.0 <= self.fraction <= 1.0):
            raise OutOfRange(f"occlusion fraction must be in [0,1], got {self.fraction}")
        if self.kind == "noise" and self.sigma < 0:
            raise OutOfRange(f"noise sigma must be >= 0, got {self.sigma}")


def affine_params(spec: SyntheticFilterSpec, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """The seeded (A, b) of an affine filter: A orthogonal, b unit-norm."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=spec.seed)))
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    a = q * np.sign(np.diag(r))  # fix signs so the factorization is unique
    b = _unit(rng.standard_normal(dim))
    return a, b


def _key_rng(spec_seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    ss = np.random.SeedSequence(entropy=spec_seed, spawn_key=(int.from_bytes(digest[:8], "little"),))
    return np.random.Generator(np.random.PCG64(ss))


def apply_filter_to_embedding(
    vec: np.ndarray, spec: SyntheticFilterSpec, key: str = "", params=None
) -> np.ndarray:
    """Filter one embedding; for the noise kind the key seeds the draw."""
    x = np.asarray(vec, dtype=np.float64)
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "affine":
        if params is None:
            params = affine_params(spec, len(x))
        a, b = params
        s = spec.strength
        return (1.0 - s) * x + s * (a @ x + b)
    if spec.kind == "noise":
        g = _key_rng(spec.seed, key).standard_normal(len(x))
        return x + spec.sigma * g
    raise ValidationError(f"filter kind {spec.kind!r} does not apply to embeddings")


def apply_filter_to_store(
    store: EmbeddingStore,
    spec: SyntheticFilterSpec,
    filter_id: str,
) -> EmbeddingStore:
    """Add a filtered variant of every original embedding to a new store."""
    out = EmbeddingStore(dim=store.dim)
    originals = [(k, v) for k, v in store.items()]
    params = affine_params(spec, store.dim) if spec.kind == "affine" else None
    for (image_id, variant), vec in originals:
        out.add(image_id, variant, vec)
        if not variant.is_original:
            continue
        filtered = apply_filter_to_embedding(
            vec, spec, key=make_key(image_id, variant), params=params
        )
        out.add(image_id, Variant.filtered(filter_id), filtered.astype(np.float32))
    return out


def apply_filter_to_image(img: RgbImage, spec: SyntheticFilterSpec) -> RgbImage:
    """Filter one image (identity, color_shift, or occlusion kinds)."""
    if spec.kind == "identity":
        return img
    if spec.kind == "color_shift":
        shifted = img.pixels.astype(np.int32) + np.asarray(spec.delta_rgb, dtype=np.int32)
        return RgbImage(np.clip(shifted, 0, 255).astype(np.uint8))
    if spec.kind == "occlusion":
        h, w = img.height, img.width
        k = round(spec.fraction * w * h)
        flat = img.pixels.reshape(-1, 3).copy()
        paint = 255 if img.pixels.mean() < 128 else 0
        flat[:k] = paint  # top-anchored block of exactly k pixels, row-major
        return RgbImage(flat.reshape(h, w, 3))
    raise ValidationError(f"filter kind {spec.kind!r} does not apply to images")


def gen_image(key: str, width: int, height: int, seed: int = 0) -> RgbImage:
    """A seeded random RGB image for pipeline tests (uniform 8-bit noise)."""
    rng = _key_rng(seed, key)
    return RgbImage(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def subject_sample_images(
    manifest: DatasetManifest,
    n_subjects: int,
    seed: int,
    width: int = 256,
    height: int = 256,
) -> list[tuple[str, RgbImage]]:
    """Seeded images for a seeded subject sample (the 10-subject step)."""
    chosen = manifest.sample_subjects(n_subjects, seed)
    out = []
    for sid in chosen:
        for rec in manifest.images_of(sid):
            out.append((rec.image_id, gen_image(rec.image_id, width, height, seed)))
    return out
