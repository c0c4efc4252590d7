"""Dataset manifests, embedding storage, and their on-disk formats.

Two file formats are owned by this module:

* Manifest CSV: header ``image_id,subject_id,session,gender,source_path``,
  UTF-8, LF line endings.
* EMB1 binary embeddings: magic ``EMB1``, u32 LE dimension, u32 LE record
  count, then per record a u16 LE key byte-length, the UTF-8 key bytes
  (``<image_id>|orig`` or ``<image_id>|f:<filter_id>``) and ``dim`` IEEE-754
  LE float32 components.  A ``key,v0,...,v{D-1}`` CSV alternative exists for
  small fixtures.

All container types are immutable after construction and safe to share
across workers.  Iteration order is deterministic everywhere: records sort
by image id, embedding entries by (image_id, original-before-filtered,
filter_id), so downstream artifacts are byte-reproducible.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    DimMismatch,
    DuplicateKey,
    NonFiniteValue,
    ParseError,
    ValidationError,
    ZeroNorm,
)

EMB1_MAGIC = b"EMB1"
DEFAULT_DIM = 512
GENDERS = ("M", "F", "U")

MANIFEST_HEADER = ["image_id", "subject_id", "session", "gender", "source_path"]


# ---------------------------------------------------------------------------
# Variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Variant:
    """Which rendition of an image an embedding belongs to.

    ``filter_id`` is ``None`` for the unfiltered original and a nonempty
    string for a filtered rendition.
    """

    filter_id: str | None = None

    def __post_init__(self) -> None:
        if self.filter_id is not None and not self.filter_id:
            raise ValidationError("filter_id must be nonempty for a filtered variant")
        if self.filter_id is not None and "|" in self.filter_id:
            raise ValidationError(f"filter_id may not contain '|': {self.filter_id!r}")

    @property
    def is_original(self) -> bool:
        return self.filter_id is None

    def wire(self) -> str:
        """Wire-format tag: ``orig`` or ``f:<filter_id>``."""
        return "orig" if self.filter_id is None else f"f:{self.filter_id}"

    @classmethod
    def original(cls) -> "Variant":
        return cls(None)

    @classmethod
    def filtered(cls, filter_id: str) -> "Variant":
        return cls(filter_id)

    @classmethod
    def from_wire(cls, tag: str) -> "Variant":
        if tag == "orig":
            return cls(None)
        if tag.startswith("f:") and len(tag) > 2:
            return cls(tag[2:])
        raise ParseError(f"unknown variant tag {tag!r}")

    def sort_key(self) -> tuple[int, str]:
        # Originals sort before filtered variants; filtered sort by filter id.
        return (0, "") if self.filter_id is None else (1, self.filter_id)


def make_key(image_id: str, variant: Variant) -> str:
    """Composite wire key ``<image_id>|<variant>`` used in files."""
    return f"{image_id}|{variant.wire()}"


def parse_key(key: str) -> tuple[str, Variant]:
    image_id, sep, tag = key.rpartition("|")
    if not sep or not image_id:
        raise ParseError(f"malformed embedding key {key!r}")
    return image_id, Variant.from_wire(tag)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    """One captured image of one subject."""

    image_id: str
    subject_id: str
    session: int
    gender: str = "U"
    source_path: str | None = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValidationError("image_id must be nonempty")
        if "|" in self.image_id:
            raise ValidationError(f"image_id may not contain '|': {self.image_id!r}")
        if not self.subject_id:
            raise ValidationError(f"subject_id must be nonempty (image {self.image_id!r})")
        if self.session < 1:
            raise ValidationError(
                f"session must be >= 1, got {self.session} (image {self.image_id!r})"
            )
        if self.gender not in GENDERS:
            raise ValidationError(
                f"gender must be one of {GENDERS}, got {self.gender!r} "
                f"(image {self.image_id!r})"
            )


class DatasetManifest:
    """A validated, immutable collection of image records.

    Every subject holds exactly ``images_per_subject`` records with distinct
    sessions; ragged manifests are rejected at construction.  Gender is
    metadata for reporting only and never enters protocol logic.
    """

    def __init__(self, records: Iterable[ImageRecord], images_per_subject: int | None = None):
        recs = sorted(records, key=lambda r: r.image_id)
        seen: set[str] = set()
        per_subject: dict[str, list[ImageRecord]] = {}
        for r in recs:
            if r.image_id in seen:
                raise ValidationError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)
            per_subject.setdefault(r.subject_id, []).append(r)

        for sid, group in per_subject.items():
            sessions = {g.session for g in group}
            if len(sessions) != len(group):
                raise ValidationError(f"subject {sid!r} has repeated session values")

        counts = {len(g) for g in per_subject.values()}
        if len(counts) > 1:
            bad = min(per_subject, key=lambda s: len(per_subject[s]))
            raise ValidationError(
                f"ragged manifest: subject {bad!r} has {len(per_subject[bad])} images, "
                f"others differ"
            )
        inferred = counts.pop() if counts else None
        if images_per_subject is None:
            images_per_subject = inferred if inferred is not None else 3
        elif inferred is not None and inferred != images_per_subject:
            raise ValidationError(
                f"manifest has {inferred} images per subject, expected {images_per_subject}"
            )

        self._records: tuple[ImageRecord, ...] = tuple(recs)
        self._by_subject: dict[str, tuple[ImageRecord, ...]] = {
            sid: tuple(sorted(g, key=lambda r: r.image_id))
            for sid, g in sorted(per_subject.items())
        }
        self.images_per_subject = images_per_subject

    # -- access ---------------------------------------------------------

    @property
    def records(self) -> tuple[ImageRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self._records == other._records
            and self.images_per_subject == other.images_per_subject
        )

    def subjects(self) -> list[str]:
        """Subject ids in lexicographic order."""
        return list(self._by_subject)

    @property
    def n_subjects(self) -> int:
        return len(self._by_subject)

    def images_of(self, subject_id: str) -> tuple[ImageRecord, ...]:
        return self._by_subject[subject_id]

    def subject_of(self, image_id: str) -> str:
        for r in self._records:
            if r.image_id == image_id:
                return r.subject_id
        raise KeyError(image_id)

    def gender_report(self) -> dict[str, int]:
        """Subject counts per gender label (a subject's label is its records' label)."""
        out = {g: 0 for g in GENDERS}
        for sid, group in self._by_subject.items():
            labels = {r.gender for r in group}
            if len(labels) > 1:
                raise ValidationError(f"subject {sid!r} has inconsistent gender labels")
            out[group[0].gender] += 1
        return out

    def restrict_to_subjects(self, subject_ids: Iterable[str]) -> "DatasetManifest":
        wanted = set(subject_ids)
        recs = [r for r in self._records if r.subject_id in wanted]
        return DatasetManifest(recs, images_per_subject=self.images_per_subject)

    def restrict_to_gender(self, gender: str) -> "DatasetManifest":
        if gender not in GENDERS:
            raise ValidationError(f"unknown gender {gender!r}")
        keep = [s for s, g in self._by_subject.items() if g[0].gender == gender]
        return self.restrict_to_subjects(keep)

    def sample_subjects(self, n: int, seed: int) -> list[str]:
        """Seeded uniform sample of ``n`` subject ids, without replacement."""
        import random

        ids = self.subjects()
        if n > len(ids):
            raise ValidationError(f"cannot sample {n} of {len(ids)} subjects")
        return sorted(random.Random(seed).sample(ids, n))


def load_manifest(path: str | Path, images_per_subject: int | None = None) -> DatasetManifest:
    """Load and validate a manifest CSV."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest file") from None
        if header != MANIFEST_HEADER:
            raise ParseError(f"{path}: bad header {header!r}, expected {MANIFEST_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            image_id, subject_id, session_s, gender, source_path = row
            try:
                session = int(session_s)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: session {session_s!r} is not an integer")
            records.append(
                ImageRecord(
                    image_id=image_id,
                    subject_id=subject_id,
                    session=session,
                    gender=gender,
                    source_path=source_path or None,
                )
            )
    return DatasetManifest(records, images_per_subject=images_per_subject)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest CSV (UTF-8, LF endings), records sorted by image id."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow(
                [r.image_id, r.subject_id, str(r.session), r.gender, r.source_path or ""]
            )


# ---------------------------------------------------------------------------
# Filter metadata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterDescriptor:
    """Descriptive metadata for one filter of one app."""

    filter_id: str
    app: str
    display_name: str = ""
    category: str | None = None

    def __post_init__(self) -> None:
        if not self.filter_id:
            raise ValidationError("filter_id must be nonempty")


# ---------------------------------------------------------------------------
# Embedding store
# ---------------------------------------------------------------------------

def _validate_vector(vec: np.ndarray, dim: int, key: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float32)
    if vec.ndim != 1 or vec.shape[0] != dim:
        raise DimMismatch(f"{key}: expected dim {dim}, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteValue(f"{key}: vector has non-finite components")
    if not np.any(vec):
        raise ZeroNorm(f"{key}: vector has zero norm")
    return vec


class EmbeddingStore:
    """Maps (image_id, variant) to a fixed-dimension float32 vector.

    Vectors are stored raw (no normalization); cosine scoring normalizes at
    score time.  Mutation happens only during construction; iteration is
    sorted so files round-trip bit-exactly.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValidationError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self._entries: dict[tuple[str, Variant], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, Variant]) -> bool:
        return key in self._entries

    def add(
        self,
        image_id: str,
        variant: Variant,
        vec: np.ndarray,
        validate: bool = True,
    ) -> None:
        """Insert a vector.  ``validate=False`` defers invariant checks to save time."""
        key = (image_id, variant)
        if key in self._entries:
            raise DuplicateKey(f"duplicate embedding key {make_key(image_id, variant)!r}")
        arr = np.asarray(vec, dtype=np.float32)
        if validate:
            arr = _validate_vector(arr, self.dim, make_key(image_id, variant))
        arr = arr.copy()
        arr.flags.writeable = False
        self._entries[key] = arr

    def get(self, image_id: str, variant: Variant) -> np.ndarray:
        return self._entries[(image_id, variant)]

    def keys(self) -> list[tuple[str, Variant]]:
        """Keys sorted by (image_id, original-first, filter_id)."""
        return sorted(self._entries, key=lambda k: (k[0],) + k[1].sort_key())

    def items(self) -> Iterator[tuple[tuple[str, Variant], np.ndarray]]:
        for k in self.keys():
            yield k, self._entries[k]

    def validate(self) -> None:
        """Re-check every entry against the store invariants."""
        for (image_id, variant), vec in self._entries.items():
            _validate_vector(vec, self.dim, make_key(image_id, variant))

    def matrix(self, keys: Iterable[tuple[str, Variant]]) -> np.ndarray:
        """Stack the vectors for ``keys`` into an (n, dim) float32 matrix."""
        rows = []
        for image_id, variant in keys:
            try:
                rows.append(self._entries[(image_id, variant)])
            except KeyError:
                raise MissingKeyError(make_key(image_id, variant)) from None
        if not rows:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.stack(rows)


class MissingKeyError(KeyError, ValidationError):
    """An (image, variant) key is absent from the store."""


# -- EMB1 binary format -------------------------------------------------------

def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    """Write the store in EMB1 binary layout; validates every entry first."""
    store.validate()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<II", store.dim, len(store)))
        for (image_id, variant), vec in store.items():
            key_bytes = make_key(image_id, variant).encode("utf-8")
            if len(key_bytes) > 0xFFFF:
                raise ValidationError(f"key too long: {image_id!r}")
            fh.write(struct.pack("<H", len(key_bytes)))
            fh.write(key_bytes)
            fh.write(vec.astype("<f4", copy=False).tobytes())


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingStore:
    """Load embeddings from an EMB1 binary or a ``key,v0,...`` CSV file."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == EMB1_MAGIC:
        return _load_emb1(path, expected_dim)
    return _load_embedding_csv(path, expected_dim)


def _load_emb1(path: Path, expected_dim: int | None) -> EmbeddingStore:
    data = path.read_bytes()
    if len(data) < 12:
        raise ParseError(f"{path}: truncated EMB1 header")
    dim, count = struct.unpack_from("<II", data, 4)
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatch(f"{path}: file dim {dim}, expected {expected_dim}")
    store = EmbeddingStore(dim=dim)
    offset = 12
    vec_bytes = dim * 4
    for i in range(count):
        if offset + 2 > len(data):
            raise ParseError(f"{path}: truncated at record {i}")
        (key_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + key_len + vec_bytes > len(data):
            raise ParseError(f"{path}: truncated at record {i}")
        key = data[offset : offset + key_len].decode("utf-8")
        offset += key_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        image_id, variant = parse_key(key)
        store.add(image_id, variant, vec)
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    return store


def _load_embedding_csv(path: Path, expected_dim: int | None) -> EmbeddingStore:
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty embedding CSV") from None
        if not header or header[0] != "key":
            raise ParseError(f"{path}: embedding CSV must start with a 'key' column")
        dim = len(header) - 1
        if dim < 1:
            raise ParseError(f"{path}: embedding CSV has no value columns")
        if expected_dim is not None and dim != expected_dim:
            raise DimMismatch(f"{path}: file dim {dim}, expected {expected_dim}")
        store = EmbeddingStore(dim=dim)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                vec = np.array([float(v) for v in row[1:]], dtype=np.float32)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric component") from None
            image_id, variant = parse_key(row[0])
            store.add(image_id, variant, vec)
    return store


def save_embeddings_csv(store: EmbeddingStore, path: str | Path) -> None:
    """Write the ``key,v0,...,v{D-1}`` CSV alternative (for small fixtures)."""
    store.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key"] + [f"v{i}" for i in range(store.dim)])
        for (image_id, variant), vec in store.items():
            writer.writerow([make_key(image_id, variant)] + [repr(float(v)) for v in vec])
