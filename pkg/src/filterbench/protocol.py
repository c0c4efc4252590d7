"""Genuine/impostor pair protocols and cosine-similarity scoring.

Three one-to-one protocols are supported for a manifest of N subjects with
S images each:

* original vs. original — every unordered image pair; N*C(S,2) genuine and
  C(N*S,2) - N*C(S,2) impostor pairs.
* filtered vs. filtered — the same pair set with both sides filtered.
* filtered vs. original — ordered pairs, filtered probe against original
  reference: each probe matches the other S-1 images of its subject
  (N*S*(S-1) genuine) and every image of every other subject
  (N*S*(N-1)*S impostor).

Pairs are ordered by (probe image id, reference image id) so protocol and
score files are byte-reproducible.  Scoring works on a unit-normalized
float64 copy of the embeddings; dense protocols run as blocked matrix
products, sparse ones as chunked row-wise dot products, and both paths
split work across threads in fixed-size blocks so output is bit-identical
for any worker count.

Score files use the SCR1 layout: magic ``SCR1``, u32 LE genuine count,
u32 LE impostor count, then float32 LE scores (genuine block, impostor
block).
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Iterator

import numpy as np

from .data_model import DatasetManifest, EmbeddingStore, Variant, make_key, parse_key
from .errors import (
    DimMismatch,
    MissingEmbedding,
    NonFiniteValue,
    ParseError,
    TooFewSubjects,
    ValidationError,
    ZeroNorm,
)

SCR1_MAGIC = b"SCR1"

LABEL_GENUINE = "genuine"
LABEL_IMPOSTOR = "impostor"

# Dense protocols (most probe/reference combinations present) score faster
# as blocked matrix products; sparse ones as gathered row-wise dots.
_DENSE_MIN_PAIRS = 100_000
_DENSE_MIN_FILL = 0.05
_GEMM_BLOCK_ROWS = 256
_EINSUM_CHUNK = 16_384


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolMode:
    """One of: original-vs-original, filtered-vs-filtered, filtered-vs-original."""

    kind: str  # "ovo" | "fvf" | "fvo"
    filter_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("ovo", "fvf", "fvo"):
            raise ValidationError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "ovo" and self.filter_id is not None:
            raise ValidationError("ovo mode takes no filter_id")
        if self.kind != "ovo" and not self.filter_id:
            raise ValidationError(f"{self.kind} mode requires a filter_id")

    @property
    def probe_variant(self) -> Variant:
        return Variant.original() if self.kind == "ovo" else Variant.filtered(self.filter_id)

    @property
    def reference_variant(self) -> Variant:
        if self.kind == "fvf":
            return Variant.filtered(self.filter_id)
        return Variant.original()

    @property
    def symmetric(self) -> bool:
        """True when pairs are unordered (probe and reference variants match)."""
        return self.kind in ("ovo", "fvf")

    def wire(self) -> str:
        return self.kind if self.kind == "ovo" else f"{self.kind}:{self.filter_id}"

    @classmethod
    def from_wire(cls, text: str) -> "ProtocolMode":
        if text == "ovo":
            return cls("ovo")
        kind, sep, filter_id = text.partition(":")
        if not sep or kind not in ("fvf", "fvo"):
            raise ParseError(f"unknown protocol mode {text!r}")
        return cls(kind, filter_id)


def expected_pair_counts(n_subjects: int, images_per_subject: int, mode: ProtocolMode) -> tuple[int, int]:
    """Closed-form (genuine, impostor) pair counts."""
    n, s = n_subjects, images_per_subject
    if mode.symmetric:
        genuine = n * comb(s, 2)
        impostor = comb(n * s, 2) - genuine
    else:
        genuine = n * s * (s - 1)
        impostor = (n * s) * ((n - 1) * s)
    return genuine, impostor


# ---------------------------------------------------------------------------
# Pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pair:
    probe: tuple[str, Variant]
    reference: tuple[str, Variant]
    label: str


class PairProtocol:
    """An explicit genuine/impostor pair list, stored as index arrays.

    ``image_ids`` is the sorted image-id table; the four index arrays hold
    positions into it.  Pair objects are materialized lazily via
    ``iter_pairs`` — a 9M-pair protocol stays a few int32 arrays.
    """

    def __init__(
        self,
        mode: ProtocolMode,
        image_ids: list[str],
        genuine_probe: np.ndarray,
        genuine_ref: np.ndarray,
        impostor_probe: np.ndarray,
        impostor_ref: np.ndarray,
    ):
        self.mode = mode
        self.image_ids = list(image_ids)
        self.genuine_probe = np.asarray(genuine_probe, dtype=np.int32)
        self.genuine_ref = np.asarray(genuine_ref, dtype=np.int32)
        self.impostor_probe = np.asarray(impostor_probe, dtype=np.int32)
        self.impostor_ref = np.asarray(impostor_ref, dtype=np.int32)
        if len(self.genuine_probe) != len(self.genuine_ref):
            raise ValidationError("genuine probe/reference arrays differ in length")
        if len(self.impostor_probe) != len(self.impostor_ref):
            raise ValidationError("impostor probe/reference arrays differ in length")

    @property
    def n_genuine(self) -> int:
        return len(self.genuine_probe)

    @property
    def n_impostor(self) -> int:
        return len(self.impostor_probe)

    def probe_key(self, idx: int) -> str:
        return make_key(self.image_ids[idx], self.mode.probe_variant)

    def reference_key(self, idx: int) -> str:
        return make_key(self.image_ids[idx], self.mode.reference_variant)

    def iter_pairs(self) -> Iterator[Pair]:
        pv, rv = self.mode.probe_variant, self.mode.reference_variant
        for p, r in zip(self.genuine_probe, self.genuine_ref):
            yield Pair((self.image_ids[p], pv), (self.image_ids[r], rv), LABEL_GENUINE)
        for p, r in zip(self.impostor_probe, self.impostor_ref):
            yield Pair((self.image_ids[p], pv), (self.image_ids[r], rv), LABEL_IMPOSTOR)

    # -- CSV form: probe_key,reference_key,label -------------------------

    def save_csv(self, path: str | Path) -> None:
        pv, rv = self.mode.probe_variant, self.mode.reference_variant
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["probe_key", "reference_key", "label"])
            for probe, ref, label in (
                (self.genuine_probe, self.genuine_ref, LABEL_GENUINE),
                (self.impostor_probe, self.impostor_ref, LABEL_IMPOSTOR),
            ):
                for p, r in zip(probe, ref):
                    writer.writerow(
                        [
                            make_key(self.image_ids[p], pv),
                            make_key(self.image_ids[r], rv),
                            label,
                        ]
                    )

    @classmethod
    def load_csv(cls, path: str | Path) -> "PairProtocol":
        """Load a protocol CSV; the mode is inferred from the variant tags."""
        ids: dict[str, int] = {}
        rows: dict[str, list[tuple[int, int]]] = {LABEL_GENUINE: [], LABEL_IMPOSTOR: []}
        probe_variants: set[Variant] = set()
        ref_variants: set[Variant] = set()
        with Path(path).open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["probe_key", "reference_key", "label"]:
                raise ParseError(f"{path}: bad protocol header {header!r}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3 or row[2] not in rows:
                    raise ParseError(f"{path}:{lineno}: malformed protocol row")
                p_img, p_var = parse_key(row[0])
                r_img, r_var = parse_key(row[1])
                probe_variants.add(p_var)
                ref_variants.add(r_var)
                for img in (p_img, r_img):
                    if img not in ids:
                        ids[img] = 0
                rows[row[2]].append((p_img, r_img))  # type: ignore[arg-type]
        if len(probe_variants) != 1 or len(ref_variants) != 1:
            raise ValidationError(f"{path}: mixed variants in protocol")
        mode = _infer_mode(probe_variants.pop(), ref_variants.pop())
        image_ids = sorted(ids)
        index = {img: i for i, img in enumerate(image_ids)}
        gp = np.array([index[p] for p, _ in rows[LABEL_GENUINE]], dtype=np.int32)
        gr = np.array([index[r] for _, r in rows[LABEL_GENUINE]], dtype=np.int32)
        ip = np.array([index[p] for p, _ in rows[LABEL_IMPOSTOR]], dtype=np.int32)
        ir = np.array([index[r] for _, r in rows[LABEL_IMPOSTOR]], dtype=np.int32)
        return cls(mode, image_ids, gp, gr, ip, ir)


def _infer_mode(probe_var: Variant, ref_var: Variant) -> ProtocolMode:
    if probe_var.is_original and ref_var.is_original:
        return ProtocolMode("ovo")
    if not probe_var.is_original and ref_var.is_original:
        return ProtocolMode("fvo", probe_var.filter_id)
    if not probe_var.is_original and probe_var == ref_var:
        return ProtocolMode("fvf", probe_var.filter_id)
    raise ValidationError(f"no protocol mode has probe {probe_var.wire()} vs ref {ref_var.wire()}")


# ---------------------------------------------------------------------------
# Protocol generation
# ---------------------------------------------------------------------------

def build_protocol(
    manifest: DatasetManifest,
    mode: ProtocolMode,
    require_impostors: bool = True,
) -> PairProtocol:
    """Enumerate the exact pair list for a manifest.

    Pairs come out sorted by (probe image id, reference image id).  For the
    symmetric protocols each unordered pair appears once, probe holding the
    smaller image id.  ``require_impostors=False`` permits single-subject
    manifests (then the impostor list is empty).
    """
    if require_impostors and manifest.n_subjects < 2:
        raise TooFewSubjects(
            f"impostor pairs need >= 2 subjects, manifest has {manifest.n_subjects}"
        )

    image_ids = [r.image_id for r in manifest.records]  # sorted by construction
    subjects = manifest.subjects()
    subj_index = {s: k for k, s in enumerate(subjects)}
    subj = np.array([subj_index[r.subject_id] for r in manifest.records], dtype=np.int32)
    n = len(image_ids)

    members = {k: np.flatnonzero(subj == k) for k in range(len(subjects))}
    others = {k: np.flatnonzero(subj != k) for k in range(len(subjects))}

    gen_probe: list[np.ndarray] = []
    gen_ref: list[np.ndarray] = []
    imp_probe: list[np.ndarray] = []
    imp_ref: list[np.ndarray] = []

    for i in range(n):
        k = int(subj[i])
        same = members[k]
        diff = others[k]
        if mode.symmetric:
            g = same[np.searchsorted(same, i + 1):]
            m = diff[np.searchsorted(diff, i + 1):]
        else:
            g = same[same != i]
            m = diff
        if g.size:
            gen_probe.append(np.full(g.size, i, dtype=np.int32))
            gen_ref.append(g.astype(np.int32))
        if m.size:
            imp_probe.append(np.full(m.size, i, dtype=np.int32))
            imp_ref.append(m.astype(np.int32))

    def _cat(parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int32)

    protocol = PairProtocol(
        mode, image_ids, _cat(gen_probe), _cat(gen_ref), _cat(imp_probe), _cat(imp_ref)
    )
    want_g, want_i = expected_pair_counts(manifest.n_subjects, manifest.images_per_subject, mode)
    if (protocol.n_genuine, protocol.n_impostor) != (want_g, want_i):
        raise ValidationError(
            f"pair counts ({protocol.n_genuine}, {protocol.n_impostor}) do not match "
            f"closed forms ({want_g}, {want_i})"
        )
    return protocol


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    """Similarity scores of one protocol run, float32, in protocol order."""

    genuine: np.ndarray
    impostor: np.ndarray
    mode: ProtocolMode | None = None
    matcher: str = ""

    def __post_init__(self) -> None:
        self.genuine = np.asarray(self.genuine, dtype=np.float32)
        self.impostor = np.asarray(self.impostor, dtype=np.float32)
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise NonFiniteValue("scores must be finite")

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(SCR1_MAGIC)
            fh.write(struct.pack("<II", len(self.genuine), len(self.impostor)))
            fh.write(self.genuine.astype("<f4", copy=False).tobytes())
            fh.write(self.impostor.astype("<f4", copy=False).tobytes())

    @classmethod
    def load(cls, path: str | Path, mode: ProtocolMode | None = None, matcher: str = "") -> "ScoreSet":
        data = Path(path).read_bytes()
        if len(data) < 12 or data[:4] != SCR1_MAGIC:
            raise ParseError(f"{path}: not an SCR1 file")
        n_gen, n_imp = struct.unpack_from("<II", data, 4)
        want = 12 + 4 * (n_gen + n_imp)
        if len(data) != want:
            raise ParseError(f"{path}: expected {want} bytes, found {len(data)}")
        gen = np.frombuffer(data, dtype="<f4", count=n_gen, offset=12).copy()
        imp = np.frombuffer(data, dtype="<f4", count=n_imp, offset=12 + 4 * n_gen).copy()
        return cls(gen, imp, mode=mode, matcher=matcher)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["label", "score"])
            for s in self.genuine:
                writer.writerow([LABEL_GENUINE, repr(float(s))])
            for s in self.impostor:
                writer.writerow([LABEL_IMPOSTOR, repr(float(s))])


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------

def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """dot(u, v) / (|u| |v|), clamped to [-1, 1], computed in float64."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimMismatch(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroNorm("cosine similarity undefined for zero-norm vectors")
    if np.array_equal(u, v):
        return 1.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Protocol scoring
# ---------------------------------------------------------------------------

def score_protocol(
    protocol: PairProtocol,
    store: EmbeddingStore,
    workers: int = 1,
    matcher: str = "",
) -> ScoreSet:
    """Score every pair of a protocol with cosine similarity.

    Embeddings are unit-normalized once in float64; each score is the dot
    product of normalized rows, clamped to [-1, 1] and stored as float32.
    Work is split into fixed-size blocks handed to ``workers`` threads;
    block shapes do not depend on the worker count, so output is
    bit-identical for any value of ``workers``.
    """
    pv, rv = protocol.mode.probe_variant, protocol.mode.reference_variant
    image_ids = protocol.image_ids

    probe_rows = _normalized_rows(store, image_ids, pv)
    ref_rows = probe_rows if rv == pv else _normalized_rows(store, image_ids, rv)

    genuine = _score_pairs(probe_rows, ref_rows, protocol.genuine_probe, protocol.genuine_ref, workers)
    impostor = _score_pairs(probe_rows, ref_rows, protocol.impostor_probe, protocol.impostor_ref, workers)
    return ScoreSet(genuine, impostor, mode=protocol.mode, matcher=matcher)


def _normalized_rows(store: EmbeddingStore, image_ids: list[str], variant: Variant) -> np.ndarray:
    missing = [img for img in image_ids if (img, variant) not in store]
    if missing:
        raise MissingEmbedding(f"store lacks embedding {make_key(missing[0], variant)!r}")
    mat = store.matrix((img, variant) for img in image_ids).astype(np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNorm("zero-norm embedding in store")
    return mat / norms


def _score_pairs(
    probe_rows: np.ndarray,
    ref_rows: np.ndarray,
    probe_idx: np.ndarray,
    ref_idx: np.ndarray,
    workers: int,
) -> np.ndarray:
    n_pairs = len(probe_idx)
    out = np.empty(n_pairs, dtype=np.float32)
    if n_pairs == 0:
        return out

    uniq_probe = np.unique(probe_idx)
    uniq_ref = np.unique(ref_idx)
    fill = n_pairs / (len(uniq_probe) * len(uniq_ref))
    if n_pairs >= _DENSE_MIN_PAIRS and fill >= _DENSE_MIN_FILL:
        _score_dense(probe_rows, ref_rows, probe_idx, ref_idx, uniq_probe, uniq_ref, out, workers)
    else:
        _score_gathered(probe_rows, ref_rows, probe_idx, ref_idx, out, workers)
    return out


def _run_blocks(tasks: list, workers: int) -> None:
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            t()
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for f in [pool.submit(t) for t in tasks]:
                f.result()


def _score_gathered(probe_rows, ref_rows, probe_idx, ref_idx, out, workers) -> None:
    """Sparse path: per-pair row dots, in fixed chunks."""

    def chunk_task(lo: int, hi: int):
        def run() -> None:
            p = probe_rows[probe_idx[lo:hi]]
            r = ref_rows[ref_idx[lo:hi]]
            s = np.einsum("ij,ij->i", p, r)
            out[lo:hi] = np.clip(s, -1.0, 1.0).astype(np.float32)

        return run

    tasks = [chunk_task(lo, min(lo + _EINSUM_CHUNK, len(out))) for lo in range(0, len(out), _EINSUM_CHUNK)]
    _run_blocks(tasks, workers)


def _score_dense(probe_rows, ref_rows, probe_idx, ref_idx, uniq_probe, uniq_ref, out, workers) -> None:
    """Dense path: blocked GEMM over the unique probe/reference rows."""
    ref_mat_t = np.ascontiguousarray(ref_rows[uniq_ref].T)
    rpos = np.searchsorted(uniq_probe, probe_idx).astype(np.int64)
    cpos = np.searchsorted(uniq_ref, ref_idx).astype(np.int64)

    order = np.argsort(rpos, kind="stable")
    rpos_sorted = rpos[order]
    cpos_sorted = cpos[order]

    block_starts = list(range(0, len(uniq_probe), _GEMM_BLOCK_ROWS))

    def block_task(row_lo: int):
        row_hi = min(row_lo + _GEMM_BLOCK_ROWS, len(uniq_probe))
        pair_lo = int(np.searchsorted(rpos_sorted, row_lo, side="left"))
        pair_hi = int(np.searchsorted(rpos_sorted, row_hi - 1, side="right"))

        def run() -> None:
            if pair_lo == pair_hi:
                return
            block = probe_rows[uniq_probe[row_lo:row_hi]] @ ref_mat_t
            sel = slice(pair_lo, pair_hi)
            vals = block[rpos_sorted[sel] - row_lo, cpos_sorted[sel]]
            out[order[sel]] = np.clip(vals, -1.0, 1.0).astype(np.float32)

        return run

    _run_blocks([block_task(lo) for lo in block_starts], workers)
