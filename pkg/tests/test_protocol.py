from itertools import combinations
from math import comb, sqrt

import numpy as np
import pytest

from filterbench.data_model import EmbeddingStore, Variant, make_key
from filterbench.errors import (
    DimMismatch,
    MissingEmbedding,
    ParseError,
    TooFewSubjects,
    ValidationError,
    ZeroNorm,
)
from filterbench.protocol import (
    LABEL_GENUINE,
    LABEL_IMPOSTOR,
    PairProtocol,
    ProtocolMode,
    ScoreSet,
    build_protocol,
    cosine_similarity,
    expected_pair_counts,
    score_protocol,
)

from conftest import build_manifest, random_store


# ---------------------------------------------------------------------------
# Brute-force pair enumeration oracle
# ---------------------------------------------------------------------------

def brute_force_counts(n_subjects: int, images_per_subject: int, symmetric: bool) -> tuple[int, int]:
    """Enumerate pairs explicitly over (subject, image) tuples."""
    images = [(s, i) for s in range(n_subjects) for i in range(images_per_subject)]
    genuine = impostor = 0
    if symmetric:
        for (s1, _), (s2, _) in combinations(images, 2):
            if s1 == s2:
                genuine += 1
            else:
                impostor += 1
    else:
        for s1, i1 in images:          # filtered probe
            for s2, i2 in images:      # original reference
                if (s1, i1) == (s2, i2):
                    continue
                if s1 == s2:
                    genuine += 1
                else:
                    impostor += 1
    return genuine, impostor


def test_mode_wire_roundtrip():
    for m in [ProtocolMode("ovo"), ProtocolMode("fvf", "x"), ProtocolMode("fvo", "y")]:
        assert ProtocolMode.from_wire(m.wire()) == m
    with pytest.raises(ParseError):
        ProtocolMode.from_wire("bogus")
    with pytest.raises(ValidationError):
        ProtocolMode("fvo")


def test_reference_counts_n1000():
    g, i = expected_pair_counts(1000, 3, ProtocolMode("ovo"))
    assert (g, i) == (3000, 4495500)
    g, i = expected_pair_counts(1000, 3, ProtocolMode("fvo", "f"))
    assert (g, i) == (6000, 8991000)
    assert 8991000 == 3000 * 2997


def test_small_case_counts_match_brute_force():
    manifest = build_manifest(4, 3)
    proto = build_protocol(manifest, ProtocolMode("ovo"))
    assert (proto.n_genuine, proto.n_impostor) == (12, 54)
    assert comb(12, 2) - 12 == 54
    assert brute_force_counts(4, 3, symmetric=True) == (12, 54)

    proto = build_protocol(manifest, ProtocolMode("fvo", "f1"))
    assert (proto.n_genuine, proto.n_impostor) == brute_force_counts(4, 3, symmetric=False)


def test_closed_forms_match_brute_force_small_grid():
    for n in (1, 2, 3, 5, 8):
        for s in (1, 2, 3, 4, 5):
            for mode in (ProtocolMode("ovo"), ProtocolMode("fvo", "f")):
                want = brute_force_counts(n, s, mode.symmetric)
                assert expected_pair_counts(n, s, mode) == want
                manifest = build_manifest(n, s)
                proto = build_protocol(manifest, mode, require_impostors=False)
                assert (proto.n_genuine, proto.n_impostor) == want


def test_fvf_equals_ovo_with_rewritten_variants():
    manifest = build_manifest(5, 3)
    ovo = build_protocol(manifest, ProtocolMode("ovo"))
    fvf = build_protocol(manifest, ProtocolMode("fvf", "glow"))
    np.testing.assert_array_equal(ovo.genuine_probe, fvf.genuine_probe)
    np.testing.assert_array_equal(ovo.genuine_ref, fvf.genuine_ref)
    np.testing.assert_array_equal(ovo.impostor_probe, fvf.impostor_probe)
    np.testing.assert_array_equal(ovo.impostor_ref, fvf.impostor_ref)
    assert fvf.mode.probe_variant == Variant.filtered("glow")
    assert fvf.mode.reference_variant == Variant.filtered("glow")


def test_fvo_probe_filtered_reference_original():
    manifest = build_manifest(2, 3)
    proto = build_protocol(manifest, ProtocolMode("fvo", "f"))
    assert proto.mode.probe_variant == Variant.filtered("f")
    assert proto.mode.reference_variant == Variant.original()
    # per subject: A' vs B,C / B' vs A,C / C' vs A,B -> 6 genuine
    assert proto.n_genuine == 2 * 6
    pairs = list(proto.iter_pairs())
    for p in pairs:
        assert p.probe[1] == Variant.filtered("f")
        assert p.reference[1] == Variant.original()
        if p.label == LABEL_GENUINE:
            assert p.probe[0] != p.reference[0]
            assert p.probe[0].split("_")[0] == p.reference[0].split("_")[0]


def test_no_duplicate_pairs_no_self_pairs():
    for mode in (ProtocolMode("ovo"), ProtocolMode("fvf", "f"), ProtocolMode("fvo", "f")):
        proto = build_protocol(build_manifest(6, 3), mode)
        seen = set()
        for p in proto.iter_pairs():
            key = (p.probe, p.reference)
            assert key not in seen
            assert p.probe != p.reference
            seen.add(key)


def test_pairs_sorted_by_probe_then_reference():
    for mode in (ProtocolMode("ovo"), ProtocolMode("fvo", "f")):
        proto = build_protocol(build_manifest(5, 3), mode)
        for probe, ref in (
            (proto.genuine_probe, proto.genuine_ref),
            (proto.impostor_probe, proto.impostor_ref),
        ):
            order = np.lexsort((ref, probe))
            np.testing.assert_array_equal(order, np.arange(len(order)))


def test_too_few_subjects():
    manifest = build_manifest(1, 3)
    with pytest.raises(TooFewSubjects):
        build_protocol(manifest, ProtocolMode("ovo"))
    proto = build_protocol(manifest, ProtocolMode("ovo"), require_impostors=False)
    assert proto.n_impostor == 0


def test_protocol_csv_roundtrip(tmp_path):
    manifest = build_manifest(3, 3)
    proto = build_protocol(manifest, ProtocolMode("fvo", "fx"))
    path = tmp_path / "p.csv"
    proto.save_csv(path)
    loaded = PairProtocol.load_csv(path)
    assert loaded.mode == proto.mode
    assert [p for p in loaded.iter_pairs()] == [p for p in proto.iter_pairs()]


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------

def test_cosine_reference_values():
    v = np.array([0.3, -1.2, 4.0])
    assert cosine_similarity(v, v) == 1.0
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    got = cosine_similarity(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert got == pytest.approx(1 / sqrt(2), abs=1e-12)


def test_cosine_errors():
    with pytest.raises(ZeroNorm):
        cosine_similarity(np.zeros(3), np.ones(3))
    with pytest.raises(DimMismatch):
        cosine_similarity(np.ones(3), np.ones(4))


def test_cosine_symmetric_and_scale_invariant():
    rng = np.random.default_rng(8)
    for _ in range(50):
        u = rng.standard_normal(16)
        v = rng.standard_normal(16)
        assert cosine_similarity(u, v) == cosine_similarity(v, u)
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert cosine_similarity(c * u, v) == pytest.approx(
                cosine_similarity(u, v), abs=1e-6
            )


# ---------------------------------------------------------------------------
# score_protocol
# ---------------------------------------------------------------------------

def test_score_single_genuine_identical_vectors():
    manifest = build_manifest(1, 2)
    store = EmbeddingStore(dim=4)
    vec = np.array([0.5, 0.5, 0.5, 0.5], dtype=np.float32)
    store.add("s000_1", Variant.original(), vec)
    store.add("s000_2", Variant.original(), vec)
    proto = build_protocol(manifest, ProtocolMode("ovo"), require_impostors=False)
    scores = score_protocol(proto, store)
    assert scores.genuine.tolist() == [1.0]


def test_clustered_embeddings_fully_separate():
    # well separated subject clusters: every genuine beats every impostor
    manifest = build_manifest(4, 3)
    rng = np.random.default_rng(5)
    store = EmbeddingStore(dim=32)
    for k, sid in enumerate(manifest.subjects()):
        center = np.zeros(32)
        center[k * 8 : (k + 1) * 8] = 1.0  # disjoint supports
        for rec in manifest.images_of(sid):
            v = center + 0.05 * rng.standard_normal(32)
            store.add(rec.image_id, Variant.original(), v.astype(np.float32))
    proto = build_protocol(manifest, ProtocolMode("ovo"))
    scores = score_protocol(proto, store)
    assert scores.genuine.min() > scores.impostor.max()


def test_scores_in_protocol_order_and_worker_invariant():
    manifest = build_manifest(8, 3)
    store = random_store(manifest, dim=24, seed=3)
    proto = build_protocol(manifest, ProtocolMode("ovo"))
    s1 = score_protocol(proto, store, workers=1)
    s4 = score_protocol(proto, store, workers=4)
    np.testing.assert_array_equal(s1.genuine, s4.genuine)
    np.testing.assert_array_equal(s1.impostor, s4.impostor)
    # spot-check protocol order against the scalar path
    pairs = list(proto.iter_pairs())[: proto.n_genuine]
    for k in (0, 3, len(pairs) - 1):
        u = store.get(*pairs[k].probe)
        v = store.get(*pairs[k].reference)
        assert s1.genuine[k] == pytest.approx(cosine_similarity(u, v), abs=1e-6)


def test_missing_embedding_names_first_absent_key():
    manifest = build_manifest(3, 3)
    store = random_store(manifest, dim=8, seed=1)
    proto = build_protocol(manifest, ProtocolMode("fvo", "nope"))
    with pytest.raises(MissingEmbedding, match=make_key("s000_1", Variant.filtered("nope"))):
        score_protocol(proto, store)


def test_scoreset_scr1_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    scores = ScoreSet(
        rng.uniform(-1, 1, 100).astype(np.float32),
        rng.uniform(-1, 1, 250).astype(np.float32),
        mode=ProtocolMode("ovo"),
    )
    path = tmp_path / "s.scr1"
    scores.save(path)
    assert path.stat().st_size == 12 + 4 * 350
    loaded = ScoreSet.load(path, mode=ProtocolMode("ovo"))
    np.testing.assert_array_equal(loaded.genuine, scores.genuine)
    np.testing.assert_array_equal(loaded.impostor, scores.impostor)
    bad = tmp_path / "bad.scr1"
    bad.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ParseError):
        ScoreSet.load(bad)
