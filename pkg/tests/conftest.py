import numpy as np
import pytest

from filterbench.data_model import DatasetManifest, EmbeddingStore, ImageRecord, Variant


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # expose each phase's report to fixtures (test_acceptance prints a
    # PASS/FAIL line per criterion from it)
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def build_manifest(n_subjects: int, images_per_subject: int = 3) -> DatasetManifest:
    """Small synthetic manifest: subjects s000.., images s000_1.., alternating gender."""
    records = []
    for i in range(n_subjects):
        sid = f"s{i:03d}"
        gender = "M" if i % 2 == 0 else "F"
        for j in range(images_per_subject):
            records.append(
                ImageRecord(
                    image_id=f"{sid}_{j + 1}",
                    subject_id=sid,
                    session=j + 1,
                    gender=gender,
                )
            )
    return DatasetManifest(records, images_per_subject=images_per_subject)


def random_store(manifest: DatasetManifest, dim: int, seed: int, variants=None) -> EmbeddingStore:
    """Store of unit-norm random vectors for every record and variant."""
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(dim=dim)
    variants = variants or [Variant.original()]
    for rec in manifest.records:
        for variant in variants:
            v = rng.standard_normal(dim)
            store.add(rec.image_id, variant, (v / np.linalg.norm(v)).astype(np.float32))
    return store


@pytest.fixture
def manifest4():
    return build_manifest(4, 3)
