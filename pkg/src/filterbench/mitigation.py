"""Detect filters in embedding space and undo their effect with linear maps.

Two single-layer models sit on top of the face embeddings: a K-class linear
classifier that recognizes which filter (or none) produced an embedding,
and one affine map per filter, y = M x + b, trained to pull filtered
embeddings back toward the original ones.  Both train with
adaptive-moment-estimation gradient descent; the classifier minimizes
softmax cross-entropy and the maps minimize mean squared error.  Training
stops once the validation loss has not improved for ``patience``
consecutive epochs, and the parameters of the best validation epoch are
returned.

Splits are subject-disjoint: subjects are shuffled once per seed and cut
70/10/20 into train/validation/test, so no identity leaks across parts.

A closed-form least-squares solver (normal equations, ridge fallback)
provides the independent oracle for the gradient-trained maps.

Model files: ``LMAP1`` holds magic, u32 LE dimension, the row-major
float32 matrix and the bias; ``LCLS1`` holds magic, u32 LE class count,
u32 LE dimension, the class-label table (u16 LE length + UTF-8 bytes
each), float32 weights and bias.
"""

from __future__ import annotations

import math
import random
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data_model import DatasetManifest, EmbeddingStore, Variant, make_key
from .errors import (
    DimMismatch,
    DivergenceDetected,
    EmptyInput,
    MissingClass,
    MissingMap,
    ParseError,
    SingularSystem,
    TooFewSubjects,
    ValidationError,
)

LMAP1_MAGIC = b"LMAP1"
LCLS1_MAGIC = b"LCLS1"

# Reserved class label for unfiltered embeddings.
ORIGINAL_CLASS = "orig"

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


# ---------------------------------------------------------------------------
# Subject-disjoint splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """A 70/10/20 subject partition; no subject appears in two parts."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self) -> None:
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ValidationError("split parts overlap")


def make_splits(
    manifest: DatasetManifest,
    seed: int,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> SplitSpec:
    """Shuffle subjects with ``seed`` and cut them train/val/test.

    Part sizes are round(fraction * N) for validation and test, remainder
    to train.  Deterministic for a given seed.
    """
    subjects = manifest.subjects()
    n = len(subjects)
    if n < 10:
        raise TooFewSubjects(f"splits need >= 10 subjects, got {n}")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValidationError(f"split fractions must sum to 1, got {fractions}")
    n_val = round(fractions[1] * n)
    n_test = round(fractions[2] * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise TooFewSubjects(f"fractions {fractions} leave an empty part at N={n}")
    shuffled = subjects[:]
    random.Random(seed).shuffle(shuffled)
    return SplitSpec(
        train=tuple(sorted(shuffled[:n_train])),
        val=tuple(sorted(shuffled[n_train : n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val :])),
        seed=seed,
        fractions=fractions,
    )


# ---------------------------------------------------------------------------
# Training configuration and trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 2000
    patience: int = 50
    seed: int = 0
    min_improvement: float = 1e-9
    # plateau decay: shrink the learning rate after decay_patience epochs
    # without a new best validation loss (1.0 disables)
    lr_decay: float = 0.5
    decay_patience: int = 10

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")
        if not (0.0 < self.lr_decay <= 1.0) or self.decay_patience < 1:
            raise ValidationError("lr_decay must be in (0,1] and decay_patience >= 1")


@dataclass
class TrainingTrace:
    """Per-epoch loss record of one training run (epochs are 1-indexed)."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

def softmax_ce_loss_and_grads(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy of logits x @ W.T + b and its gradients."""
    logits = x @ weights.T + bias
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = logits - np.log(denom)
    n = len(x)
    loss = -float(np.mean(log_probs[np.arange(n), y]))
    grad_logits = exp / denom
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    return loss, grad_logits.T @ x, grad_logits.sum(axis=0)


def mse_loss_and_grads(
    matrix: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared error of x @ M.T + b against y, averaged over all entries."""
    resid = x @ matrix.T + bias - y
    n_entries = resid.size
    loss = float(np.sum(resid * resid)) / n_entries
    scale = 2.0 / n_entries
    return loss, scale * (resid.T @ x), scale * resid.sum(axis=0)


# ---------------------------------------------------------------------------
# Adam loop with early stopping
# ---------------------------------------------------------------------------

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def _train_adam(
    params: list[np.ndarray],
    loss_and_grads,  # (params, x_batch, y_batch) -> (loss, [grads])
    val_loss,        # (params) -> float
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
) -> tuple[list[np.ndarray], TrainingTrace]:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = len(x)
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    step = 0

    trace = TrainingTrace()
    best_params = [p.copy() for p in params]
    best_val = math.inf
    since_best = 0
    since_decay = 0
    lr = cfg.learning_rate

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            loss, grads = loss_and_grads(params, x[sel], y[sel])
            if not math.isfinite(loss):
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch}")
            epoch_loss += loss * len(sel)
            step += 1
            bc1 = 1.0 - _ADAM_BETA1**step
            bc2 = 1.0 - _ADAM_BETA2**step
            for p, g, m, v in zip(params, grads, m_state, v_state):
                m *= _ADAM_BETA1
                m += (1.0 - _ADAM_BETA1) * g
                v *= _ADAM_BETA2
                v += (1.0 - _ADAM_BETA2) * (g * g)
                p -= lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)

        vl = val_loss(params)
        if not math.isfinite(vl):
            raise DivergenceDetected(f"non-finite validation loss at epoch {epoch}")
        trace.train_loss.append(epoch_loss / n)
        trace.val_loss.append(vl)

        if vl < best_val - cfg.min_improvement:
            best_val = vl
            best_params = [p.copy() for p in params]
            trace.best_epoch = epoch
            since_best = 0
            since_decay = 0
        else:
            since_best += 1
            since_decay += 1
            if since_best >= cfg.patience:
                trace.stopped_epoch = epoch
                break
            if cfg.lr_decay < 1.0 and since_decay >= cfg.decay_patience:
                lr *= cfg.lr_decay
                since_decay = 0
    else:
        trace.stopped_epoch = cfg.max_epochs
    return best_params, trace


# ---------------------------------------------------------------------------
# Filter classifier
# ---------------------------------------------------------------------------

@dataclass
class FilterClassifier:
    """K-class linear classifier: predicted class = argmax(W x + b)."""

    weights: np.ndarray  # (K, D)
    bias: np.ndarray     # (K,)
    classes: list[str]
    trace: TrainingTrace | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k, d = self.weights.shape
        if self.bias.shape != (k,) or len(self.classes) != k:
            raise ValidationError("classifier shapes inconsistent")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimMismatch(f"expected dim {self.dim}, got {x.shape[-1]}")
        return x @ self.weights.T + self.bias

    def predict_indices(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: lowest class index wins ties
        return np.argmax(self.decision_values(np.atleast_2d(x)), axis=1)

    def classify(self, embedding: np.ndarray) -> str:
        return self.classes[int(self.predict_indices(embedding)[0])]

    def save(self, path: str | Path) -> None:
        k, d = self.weights.shape
        with Path(path).open("wb") as fh:
            fh.write(LCLS1_MAGIC)
            fh.write(struct.pack("<II", k, d))
            for label in self.classes:
                raw = label.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(self.weights.astype("<f4").tobytes())
            fh.write(self.bias.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FilterClassifier":
        data = Path(path).read_bytes()
        if not data.startswith(LCLS1_MAGIC):
            raise ParseError(f"{path}: not an LCLS1 file")
        off = len(LCLS1_MAGIC)
        k, d = struct.unpack_from("<II", data, off)
        off += 8
        classes = []
        for _ in range(k):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            classes.append(data[off : off + ln].decode("utf-8"))
            off += ln
        weights = np.frombuffer(data, dtype="<f4", count=k * d, offset=off).reshape(k, d)
        off += 4 * k * d
        bias = np.frombuffer(data, dtype="<f4", count=k, offset=off)
        off += 4 * k
        if off != len(data):
            raise ParseError(f"{path}: trailing bytes")
        return cls(weights.astype(np.float64), bias.astype(np.float64), classes)


def train_filter_classifier(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    classes: Sequence[str],
    cfg: TrainConfig,
) -> FilterClassifier:
    """Train the K-class linear classifier with Adam + early stopping."""
    x_train, y_train = np.asarray(train[0], dtype=np.float64), np.asarray(train[1])
    x_val, y_val = np.asarray(val[0], dtype=np.float64), np.asarray(val[1])
    k = len(classes)
    d = x_train.shape[1]
    present = set(np.unique(y_train).tolist())
    missing = [classes[i] for i in range(k) if i not in present]
    if missing:
        raise MissingClass(f"no training samples for classes {missing}")

    weights = np.zeros((k, d))
    bias = np.zeros(k)

    def loss_and_grads(params, xb, yb):
        loss, gw, gb = softmax_ce_loss_and_grads(params[0], params[1], xb, yb)
        return loss, [gw, gb]

    def val_loss(params):
        loss, _, _ = softmax_ce_loss_and_grads(params[0], params[1], x_val, y_val)
        return loss

    (weights, bias), trace = _train_adam(
        [weights, bias], loss_and_grads, val_loss, x_train, y_train, cfg
    )
    return FilterClassifier(weights, bias, list(classes), trace=trace)


def classify(classifier: FilterClassifier, embedding: np.ndarray) -> str:
    return classifier.classify(embedding)


# ---------------------------------------------------------------------------
# Restoration maps
# ---------------------------------------------------------------------------

@dataclass
class LinearMap:
    """Affine restoration map y = M x + b for one filter."""

    matrix: np.ndarray  # (D, D)
    bias: np.ndarray    # (D,)
    filter_id: str = ""
    train_mse: float = math.nan
    trace: TrainingTrace | None = None

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.matrix.shape[0]
        if self.matrix.shape != (d, d) or self.bias.shape != (d,):
            raise ValidationError("linear map shapes inconsistent")
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("linear map has non-finite entries")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimMismatch(f"expected dim {self.dim}, got {x.shape[-1]}")
        return x @ self.matrix.T + self.bias

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(LMAP1_MAGIC)
            fh.write(struct.pack("<I", self.dim))
            fh.write(self.matrix.astype("<f4").tobytes())
            fh.write(self.bias.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, filter_id: str = "") -> "LinearMap":
        data = Path(path).read_bytes()
        if not data.startswith(LMAP1_MAGIC):
            raise ParseError(f"{path}: not an LMAP1 file")
        off = len(LMAP1_MAGIC)
        (d,) = struct.unpack_from("<I", data, off)
        off += 4
        want = off + 4 * d * d + 4 * d
        if len(data) != want:
            raise ParseError(f"{path}: expected {want} bytes, found {len(data)}")
        matrix = np.frombuffer(data, dtype="<f4", count=d * d, offset=off).reshape(d, d)
        bias = np.frombuffer(data, dtype="<f4", count=d, offset=off + 4 * d * d)
        return cls(matrix.astype(np.float64), bias.astype(np.float64), filter_id=filter_id)


def train_restoration_map(
    train_pairs: tuple[np.ndarray, np.ndarray],
    val_pairs: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    filter_id: str = "",
) -> LinearMap:
    """Gradient-train an affine map from filtered to original embeddings.

    Initialization is the identity map (restoration defaults to a no-op).
    """
    x_train = np.asarray(train_pairs[0], dtype=np.float64)
    y_train = np.asarray(train_pairs[1], dtype=np.float64)
    x_val = np.asarray(val_pairs[0], dtype=np.float64)
    y_val = np.asarray(val_pairs[1], dtype=np.float64)
    if len(x_train) == 0:
        raise EmptyInput("no training pairs for restoration map")
    d = x_train.shape[1]
    if len(x_train) < d + 1:
        warnings.warn(
            f"{len(x_train)} training pairs for a {d}-dim map; "
            f"at least {d + 1} recommended",
            stacklevel=2,
        )

    matrix = np.eye(d)
    bias = np.zeros(d)

    def loss_and_grads(params, xb, yb):
        loss, gm, gb = mse_loss_and_grads(params[0], params[1], xb, yb)
        return loss, [gm, gb]

    def val_loss(params):
        loss, _, _ = mse_loss_and_grads(params[0], params[1], x_val, y_val)
        return loss

    (matrix, bias), trace = _train_adam(
        [matrix, bias], loss_and_grads, val_loss, x_train, y_train, cfg
    )
    train_mse, _, _ = mse_loss_and_grads(matrix, bias, x_train, y_train)
    return LinearMap(matrix, bias, filter_id=filter_id, train_mse=train_mse, trace=trace)


def closed_form_map(
    pairs: tuple[np.ndarray, np.ndarray],
    ridge: float = 1e-8,
    filter_id: str = "",
) -> LinearMap:
    """Exact least-squares affine map via normal equations.

    Solves min_{M,b} sum |M x + b - y|^2 on the augmented design [X 1].
    The plain normal equations are tried first; if they are singular or
    numerically unusable, ``ridge`` is added to the diagonal; a system that
    still fails raises SingularSystem.
    """
    x = np.asarray(pairs[0], dtype=np.float64)
    y = np.asarray(pairs[1], dtype=np.float64)
    if len(x) == 0:
        raise EmptyInput("no pairs for closed-form map")
    n, d = x.shape
    a = np.hstack([x, np.ones((n, 1))])
    gram = a.T @ a
    rhs = a.T @ y

    theta = _solve_normal_equations(gram, rhs, ridge)
    matrix = theta[:d].T
    bias = theta[d]
    resid = a @ theta - y
    train_mse = float(np.sum(resid * resid)) / resid.size
    return LinearMap(matrix, bias, filter_id=filter_id, train_mse=train_mse)


def _solve_normal_equations(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    scale = float(np.max(np.abs(rhs))) or 1.0
    try:
        theta = np.linalg.solve(gram, rhs)
        if np.all(np.isfinite(theta)):
            # residual sanity check guards against near-singular garbage
            err = np.max(np.abs(gram @ theta - rhs))
            if err <= 1e-6 * max(scale, float(np.max(np.abs(gram @ theta)))):
                return theta
    except np.linalg.LinAlgError:
        pass
    try:
        theta = np.linalg.solve(gram + ridge * np.eye(len(gram)), rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations singular beyond ridge {ridge:g}") from exc
    if not np.all(np.isfinite(theta)):
        raise SingularSystem(f"normal equations produced non-finite solution")
    return theta


# ---------------------------------------------------------------------------
# Data assembly from store + manifest
# ---------------------------------------------------------------------------

def classifier_classes(filter_ids: Sequence[str]) -> list[str]:
    """Class label table: originals first, then the filters, sorted."""
    ids = sorted(filter_ids)
    if ORIGINAL_CLASS in ids:
        raise ValidationError(f"filter id {ORIGINAL_CLASS!r} collides with the original class")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate filter ids")
    return [ORIGINAL_CLASS] + ids


def collect_labeled_embeddings(
    store: EmbeddingStore,
    manifest: DatasetManifest,
    filter_ids: Sequence[str],
    subject_ids: Iterable[str],
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack (embedding, class index) samples for the given subjects."""
    classes = classifier_classes(filter_ids)
    variants = [Variant.original()] + [Variant.filtered(f) for f in classes[1:]]
    xs: list[np.ndarray] = []
    ys: list[int] = []
    for sid in sorted(subject_ids):
        for rec in manifest.images_of(sid):
            for label_idx, variant in enumerate(variants):
                xs.append(store.get(rec.image_id, variant))
                ys.append(label_idx)
    if not xs:
        raise EmptyInput("no labeled embeddings collected")
    return np.stack(xs).astype(np.float64), np.asarray(ys, dtype=np.int64), classes


def collect_map_pairs(
    store: EmbeddingStore,
    manifest: DatasetManifest,
    filter_id: str,
    subject_ids: Iterable[str],
) -> tuple[np.ndarray, np.ndarray]:
    """(filtered, original) embedding pairs for one filter."""
    fv = Variant.filtered(filter_id)
    ov = Variant.original()
    xs, ys = [], []
    for sid in sorted(subject_ids):
        for rec in manifest.images_of(sid):
            xs.append(store.get(rec.image_id, fv))
            ys.append(store.get(rec.image_id, ov))
    if not xs:
        raise EmptyInput(f"no pairs for filter {filter_id!r}")
    return np.stack(xs).astype(np.float64), np.stack(ys).astype(np.float64)


# ---------------------------------------------------------------------------
# Applying mitigation
# ---------------------------------------------------------------------------

def apply_mitigation(
    store: EmbeddingStore,
    classifier: FilterClassifier,
    maps: dict[str, LinearMap],
    oracle_labels: bool = False,
) -> EmbeddingStore:
    """Route every embedding through its filter's restoration map.

    Each embedding is classified; predicted originals pass through
    unchanged, predicted filters apply the matching map (MissingMap if
    none is registered).  ``oracle_labels=True`` routes by the stored
    variant instead of the classifier, isolating map quality from
    detection errors.
    """
    keys = store.keys()
    mat = store.matrix(keys).astype(np.float64)
    if oracle_labels:
        labels = [
            ORIGINAL_CLASS if variant.is_original else variant.filter_id
            for _, variant in keys
        ]
    else:
        idx = classifier.predict_indices(mat)
        labels = [classifier.classes[int(i)] for i in idx]

    out = EmbeddingStore(dim=store.dim)
    restored = mat.copy()
    for label in sorted(set(labels)):
        if label == ORIGINAL_CLASS:
            continue
        lmap = maps.get(label)
        if lmap is None:
            raise MissingMap(f"no restoration map for predicted class {label!r}")
        sel = np.array([i for i, lb in enumerate(labels) if lb == label])
        restored[sel] = lmap.apply(mat[sel])
    for i, (image_id, variant) in enumerate(keys):
        out.add(image_id, variant, restored[i].astype(np.float32))
    return out


# ---------------------------------------------------------------------------
# Split experiment (detection accuracy + FNMR before/after,
# mean +- std across seeded splits)
# ---------------------------------------------------------------------------

def run_mitigation_experiment(
    manifest: DatasetManifest,
    store: EmbeddingStore,
    filter_ids: Sequence[str],
    n_splits: int,
    seed: int,
    cfg: TrainConfig,
    fmr_targets: Sequence[float] = (1e-4, 1e-5),
    workers: int = 1,
    oracle_labels: bool = False,
) -> dict:
    """Train and evaluate mitigation over ``n_splits`` subject-disjoint splits.

    Per split: train the classifier and one map per filter on the train
    subjects (validation subjects drive early stopping), then on the test
    subjects measure detection accuracy and, per filter, FNMR of the
    filtered-vs-original protocol before and after mitigation.  Returns the
    per-split records plus mean/std aggregates, along with the models of
    the first split.
    """
    from .metrics import fmr_key, fmr_threshold, fnmr_at
    from .protocol import ProtocolMode, build_protocol, score_protocol

    if n_splits < 1:
        raise ValidationError(f"n_splits must be >= 1, got {n_splits}")
    splits = [make_splits(manifest, seed + k) for k in range(n_splits)]
    records: list[dict] = []
    first_models: dict | None = None

    for split in splits:
        split_cfg = TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            max_epochs=cfg.max_epochs,
            patience=cfg.patience,
            seed=cfg.seed + split.seed,
            min_improvement=cfg.min_improvement,
        )
        x_tr, y_tr, classes = collect_labeled_embeddings(store, manifest, filter_ids, split.train)
        x_va, y_va, _ = collect_labeled_embeddings(store, manifest, filter_ids, split.val)
        clf = train_filter_classifier((x_tr, y_tr), (x_va, y_va), classes, split_cfg)

        maps: dict[str, LinearMap] = {}
        for fid in sorted(filter_ids):
            tr_pairs = collect_map_pairs(store, manifest, fid, split.train)
            va_pairs = collect_map_pairs(store, manifest, fid, split.val)
            maps[fid] = train_restoration_map(tr_pairs, va_pairs, split_cfg, filter_id=fid)

        x_te, y_te, _ = collect_labeled_embeddings(store, manifest, filter_ids, split.test)
        accuracy = float(np.mean(clf.predict_indices(x_te) == y_te))

        test_manifest = manifest.restrict_to_subjects(split.test)
        test_store = _subset_store(store, test_manifest, filter_ids)
        restored = apply_mitigation(test_store, clf, maps, oracle_labels=oracle_labels)

        per_filter = {}
        for fid in sorted(filter_ids):
            proto = build_protocol(test_manifest, ProtocolMode("fvo", fid))
            pre = score_protocol(proto, test_store, workers=workers)
            post = score_protocol(proto, restored, workers=workers)
            entry = {}
            for target in fmr_targets:
                t_pre = fmr_threshold(pre.impostor, target)
                t_post = fmr_threshold(post.impostor, target)
                entry[fmr_key(target)] = {
                    "fnmr_pre": fnmr_at(pre.genuine, t_pre),
                    "fnmr_mapping": fnmr_at(post.genuine, t_post),
                }
            per_filter[fid] = entry
        records.append(
            {"seed": split.seed, "detection_accuracy": accuracy, "filters": per_filter}
        )
        if first_models is None:
            first_models = {"classifier": clf, "maps": maps, "split": split}

    return {
        "splits": records,
        "aggregate": _aggregate_mitigation(records, sorted(filter_ids), [fmr_key(t) for t in fmr_targets]),
        "models": first_models,
    }


def _subset_store(
    store: EmbeddingStore, manifest: DatasetManifest, filter_ids: Sequence[str]
) -> EmbeddingStore:
    out = EmbeddingStore(dim=store.dim)
    variants = [Variant.original()] + [Variant.filtered(f) for f in sorted(filter_ids)]
    for rec in manifest.records:
        for variant in variants:
            out.add(rec.image_id, variant, store.get(rec.image_id, variant))
    return out


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(np.mean(arr)), "std": std}


def _aggregate_mitigation(records: list[dict], filter_ids: list[str], keys: list[str]) -> dict:
    agg: dict = {
        "detection_accuracy": _mean_std([r["detection_accuracy"] for r in records]),
        "filters": {},
        "overall": {},
    }
    for fid in filter_ids:
        agg["filters"][fid] = {
            key: {
                "fnmr_pre": _mean_std([r["filters"][fid][key]["fnmr_pre"] for r in records]),
                "fnmr_mapping": _mean_std(
                    [r["filters"][fid][key]["fnmr_mapping"] for r in records]
                ),
            }
            for key in keys
        }
    for key in keys:
        agg["overall"][key] = {
            "fnmr_pre": _mean_std(
                [r["filters"][fid][key]["fnmr_pre"] for r in records for fid in filter_ids]
            ),
            "fnmr_mapping": _mean_std(
                [r["filters"][fid][key]["fnmr_mapping"] for r in records for fid in filter_ids]
            ),
        }
    return agg
