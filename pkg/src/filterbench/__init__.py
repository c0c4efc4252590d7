"""filterbench: measure how face filters affect verification, and undo it.

The toolkit quantifies a filter's pixel manipulation (difference imaging +
Otsu binarization), generates exact genuine/impostor protocols over face
embeddings, scores them with cosine similarity, reports d-prime and
FNMR-at-FMR metrics, and trains linear embedding-space restorations that
mitigate the filter effect.
"""

from .data_model import (
    DatasetManifest,
    EmbeddingStore,
    FilterDescriptor,
    ImageRecord,
    Variant,
    load_embeddings,
    load_manifest,
    make_key,
    parse_key,
    save_embeddings,
    save_manifest,
)
from .metrics import (
    BinSummary,
    MetricsReport,
    build_report,
    d_prime,
    d_prime_values,
    fmr_threshold,
    fnmr_at,
    summarize_bins,
)
from .mitigation import (
    FilterClassifier,
    LinearMap,
    SplitSpec,
    TrainConfig,
    apply_mitigation,
    closed_form_map,
    make_splits,
    train_filter_classifier,
    train_restoration_map,
)
from .pixel_analysis import (
    DiffStats,
    GrayImage,
    RgbImage,
    SelectionResult,
    abs_diff,
    analyze_filter,
    assign_bin,
    manipulated_ratio,
    mean_diff,
    otsu_threshold,
    select_filters,
    to_grayscale,
)
from .protocol import (
    Pair,
    PairProtocol,
    ProtocolMode,
    ScoreSet,
    build_protocol,
    cosine_similarity,
    expected_pair_counts,
    score_protocol,
)
from .synth import (
    SyntheticDatasetSpec,
    SyntheticFilterSpec,
    apply_filter_to_image,
    apply_filter_to_store,
    gen_embeddings,
)

__version__ = "0.1.0"
