"""Separation and error-rate metrics over genuine/impostor score sets.

The headline statistic is d-prime,

    d' = (mean_genuine - mean_impostor) / sqrt((var_genuine + var_impostor) / 2)

with population variances (divide by n).  Operating thresholds are anchored
at a target false-match rate by rank over the descending impostor scores
(no interpolation); a match is declared when score >= threshold, so
FNMR(t) counts genuine scores strictly below t.  Across-filter summaries
(per bin, per gender group) report mean and sample standard deviation.

All accumulation happens in float64 regardless of the float32 score
storage.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyScores, InsufficientData, OutOfRange
from .protocol import ScoreSet

DEFAULT_FMR_TARGETS = (1e-4, 1e-5)
DEFAULT_HIST_BINS = 200

GROUP_ALL = "all"
GROUP_FEMALE = "female"
GROUP_MALE = "male"
GROUPS = (GROUP_ALL, GROUP_FEMALE, GROUP_MALE)


def _as_f64(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64).ravel()


def _mean_std_pop(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x))  # population: ddof=0


# ---------------------------------------------------------------------------
# d-prime
# ---------------------------------------------------------------------------

def d_prime_values(genuine: Sequence[float] | np.ndarray, impostor: Sequence[float] | np.ndarray) -> float:
    """d' between two score lists; genuine is the first (higher) population.

    Degenerate inputs are pinned: both variances zero with equal means gives
    0.0, with distinct means gives a signed infinity sentinel.
    """
    g = _as_f64(genuine)
    i = _as_f64(impostor)
    if len(g) < 2 or len(i) < 2:
        raise InsufficientData(
            f"d-prime needs >= 2 scores per list, got {len(g)} genuine / {len(i)} impostor"
        )
    mg, sg = _mean_std_pop(g)
    mi, si = _mean_std_pop(i)
    pooled = math.sqrt((sg * sg + si * si) / 2.0)
    if pooled == 0.0:
        if mg == mi:
            return 0.0
        return math.copysign(math.inf, mg - mi)
    return (mg - mi) / pooled


def d_prime(scores: ScoreSet) -> float:
    return d_prime_values(scores.genuine, scores.impostor)


# ---------------------------------------------------------------------------
# FMR-anchored thresholds and FNMR
# ---------------------------------------------------------------------------

def fmr_threshold(impostor: Sequence[float] | np.ndarray, target_fmr: float) -> float:
    """Smallest rank-based threshold whose FMR does not exceed the target.

    With m impostor scores sorted descending, at most k = floor(target*m)
    scores may sit at or above the threshold.  The threshold is the k-th
    score unless ties straddle the cut, in which case it moves up to the
    previous distinct value; if no score value qualifies it is the smallest
    float above the maximum score.
    """
    imp = _as_f64(impostor)
    if len(imp) == 0:
        raise EmptyScores("fmr_threshold needs at least one impostor score")
    if not (0.0 < target_fmr < 1.0):
        raise OutOfRange(f"target FMR must be in (0,1), got {target_fmr}")
    m = len(imp)
    if m * target_fmr < 1.0:
        warnings.warn(
            f"only {m} impostor scores for target FMR {target_fmr:g}; "
            "threshold is an extrapolation",
            stacklevel=2,
        )
    s = np.sort(imp)[::-1]
    k = int(math.floor(target_fmr * m))
    if k == 0:
        return float(np.nextafter(s[0], np.inf))
    if k < m and s[k - 1] == s[k]:
        # ties straddle the cut: move to the first index of the tied run
        j = int(np.searchsorted(-s, -s[k], side="left"))
        if j == 0:
            return float(np.nextafter(s[0], np.inf))
        return float(s[j - 1])
    return float(s[k - 1])


def fmr_at(impostor: Sequence[float] | np.ndarray, threshold: float) -> float:
    """Fraction of impostor scores at or above the threshold (score >= t matches)."""
    imp = _as_f64(impostor)
    if len(imp) == 0:
        raise EmptyScores("fmr_at needs at least one impostor score")
    return float(np.count_nonzero(imp >= threshold)) / len(imp)


def fnmr_at(genuine: Sequence[float] | np.ndarray, threshold: float) -> float:
    """Fraction of genuine scores strictly below the threshold."""
    gen = _as_f64(genuine)
    if len(gen) == 0:
        raise EmptyScores("fnmr_at needs at least one genuine score")
    return float(np.count_nonzero(gen < threshold)) / len(gen)


def fmr_key(target: float) -> str:
    """Canonical report key for an FMR target: 1e-4 -> '1e-4'."""
    mantissa, exponent = f"{target:e}".split("e")
    return f"{float(mantissa):g}e{int(exponent)}"


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

def score_histogram(scores: ScoreSet, bins: int = DEFAULT_HIST_BINS) -> dict:
    """Fixed-bin counts over [-1, 1] for plotting; counts sum to score counts."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    gen_counts, _ = np.histogram(_as_f64(scores.genuine), bins=edges)
    imp_counts, _ = np.histogram(_as_f64(scores.impostor), bins=edges)
    return {
        "edges": edges.tolist(),
        "genuine": gen_counts.tolist(),
        "impostor": imp_counts.tolist(),
    }


def save_histogram_csv(hist: dict, path: str | Path) -> None:
    edges = hist["edges"]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "genuine_count", "impostor_count"])
        for i, (g, m) in enumerate(zip(hist["genuine"], hist["impostor"])):
            writer.writerow([repr(edges[i]), repr(edges[i + 1]), g, m])


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """All metrics of one score set, JSON-serializable."""

    mode: str
    filter_id: str | None
    d_prime: float
    genuine_mean: float
    genuine_std: float
    genuine_count: int
    impostor_mean: float
    impostor_std: float
    impostor_count: int
    fnmr: dict[str, dict[str, float]] = field(default_factory=dict)
    histogram: dict | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "filter_id": self.filter_id,
            "d_prime": self.d_prime,
            "genuine": {
                "mean": self.genuine_mean,
                "std": self.genuine_std,
                "count": self.genuine_count,
            },
            "impostor": {
                "mean": self.impostor_mean,
                "std": self.impostor_std,
                "count": self.impostor_count,
            },
            "fnmr": self.fnmr,
        }
        if self.histogram is not None:
            doc["histogram"] = self.histogram
        return doc


def build_report(
    scores: ScoreSet,
    fmr_targets: Iterable[float] = DEFAULT_FMR_TARGETS,
    hist_bins: int | None = None,
) -> MetricsReport:
    dp = d_prime(scores)
    mg, sg = _mean_std_pop(_as_f64(scores.genuine))
    mi, si = _mean_std_pop(_as_f64(scores.impostor))
    fnmr: dict[str, dict[str, float]] = {}
    for target in fmr_targets:
        t = fmr_threshold(scores.impostor, target)
        fnmr[fmr_key(target)] = {"threshold": t, "fnmr": fnmr_at(scores.genuine, t)}
    hist = score_histogram(scores, hist_bins) if hist_bins else None
    return MetricsReport(
        mode=scores.mode.wire() if scores.mode else "",
        filter_id=scores.mode.filter_id if scores.mode else None,
        d_prime=dp,
        genuine_mean=mg,
        genuine_std=sg,
        genuine_count=len(scores.genuine),
        impostor_mean=mi,
        impostor_std=si,
        impostor_count=len(scores.impostor),
        fnmr=fnmr,
        histogram=hist,
    )


def save_report_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Across-filter summaries (per bin, per gender group)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinSummary:
    """Mean/spread of per-filter d' within one (bin, group) cell."""

    bin: int
    group: str
    mean_d_prime: float
    std_d_prime: float
    n_filters: int


def summarize_bins(
    per_filter: Iterable[tuple[str, int, str, float]],
) -> list[BinSummary]:
    """Aggregate (filter_id, bin, group, d') records into bin summaries.

    Sample standard deviation (n-1); a single-filter cell reports std 0.
    Empty cells are omitted.  Output is sorted by (bin, group).
    """
    cells: dict[tuple[int, str], list[float]] = {}
    for _filter_id, bin_id, group, dp in per_filter:
        cells.setdefault((bin_id, group), []).append(float(dp))
    out = []
    for (bin_id, group), values in sorted(cells.items()):
        arr = np.asarray(values, dtype=np.float64)
        std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
        out.append(
            BinSummary(
                bin=bin_id,
                group=group,
                mean_d_prime=float(np.mean(arr)),
                std_d_prime=std,
                n_filters=len(arr),
            )
        )
    return out


def bin_summary_table(summaries: Iterable[BinSummary]) -> list[dict]:
    return [
        {
            "bin": s.bin,
            "group": s.group,
            "mean_d_prime": s.mean_d_prime,
            "std_d_prime": s.std_d_prime,
            "n_filters": s.n_filters,
        }
        for s in summaries
    ]
