"""Command-line interface and the staged evaluation pipeline.

Subcommands: ``select-filters``, ``make-protocol``, ``score``, ``metrics``,
``train-mitigation``, ``apply-mitigation``, ``synth``, ``synth-filter`` and
``run``.  The ``run`` subcommand drives the whole pipeline from a single
JSON config and writes machine-readable reports; score files (the cost
center) are cached on disk and stages are individually resumable via
``--stage``.

Every report embeds the config hash and the seeds used; a config yields a
byte-identical report bundle on every run.  Exit codes: 0 success,
1 validation error, 2 missing input, 3 numeric failure.

Worker count resolution: ``--threads`` flag, else the
``FILTERBENCH_THREADS`` environment variable, else the config, else 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data_model import (
    DatasetManifest,
    EmbeddingStore,
    Variant,
    load_embeddings,
    load_manifest,
    save_embeddings,
    save_manifest,
)
from .errors import (
    DivergenceDetected,
    FilterBenchError,
    MissingEmbedding,
    MissingMap,
    SingularSystem,
    ValidationError,
)
from .metrics import (
    DEFAULT_FMR_TARGETS,
    GROUPS,
    build_report,
    save_histogram_csv,
    save_report_json,
    summarize_bins,
)
from .mitigation import (
    FilterClassifier,
    LinearMap,
    TrainConfig,
    apply_mitigation,
    run_mitigation_experiment,
)
from .pixel_analysis import (
    DEFAULT_ANALYSIS_SIZE,
    MODE_MEAN,
    MODE_PER_PAIR,
    analyze_filter,
    binarize,
    load_image,
    read_stats_json,
    save_mask_png,
    select_filters,
    write_stats_json,
)
from .protocol import PairProtocol, ProtocolMode, ScoreSet, build_protocol, score_protocol
from .synth import SyntheticDatasetSpec, SyntheticFilterSpec, apply_filter_to_store, gen_embeddings

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERIC = 3

STAGES = ("synth", "stats", "score", "metrics", "mitigate")

THREADS_ENV = "FILTERBENCH_THREADS"


class PipelineStageError(FilterBenchError):
    """A pipeline stage failed; carries the stage name and exit code."""

    def __init__(self, stage: str, exit_code: int, message: str):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """One pipeline run, loaded from a JSON document."""

    output_dir: str
    manifest: str | None = None
    embeddings: list[str] = field(default_factory=list)
    filters: list[str] = field(default_factory=list)
    fmr_targets: list[float] = field(default_factory=lambda: list(DEFAULT_FMR_TARGETS))
    seed: int = 0
    split_count: int = 5
    groups: list[str] = field(default_factory=lambda: list(GROUPS))
    hist_bins: int = 0
    filter_stats: str | None = None
    mitigation: bool = True
    oracle_labels: bool = False
    threads: int = 1
    train: dict = field(default_factory=dict)
    synth: dict | None = None

    def __post_init__(self) -> None:
        for t in self.fmr_targets:
            if not (0.0 < t < 1.0):
                raise ValidationError(f"fmr target {t} not in (0,1)")
        if self.split_count < 1:
            raise ValidationError(f"split_count must be >= 1, got {self.split_count}")
        for g in self.groups:
            if g not in GROUPS:
                raise ValidationError(f"unknown group {g!r}")
        if self.manifest is None and self.synth is None:
            raise ValidationError("config needs either a manifest or a synth block")

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "output_dir" not in doc:
            raise ValidationError("config requires output_dir")
        emb = doc.get("embeddings", [])
        if isinstance(emb, str):
            emb = [emb]
        doc = dict(doc)
        doc["embeddings"] = list(emb)
        return cls(**doc)

    def to_canonical_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "manifest": self.manifest,
            "embeddings": list(self.embeddings),
            "filters": list(self.filters),
            "fmr_targets": list(self.fmr_targets),
            "seed": self.seed,
            "split_count": self.split_count,
            "groups": list(self.groups),
            "hist_bins": self.hist_bins,
            "filter_stats": self.filter_stats,
            "mitigation": self.mitigation,
            "oracle_labels": self.oracle_labels,
            "threads": self.threads,
            "train": dict(sorted(self.train.items())),
            "synth": self.synth,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def _score_name(mode: ProtocolMode, group: str) -> str:
    return f"{mode.wire().replace(':', '__')}_{group}"


def run_pipeline(cfg: RunConfig, start_stage: str | None = None, force: bool = False) -> Path:
    """Execute the pipeline, returning the output directory.

    ``start_stage`` resumes at that stage, requiring earlier stage outputs
    to exist in the output directory.  Cached score files are reused unless
    ``force`` is set.
    """
    if start_stage is not None and start_stage not in STAGES:
        raise ValidationError(f"unknown stage {start_stage!r}, expected one of {STAGES}")
    skip_before = STAGES.index(start_stage) if start_stage else 0

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    _write_json(out / "config.resolved.json", {"config": cfg.to_canonical_dict(), "config_hash": chash})

    manifest, store = _stage_synth(cfg, out, active=skip_before <= STAGES.index("synth"), force=force)
    bins = _stage_stats(cfg, out, active=skip_before <= STAGES.index("stats"))
    score_files = _stage_score(
        cfg, out, manifest, store, active=skip_before <= STAGES.index("score"), force=force
    )
    reports = _stage_metrics(cfg, out, chash, score_files, bins, active=skip_before <= STAGES.index("metrics"))
    _stage_mitigate(cfg, out, chash, manifest, store, active=skip_before <= STAGES.index("mitigate"))

    artifacts = sorted(
        str(p.relative_to(out))
        for p in out.rglob("*")
        if p.is_file() and p.name != "run_summary.json"
    )
    _write_json(
        out / "run_summary.json",
        {
            "config_hash": chash,
            "seed": cfg.seed,
            "split_count": cfg.split_count,
            "artifacts": artifacts,
            "reports": reports,
        },
    )
    return out


def _stage_synth(
    cfg: RunConfig, out: Path, active: bool, force: bool
) -> tuple[DatasetManifest, EmbeddingStore]:
    stage = "synth"
    try:
        if cfg.synth is not None:
            man_path = out / "data" / "manifest.csv"
            emb_path = out / "data" / "embeddings.emb1"
            if active and (force or not (man_path.exists() and emb_path.exists())):
                manifest, store = _generate_synthetic(cfg.synth)
                man_path.parent.mkdir(parents=True, exist_ok=True)
                save_manifest(manifest, man_path)
                save_embeddings(store, emb_path)
            if not (man_path.exists() and emb_path.exists()):
                raise FileNotFoundError(f"synth outputs missing under {out / 'data'}")
            return load_manifest(man_path), load_embeddings(emb_path)

        if cfg.manifest is None or not Path(cfg.manifest).exists():
            raise FileNotFoundError(f"manifest not found: {cfg.manifest}")
        manifest = load_manifest(cfg.manifest)
        store: EmbeddingStore | None = None
        for path in cfg.embeddings:
            if not Path(path).exists():
                raise PipelineStageError("score", EXIT_MISSING_INPUT, f"embedding file not found: {path}")
            part = load_embeddings(path)
            if store is None:
                store = part
            else:
                for (image_id, variant), vec in part.items():
                    store.add(image_id, variant, vec)
        if store is None:
            raise PipelineStageError("score", EXIT_MISSING_INPUT, "config lists no embedding files")
        return manifest, store
    except PipelineStageError:
        raise
    except FileNotFoundError as exc:
        raise PipelineStageError(stage, EXIT_MISSING_INPUT, str(exc)) from exc


def _generate_synthetic(synth_cfg: dict) -> tuple[DatasetManifest, EmbeddingStore]:
    known = {
        "n_subjects",
        "images_per_subject",
        "dim",
        "intra_subject_noise",
        "inter_subject_separation",
        "seed",
        "filters",
    }
    unknown = set(synth_cfg) - known
    if unknown:
        raise ValidationError(f"unknown synth keys: {sorted(unknown)}")
    filters = synth_cfg.get("filters", [])
    spec = SyntheticDatasetSpec(
        n_subjects=synth_cfg["n_subjects"],
        images_per_subject=synth_cfg.get("images_per_subject", 3),
        dim=synth_cfg.get("dim", 512),
        intra_subject_noise=synth_cfg.get("intra_subject_noise", 0.1),
        inter_subject_separation=synth_cfg.get("inter_subject_separation", 1.0),
        seed=synth_cfg.get("seed", 0),
    )
    manifest, store = gen_embeddings(spec)
    for fdoc in filters:
        fdoc = dict(fdoc)
        filter_id = fdoc.pop("filter_id")
        fspec = SyntheticFilterSpec(**{k: tuple(v) if k == "delta_rgb" else v for k, v in fdoc.items()})
        store = apply_filter_to_store(store, fspec, filter_id)
    return manifest, store


def _stage_stats(cfg: RunConfig, out: Path, active: bool) -> dict[str, int]:
    if cfg.filter_stats is None:
        return {}
    try:
        filters, selection = read_stats_json(cfg.filter_stats)
    except FileNotFoundError as exc:
        raise PipelineStageError("stats", EXIT_MISSING_INPUT, str(exc)) from exc
    if active:
        doc = {"filters": filters}
        if selection is not None:
            doc["selection"] = selection
        _write_json(out / "reports" / "diff_stats.json", doc)
    return {f["filter_id"]: int(f["bin"]) for f in filters}


def _pipeline_modes(cfg: RunConfig) -> list[ProtocolMode]:
    modes = [ProtocolMode("ovo")]
    for fid in sorted(cfg.filters):
        modes.append(ProtocolMode("fvf", fid))
        modes.append(ProtocolMode("fvo", fid))
    return modes


def _group_manifest(manifest: DatasetManifest, group: str) -> DatasetManifest | None:
    if group == "all":
        return manifest
    sub = manifest.restrict_to_gender("F" if group == "female" else "M")
    if sub.n_subjects < 2:
        return None
    return sub


def _stage_score(
    cfg: RunConfig,
    out: Path,
    manifest: DatasetManifest,
    store: EmbeddingStore,
    active: bool,
    force: bool,
) -> dict[tuple[str, str], Path]:
    scores_dir = out / "scores"
    files: dict[tuple[str, str], Path] = {}
    try:
        for mode in _pipeline_modes(cfg):
            for group in cfg.groups:
                sub = _group_manifest(manifest, group)
                if sub is None:
                    continue
                path = scores_dir / f"{_score_name(mode, group)}.scr1"
                if active and (force or not path.exists()):
                    protocol = build_protocol(sub, mode)
                    scores = score_protocol(protocol, store, workers=cfg.threads)
                    scores_dir.mkdir(parents=True, exist_ok=True)
                    scores.save(path)
                if not path.exists():
                    raise PipelineStageError(
                        "score", EXIT_MISSING_INPUT, f"missing cached score file {path}"
                    )
                files[(mode.wire(), group)] = path
        return files
    except PipelineStageError:
        raise
    except (MissingEmbedding, FileNotFoundError) as exc:
        raise PipelineStageError("score", EXIT_MISSING_INPUT, str(exc)) from exc
    except FilterBenchError as exc:
        raise PipelineStageError("score", EXIT_VALIDATION, str(exc)) from exc


def _stage_metrics(
    cfg: RunConfig,
    out: Path,
    chash: str,
    score_files: dict[tuple[str, str], Path],
    bins: dict[str, int],
    active: bool,
) -> dict:
    if not active:
        # resumed later stages still need the report index for the summary
        idx_path = out / "reports" / "metrics_index.json"
        if idx_path.exists():
            return json.loads(idx_path.read_text(encoding="utf-8"))
        raise PipelineStageError("metrics", EXIT_MISSING_INPUT, f"missing {idx_path}")

    reports_dir = out / "reports" / "metrics"
    index: dict = {"metrics": [], "bin_summary": None}
    per_filter_dprime: list[tuple[str, int, str, float]] = []
    try:
        for (mode_wire, group), path in sorted(score_files.items()):
            mode = ProtocolMode.from_wire(mode_wire)
            scores = ScoreSet.load(path, mode=mode)
            report = build_report(scores, cfg.fmr_targets, cfg.hist_bins or None)
            doc = report.to_json_dict()
            doc["group"] = group
            doc["config_hash"] = chash
            name = _score_name(mode, group)
            _write_json(reports_dir / f"{name}.json", doc)
            if cfg.hist_bins:
                save_histogram_csv(report.histogram, reports_dir / f"{name}_hist.csv")
            index["metrics"].append(name)
            if mode.kind == "fvo" and mode.filter_id in bins:
                per_filter_dprime.append((mode.filter_id, bins[mode.filter_id], group, report.d_prime))
    except FilterBenchError as exc:
        raise PipelineStageError("metrics", EXIT_VALIDATION, str(exc)) from exc

    if per_filter_dprime:
        summaries = summarize_bins(per_filter_dprime)
        table = [
            {
                "bin": s.bin,
                "group": s.group,
                "mean_d_prime": s.mean_d_prime,
                "std_d_prime": s.std_d_prime,
                "n_filters": s.n_filters,
            }
            for s in summaries
        ]
        _write_json(
            out / "reports" / "bin_summary.json",
            {"config_hash": chash, "rows": table},
        )
        _write_csv_rows(
            out / "reports" / "bin_summary.csv",
            ["bin", "group", "mean_d_prime", "std_d_prime", "n_filters"],
            [[r["bin"], r["group"], repr(r["mean_d_prime"]), repr(r["std_d_prime"]), r["n_filters"]] for r in table],
        )
        index["bin_summary"] = "bin_summary.json"
    _write_json(out / "reports" / "metrics_index.json", index)
    return index


def _write_csv_rows(path: Path, header: list[str], rows: list[list]) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _stage_mitigate(
    cfg: RunConfig,
    out: Path,
    chash: str,
    manifest: DatasetManifest,
    store: EmbeddingStore,
    active: bool,
) -> None:
    if not (cfg.mitigation and cfg.filters):
        return
    if not active:
        if not (out / "reports" / "mitigation.json").exists():
            raise PipelineStageError("mitigate", EXIT_MISSING_INPUT, "missing mitigation report")
        return
    try:
        result = run_mitigation_experiment(
            manifest,
            store,
            cfg.filters,
            n_splits=cfg.split_count,
            seed=cfg.seed,
            cfg=TrainConfig(**cfg.train) if cfg.train else TrainConfig(seed=cfg.seed),
            fmr_targets=cfg.fmr_targets,
            workers=cfg.threads,
            oracle_labels=cfg.oracle_labels,
        )
    except (DivergenceDetected, SingularSystem) as exc:
        raise PipelineStageError("mitigate", EXIT_NUMERIC, str(exc)) from exc
    except FilterBenchError as exc:
        raise PipelineStageError("mitigate", EXIT_VALIDATION, str(exc)) from exc

    _write_json(
        out / "reports" / "mitigation.json",
        {
            "config_hash": chash,
            "seed": cfg.seed,
            "split_count": cfg.split_count,
            "splits": result["splits"],
            "aggregate": result["aggregate"],
        },
    )
    models = result["models"]
    models_dir = out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    models["classifier"].save(models_dir / "classifier.lcls1")
    maps_dir = models_dir / "maps"
    maps_dir.mkdir(exist_ok=True)
    for fid, lmap in sorted(models["maps"].items()):
        lmap.save(maps_dir / f"{fid}.lmap1")
    _write_json(
        models_dir / "index.json",
        {
            "config_hash": chash,
            "classifier": "classifier.lcls1",
            "classes": models["classifier"].classes,
            "maps": {fid: f"maps/{fid}.lmap1" for fid in sorted(models["maps"])},
            "train_mse": {fid: models["maps"][fid].train_mse for fid in sorted(models["maps"])},
            "split_seed": models["split"].seed,
        },
    )


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _resolve_threads(flag_value: int | None, cfg_value: int | None = None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env)
    if cfg_value is not None:
        return cfg_value
    return 1


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticDatasetSpec(
        n_subjects=args.subjects,
        images_per_subject=args.images,
        dim=args.dim,
        intra_subject_noise=args.sw,
        inter_subject_separation=args.sb,
        seed=args.seed,
    )
    manifest, store = gen_embeddings(spec)
    save_manifest(manifest, args.out_manifest)
    save_embeddings(store, args.out_emb)
    print(f"wrote {len(manifest)} records to {args.out_manifest}, "
          f"{len(store)} embeddings to {args.out_emb}")
    return EXIT_OK


def _cmd_synth_filter(args: argparse.Namespace) -> int:
    spec = SyntheticFilterSpec(
        kind=args.kind,
        strength=args.strength,
        sigma=args.sigma,
        fraction=args.fraction,
        seed=args.seed,
    )
    store = load_embeddings(args.embeddings)
    out = apply_filter_to_store(store, spec, args.filter_id)
    save_embeddings(out, args.out)
    print(f"applied {args.kind} filter {args.filter_id!r}; wrote {len(out)} embeddings to {args.out}")
    return EXIT_OK


def _cmd_select_filters(args: argparse.Namespace) -> int:
    import csv as _csv

    pairs_by_filter: dict[str, list[tuple[str, str]]] = {}
    with open(args.pairs, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header != ["filter_id", "original_path", "filtered_path"]:
            raise ValidationError(
                f"{args.pairs}: expected header filter_id,original_path,filtered_path"
            )
        for row in reader:
            if not row:
                continue
            pairs_by_filter.setdefault(row[0], []).append((row[1], row[2]))

    mode = MODE_PER_PAIR if args.per_pair_otsu else MODE_MEAN
    stats = []
    for fid in sorted(pairs_by_filter):
        images = [
            (load_image(orig), load_image(filt)) for orig, filt in pairs_by_filter[fid]
        ]
        st = analyze_filter(images, fid, mode=mode, analysis_size=args.analysis_size)
        stats.append(st)
        if args.masks_dir:
            Path(args.masks_dir).mkdir(parents=True, exist_ok=True)
            save_mask_png(
                binarize(st.mean_diff, st.otsu_threshold),
                Path(args.masks_dir) / f"{fid}.png",
            )
    selection = select_filters(stats, args.seed)
    write_stats_json(stats, args.out, selection)
    print(
        f"analyzed {len(stats)} filters; quota {selection.quota}, "
        f"selected {len(selection.selected)}; wrote {args.out}"
    )
    return EXIT_OK


def _cmd_make_protocol(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    mode = ProtocolMode.from_wire(args.mode)
    protocol = build_protocol(manifest, mode)
    protocol.save_csv(args.out)
    print(
        f"{mode.wire()}: {protocol.n_genuine} genuine, {protocol.n_impostor} impostor "
        f"pairs -> {args.out}"
    )
    return EXIT_OK


def _cmd_score(args: argparse.Namespace) -> int:
    protocol = PairProtocol.load_csv(args.protocol)
    store = load_embeddings(args.embeddings)
    workers = _resolve_threads(args.threads)
    scores = score_protocol(protocol, store, workers=workers)
    scores.save(args.out)
    if args.csv:
        scores.save_csv(args.csv)
    print(f"scored {scores.genuine.size + scores.impostor.size} pairs -> {args.out}")
    return EXIT_OK


def _cmd_metrics(args: argparse.Namespace) -> int:
    mode = ProtocolMode.from_wire(args.mode) if args.mode else None
    scores = ScoreSet.load(args.scores, mode=mode)
    targets = [float(t) for t in args.fmr.split(",")] if args.fmr else list(DEFAULT_FMR_TARGETS)
    report = build_report(scores, targets, args.hist_bins or None)
    save_report_json(report, args.out)
    if args.hist_bins and args.hist_csv:
        save_histogram_csv(report.histogram, args.hist_csv)
    print(f"d_prime={report.d_prime:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_train_mitigation(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    store = load_embeddings(args.embeddings)
    filter_ids = [f for f in args.filters.split(",") if f]
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
    )
    result = run_mitigation_experiment(
        manifest,
        store,
        filter_ids,
        n_splits=args.splits,
        seed=args.seed,
        cfg=cfg,
        fmr_targets=[float(t) for t in args.fmr.split(",")],
        workers=_resolve_threads(args.threads),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = result["models"]
    models["classifier"].save(out / "classifier.lcls1")
    (out / "maps").mkdir(exist_ok=True)
    for fid, lmap in sorted(models["maps"].items()):
        lmap.save(out / "maps" / f"{fid}.lmap1")
    _write_json(
        out / "index.json",
        {
            "classifier": "classifier.lcls1",
            "classes": models["classifier"].classes,
            "maps": {fid: f"maps/{fid}.lmap1" for fid in sorted(models["maps"])},
            "train_mse": {fid: models["maps"][fid].train_mse for fid in sorted(models["maps"])},
            "split_seed": models["split"].seed,
        },
    )
    _write_json(out / "mitigation_table.json", {"splits": result["splits"], "aggregate": result["aggregate"]})
    acc = result["aggregate"]["detection_accuracy"]
    print(f"detection accuracy {acc['mean']:.4f} +- {acc['std']:.4f} over {args.splits} splits -> {out}")
    return EXIT_OK


def _cmd_apply_mitigation(args: argparse.Namespace) -> int:
    models_dir = Path(args.models)
    index_path = models_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"model index not found: {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    classifier = FilterClassifier.load(models_dir / index["classifier"])
    maps = {
        fid: LinearMap.load(models_dir / rel, filter_id=fid)
        for fid, rel in index["maps"].items()
    }
    store = load_embeddings(args.embeddings)
    restored = apply_mitigation(store, classifier, maps, oracle_labels=args.oracle_labels)
    save_embeddings(restored, args.out)
    print(f"restored {len(restored)} embeddings -> {args.out}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_json_file(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.threads = _resolve_threads(args.threads, cfg.threads)
    out = run_pipeline(cfg, start_stage=args.stage, force=args.force)
    print(f"pipeline complete -> {out} (config {cfg.config_hash()[:12]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filterbench",
        description="Evaluate the impact of face filters on verification and mitigate it.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic manifest + embedding store")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--images", type=int, default=3)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--sw", type=float, default=0.1, help="intra-subject angular noise")
    p.add_argument("--sb", type=float, default=1.0, help="declared inter-subject separation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--out-emb", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("synth-filter", help="apply a synthetic filter to an embedding store")
    p.add_argument("--kind", choices=["identity", "affine", "noise"], required=True)
    p.add_argument("--strength", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter-id", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_filter)

    p = sub.add_parser("select-filters", help="difference-image analysis and quota selection")
    p.add_argument("--pairs", required=True,
                   help="CSV of filter_id,original_path,filtered_path rows")
    p.add_argument("--out", required=True, help="output stats JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--per-pair-otsu", action="store_true",
                   help="binarize each pair and average ratios instead of the mean image")
    p.add_argument("--analysis-size", type=int, default=DEFAULT_ANALYSIS_SIZE)
    p.add_argument("--masks-dir", help="also write binarized masks as PNGs")
    p.set_defaults(func=_cmd_select_filters)

    p = sub.add_parser("make-protocol", help="emit the exact pair list for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True, help="ovo, fvf:<filter_id>, or fvo:<filter_id>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_protocol)

    p = sub.add_parser("score", help="score a protocol CSV against an embedding store")
    p.add_argument("--protocol", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export scores as CSV")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("metrics", help="d-prime, FNMR at FMR targets, histograms")
    p.add_argument("--scores", required=True)
    p.add_argument("--fmr", default="1e-4,1e-5", help="comma-separated FMR targets")
    p.add_argument("--hist-bins", type=int, default=0)
    p.add_argument("--hist-csv")
    p.add_argument("--mode", help="protocol mode tag recorded in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("train-mitigation", help="train filter classifier and restoration maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--filters", required=True, help="comma-separated filter ids")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--fmr", default="1e-4,1e-5")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="output models directory")
    p.set_defaults(func=_cmd_train_mitigation)

    p = sub.add_parser("apply-mitigation", help="restore an embedding store with trained models")
    p.add_argument("--models", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-labels", action="store_true",
                   help="route by stored variant instead of the classifier")
    p.set_defaults(func=_cmd_apply_mitigation)

    p = sub.add_parser("run", help="run the staged pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--stage", choices=STAGES, help="resume at this stage")
    p.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: pipeline failed at stage '{exc.stage}': {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, MissingEmbedding, MissingMap) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (DivergenceDetected, SingularSystem) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FilterBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
