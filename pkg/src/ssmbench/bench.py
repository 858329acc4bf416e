"""Benchmark orchestration: config files, fold loops, reports, persistence.

One TOML file drives a whole benchmark. Fold i re-splits the dataset with
seed ``base_seed + i``; every roster encoder trains on that identical
split (the pairing requirement for the t-tests) with its weights seeded
from (fold seed, encoder id). All artifacts are plain deterministic text
or the binary checkpoint format, so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .data import (
    DatasetManifest,
    load_dataset,
    materialize,
    stratified_split,
    synth_generate,
)
from .encoders import (
    EncoderSpec,
    load_checkpoint,
    restore_weights,
    save_checkpoint,
)
from .stats import (
    MetricSummary,
    RunResult,
    SignificanceMatrix,
    accuracy,
    aggregate_runs,
    format_mean_std,
    ovr_auc,
    significance_matrix,
)
from .training import (
    DataSplit,
    TrainConfig,
    derive_seed,
    history_lines,
    predict_scores,
    train_run,
)

ENCODER_TYPE_LABELS = {"toy_cnn": "CNN", "toy_vit": "ViT",
                       "vim": "Vim", "vmamba": "VSSM"}

STATE_FILE = "state.json"
CONFIG_COPY = "config.toml"
REPORT_FILE = "report.md"


class ConfigError(ValueError):
    """Malformed or inconsistent benchmark configuration."""


@dataclass
class DatasetConfig:
    source: str  # synthetic | busi | b | manifest_file
    image_size: int = 32
    path: Optional[str] = None
    num_per_class: int = 64
    classes: int = 3
    seed: int = 0


@dataclass
class RosterEntry:
    encoder_id: str
    spec: EncoderSpec


@dataclass
class BenchmarkConfig:
    dataset: DatasetConfig
    roster: list
    train: TrainConfig
    n_seeds: int = 5
    base_seed: int = 1000
    out_dir: str = "runs/benchmark"
    workers: int = 1

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if not self.roster:
            raise ConfigError("encoder roster must be nonempty")
        ids = [e.encoder_id for e in self.roster]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate encoder ids in roster: {ids}")

    def fold_seeds(self) -> list:
        return [self.base_seed + i for i in range(self.n_seeds)]


def load_config(path: str) -> BenchmarkConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")

    try:
        ds_raw = dict(raw.get("dataset") or {})
        if "source" not in ds_raw:
            raise ConfigError("dataset.source is required")
        dataset = DatasetConfig(**ds_raw)
        if dataset.source not in ("synthetic", "busi", "b", "manifest_file"):
            raise ConfigError(f"unknown dataset source {dataset.source!r}")
        if dataset.source != "synthetic" and not dataset.path:
            raise ConfigError(f"dataset.path required for {dataset.source}")

        train = TrainConfig(**dict(raw.get("train") or {}))
        bench_raw = dict(raw.get("benchmark") or {})
        roster = []
        for entry in raw.get("encoder") or []:
            entry = dict(entry)
            encoder_id = entry.pop("id", None)
            if not encoder_id:
                raise ConfigError("every [[encoder]] table needs an 'id'")
            entry.setdefault("image_size", dataset.image_size)
            if dataset.source == "synthetic":
                entry.setdefault("num_classes", dataset.classes)
            if entry.get("image_size") != dataset.image_size:
                raise ConfigError(
                    f"{encoder_id}: image_size differs from dataset")
            roster.append(RosterEntry(encoder_id=encoder_id,
                                      spec=EncoderSpec(**entry)))
        return BenchmarkConfig(dataset=dataset, roster=roster, train=train,
                               **bench_raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}")


def config_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def build_manifest(dc: DatasetConfig) -> DatasetManifest:
    if dc.source == "synthetic":
        return synth_generate(dc.num_per_class, classes=dc.classes,
                              image_size=dc.image_size, seed=dc.seed)
    return load_dataset(dc.path, dc.source)


# ---------------------------------------------------------------------------
# RunResult persistence (line-oriented text)

def run_result_path(out_dir: str, encoder_id: str, fold: int) -> str:
    return os.path.join(out_dir, f"{encoder_id}-fold{fold}.result")


def save_run_result(path: str, rr: RunResult) -> None:
    lines = [f"encoder: {rr.encoder_id}", f"seed: {rr.seed}",
             f"fold: {rr.fold}"]
    for label, pred, row in zip(rr.labels, rr.predicted, rr.scores):
        scores = ",".join(repr(float(v)) for v in row)
        lines.append(f"{label}\t{pred}\t{scores}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_run_result(path: str) -> RunResult:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = {}
    for ln in lines[:3]:
        key, _, value = ln.partition(": ")
        header[key] = value
    labels, predicted, scores = [], [], []
    for ln in lines[3:]:
        label, pred, row = ln.split("\t")
        labels.append(int(label))
        predicted.append(int(pred))
        scores.append([float(v) for v in row.split(",")])
    return RunResult(encoder_id=header["encoder"], seed=int(header["seed"]),
                     fold=int(header["fold"]), labels=labels,
                     predicted=predicted, scores=np.array(scores))


def load_all_results(results_dir: str) -> list:
    paths = sorted(p for p in os.listdir(results_dir)
                   if p.endswith(".result"))
    return [load_run_result(os.path.join(results_dir, p)) for p in paths]


# ---------------------------------------------------------------------------
# single runs

def execute_run(config: BenchmarkConfig, images: np.ndarray,
                labels: np.ndarray, manifest: DatasetManifest,
                entry: RosterEntry, fold: int) -> tuple:
    """Train one (encoder, fold) pair; returns (RunResult, ckpt, history)."""
    fold_seed = config.base_seed + fold
    split = stratified_split(manifest, seed=fold_seed)
    data = DataSplit(train_x=images[split.train], train_y=labels[split.train],
                     val_x=images[split.val], val_y=labels[split.val])
    run_config = dataclasses.replace(
        config.train, seed=derive_seed(fold_seed, entry.encoder_id))
    checkpoint, history = train_run(entry.spec, data, run_config)
    weights = restore_weights(entry.spec, checkpoint.weights)
    test_x, test_y = images[split.test], labels[split.test]
    scores = predict_scores(entry.spec, weights, test_x)
    rr = RunResult(encoder_id=entry.encoder_id, seed=fold_seed, fold=fold,
                   labels=[int(v) for v in test_y],
                   predicted=[int(v) for v in scores.argmax(axis=1)],
                   scores=scores)
    return rr, checkpoint, history


def _run_job(config_path: str, encoder_id: str, fold: int, out_dir: str) -> str:
    """Worker entry: self-contained (re-reads config and data), writes files."""
    config = load_config(config_path)
    manifest = build_manifest(config.dataset)
    images, labels = materialize(manifest, config.dataset.image_size)
    entry = next(e for e in config.roster if e.encoder_id == encoder_id)
    rr, checkpoint, history = execute_run(config, images, labels, manifest,
                                          entry, fold)
    base = os.path.join(out_dir, f"{encoder_id}-fold{fold}")
    save_run_result(base + ".result", rr)
    save_checkpoint(base + ".ckpt", entry.spec, checkpoint.weights)
    with open(base + ".history", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(history_lines(history))
    return base


# ---------------------------------------------------------------------------
# report

@dataclass
class ReportRow:
    encoder_type: str
    encoder_id: str
    param_count: int
    auc: MetricSummary
    acc: MetricSummary


@dataclass
class Report:
    rows: list
    config_digest: str
    fold_seeds: list
    dataset_name: str


def format_param_count(count: int) -> str:
    if count >= 1_000_000:
        return f"{count / 1e6:.1f}M"
    return f"{count / 1e3:.1f}K"


def build_report(results_dir: str) -> Report:
    results = load_all_results(results_dir)
    if not results:
        raise ConfigError(f"no run results in {results_dir}")
    config = load_config(os.path.join(results_dir, CONFIG_COPY))
    digest = config_hash(os.path.join(results_dir, CONFIG_COPY))
    by_encoder: dict = {}
    for rr in results:
        by_encoder.setdefault(rr.encoder_id, []).append(rr)
    rows = []
    for entry in config.roster:
        runs = sorted(by_encoder.get(entry.encoder_id, []),
                      key=lambda r: r.fold)
        if not runs:
            raise ConfigError(f"no results for encoder {entry.encoder_id}")
        _, arrays = load_checkpoint(
            os.path.join(results_dir, f"{entry.encoder_id}-fold0.ckpt"))
        count = sum(int(np.prod(a.shape)) if a.ndim else 1
                    for a in arrays.values())
        rows.append(ReportRow(
            encoder_type=ENCODER_TYPE_LABELS[entry.spec.kind],
            encoder_id=entry.encoder_id,
            param_count=count,
            auc=aggregate_runs([ovr_auc(r) for r in runs]),
            acc=aggregate_runs([accuracy(r) for r in runs]),
        ))
    if config.dataset.source == "synthetic":
        name = (f"synthetic-{config.dataset.classes}"
                f"x{config.dataset.num_per_class}")
    else:
        name = config.dataset.path or ""
    return Report(rows=rows, config_digest=digest,
                  fold_seeds=config.fold_seeds(), dataset_name=name)


def render_markdown(report: Report) -> str:
    lines = ["# Benchmark Report", ""]
    lines.append(f"config_hash: {report.config_digest}")
    lines.append(f"dataset: {report.dataset_name}")
    lines.append("fold_seeds: " + ",".join(str(s) for s in report.fold_seeds))
    lines.append("")
    lines.append("| Encoder Type | Encoder | # Params | AUC | ACC |")
    lines.append("|---|---|---|---|---|")
    for row in report.rows:
        lines.append(
            f"| {row.encoder_type} | {row.encoder_id} "
            f"| {format_param_count(row.param_count)} "
            f"| {format_mean_std(row.auc, scale=100.0)} "
            f"| {format_mean_std(row.acc, scale=100.0)} |")
    return "\n".join(lines) + "\n"


def render_csv(report: Report) -> str:
    lines = ["Encoder Type,Encoder,# Params,AUC,ACC"]
    for row in report.rows:
        lines.append(",".join([
            row.encoder_type, row.encoder_id,
            format_param_count(row.param_count),
            format_mean_std(row.auc, scale=100.0),
            format_mean_std(row.acc, scale=100.0)]))
    return "\n".join(lines) + "\n"


def report_embedded_hash(report_path: str) -> Optional[str]:
    with open(report_path, "r", encoding="utf-8") as fh:
        for ln in fh:
            if ln.startswith("config_hash: "):
                return ln.split(": ", 1)[1].strip()
    return None


# ---------------------------------------------------------------------------
# benchmark command

def _read_state(out_dir: str) -> set:
    import json

    path = os.path.join(out_dir, STATE_FILE)
    if not os.path.exists(path):
        return set()
    with open(path, "r", encoding="utf-8") as fh:
        return {tuple(item) for item in json.load(fh)["completed"]}


def _write_state(out_dir: str, completed: set) -> None:
    import json

    path = os.path.join(out_dir, STATE_FILE)
    payload = {"completed": sorted([list(c) for c in completed])}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def run_benchmark(config_path: str, out_dir: Optional[str] = None,
                  workers: Optional[int] = None,
                  log=lambda msg: None) -> str:
    """Run the full protocol; returns the output directory.

    A failed run leaves ``state.json`` behind so a rerun skips the
    completed (encoder, fold) pairs.
    """
    config = load_config(config_path)
    out_dir = out_dir or config.out_dir
    workers = workers if workers is not None else config.workers
    os.makedirs(out_dir, exist_ok=True)
    with open(config_path, "rb") as src:
        config_bytes = src.read()
    with open(os.path.join(out_dir, CONFIG_COPY), "wb") as dst:
        dst.write(config_bytes)
    copied_config = os.path.join(out_dir, CONFIG_COPY)

    jobs = [(entry.encoder_id, fold)
            for fold in range(config.n_seeds)
            for entry in config.roster]
    completed = {(str(e), int(f)) for e, f in _read_state(out_dir)}
    pending = [j for j in jobs if j not in completed]

    try:
        if workers > 1 and len(pending) > 1:
            import concurrent.futures as cf

            with cf.ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {
                    pool.submit(_run_job, copied_config, enc, fold, out_dir):
                    (enc, fold) for enc, fold in pending}
                for fut in cf.as_completed(futures):
                    fut.result()
                    completed.add(futures[fut])
                    log(f"finished {futures[fut][0]} fold {futures[fut][1]}")
        else:
            for enc, fold in pending:
                _run_job(copied_config, enc, fold, out_dir)
                completed.add((enc, fold))
                log(f"finished {enc} fold {fold}")
    except Exception:
        _write_state(out_dir, completed)
        raise

    state_path = os.path.join(out_dir, STATE_FILE)
    if os.path.exists(state_path):
        os.remove(state_path)
    report = build_report(out_dir)
    with open(os.path.join(out_dir, REPORT_FILE), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(render_markdown(report))
    return out_dir


# ---------------------------------------------------------------------------
# compare command

def render_significance(matrix: SignificanceMatrix) -> str:
    ids = matrix.encoder_ids
    width = max(len(e) for e in ids)
    lines = ["pairwise p-values (paired t-test on per-sample correctness)", ""]
    header = " " * (width + 2) + "  ".join(f"{e:>{width}}" for e in ids)
    lines.append(header)
    for i, e in enumerate(ids):
        cells = "  ".join(f"{matrix.p_values[i, j]:>{width}.4f}"
                          for j in range(len(ids)))
        lines.append(f"{e:>{width}}  {cells}")
    lines.append("")
    verdict_lines = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if matrix.verdicts[i][j] == "a_wins":
                winner, loser = ids[i], ids[j]
            elif matrix.verdicts[i][j] == "b_wins":
                winner, loser = ids[j], ids[i]
            else:
                continue
            verdict_lines.append(
                f"{winner} outperforms {loser} "
                f"(p={matrix.p_values[i, j]:.4g})")
    lines += verdict_lines if verdict_lines else ["no significant differences"]
    return "\n".join(lines) + "\n"


def run_compare(results_dir: str, alpha: float = 0.05) -> str:
    """Build, persist, and return the significance text for a results dir."""
    report_path = os.path.join(results_dir, REPORT_FILE)
    if os.path.exists(report_path):
        embedded = report_embedded_hash(report_path)
        actual = config_hash(os.path.join(results_dir, CONFIG_COPY))
        if embedded != actual:
            raise ConfigError(
                f"report hash {embedded} does not match config copy "
                f"({actual}); refusing to compare")
    results = load_all_results(results_dir)
    if len({r.encoder_id for r in results}) < 2:
        raise ConfigError("compare needs results from >= 2 encoders")
    matrix = significance_matrix(results, threshold=alpha)
    text = render_significance(matrix)
    with open(os.path.join(results_dir, "significance.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text
