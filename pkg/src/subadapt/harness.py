"""Config-driven experiment grids: every (mode, target, seed) cell runs the
full protocol, results are cached per cell, and CSV reports aggregate
seed-averaged accuracies per mode and target.

report.csv carries only deterministic fields so two runs of the same config
produce identical bytes; wall-clock times go to timings.csv.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .acpl import predict_pair, select_confident
from .data import Benchmark, DataSpec, make_benchmark
from .errors import ValidationError
from .nn_core import forward_features, forward_logits, softmax
from .trainer import (
    MODES,
    TrainConfig,
    parse_train_config,
    run_protocol,
    train_config_dict,
    train_source_alignment,
)

REPORT_COLUMNS = ("mode", "target_subject_id", "seed", "accuracy", "pl_accuracy_final", "status")
SUMMARY_COLUMNS = ("mode", "target_subject_id", "mean_accuracy", "num_cells")
TIMING_COLUMNS = ("mode", "target_subject_id", "seed", "wall_time_seconds")
PL_ABLATION_COLUMNS = (
    "target_subject_id",
    "seed",
    "plain_accuracy",
    "acpl_accuracy",
    "acpl_selected_count",
)
SCALING_COLUMNS = ("source_count", "target_subject_id", "seed", "accuracy", "wall_time_seconds")

SUMMARY_ALL = "ALL"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    modes: tuple[str, ...] = ("source_only", "source_combined_uda", "msda", "oracle")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        for m in self.modes:
            if m not in MODES:
                raise ValidationError(f"unknown mode {m!r}, expected one of {MODES}")


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a dict; unknown keys are hard errors."""
    if not isinstance(raw, dict):
        raise ValidationError("experiment config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown experiment config keys: {unknown}")
    kwargs = dict(raw)
    if "data" in kwargs:
        d = kwargs["data"]
        if not isinstance(d, dict):
            raise ValidationError("data must be an object")
        d_known = {f.name for f in fields(DataSpec)}
        d_unknown = sorted(set(d) - d_known)
        if d_unknown:
            raise ValidationError(f"unknown data config keys: {d_unknown}")
        kwargs["data"] = DataSpec(**d)
    if "train" in kwargs:
        kwargs["train"] = parse_train_config(kwargs["train"])
    if "modes" in kwargs:
        kwargs["modes"] = tuple(kwargs["modes"])
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
    return ExperimentConfig(**kwargs)


def load_experiment_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed config {p}: {e}") from None
    return parse_experiment_config(raw)


def experiment_config_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["modes"] = list(config.modes)
    d["seeds"] = list(config.seeds)
    return d


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that affects results (output_dir excluded)."""
    d = experiment_config_dict(config)
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ReportRow:
    mode: str
    target_subject_id: str
    seed: int
    accuracy: float | None
    pl_accuracy_final: float | None
    wall_time_seconds: float
    status: str = "ok"


def _cell_path(out: Path, mode: str, target_id: str, seed: int) -> Path:
    return out / "cells" / f"{mode}__{target_id}__{seed}.json"


def _cfg_for_cell(config: ExperimentConfig, mode: str, seed: int) -> TrainConfig:
    base = train_config_dict(config.train)
    base["mode"] = mode
    base["seed"] = seed
    return parse_train_config(base)


def run_cell(config: ExperimentConfig, benchmark: Benchmark, mode: str, target_idx: int, seed: int) -> ReportRow:
    """Run one (mode, target, seed) protocol cell and time it."""
    bundle = benchmark.targets[target_idx]
    cfg = _cfg_for_cell(config, mode, seed)
    start = time.perf_counter()
    try:
        metrics = run_protocol(
            cfg,
            benchmark.sources,
            bundle.adapt,
            bundle.eval_set,
            target_labels=bundle.adapt_labels,
        )
    except Exception as e:  # recorded, the grid keeps going
        return ReportRow(
            mode,
            bundle.subject_id,
            seed,
            None,
            None,
            time.perf_counter() - start,
            status=f"error: {type(e).__name__}: {e}",
        )
    wall = time.perf_counter() - start
    pl_final = None
    if metrics.pl_accuracy_trace:
        finite = [v for v in metrics.pl_accuracy_trace if not np.isnan(v)]
        pl_final = finite[-1] if finite else None
    return ReportRow(mode, bundle.subject_id, seed, metrics.accuracy, pl_final, wall)


def _cell_worker(config_json: str, mode: str, target_idx: int, seed: int) -> dict:
    config = parse_experiment_config(json.loads(config_json))
    benchmark = make_benchmark(config.data)
    return asdict(run_cell(config, benchmark, mode, target_idx, seed))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[list]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from e


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> Path:
    """Run every (mode, target, seed) cell; returns the report.csv path.

    Cells completed under the same config hash are skipped on rerun, so the
    grid is resumable for free. Cell failures are recorded in the report and
    do not stop the run.
    """
    out = Path(config.output_dir)
    _check_writable(out)
    (out / "cells").mkdir(exist_ok=True)
    chash = config_hash(config)
    benchmark = make_benchmark(config.data)
    target_ids = [b.subject_id for b in benchmark.targets]

    cells = [
        (mode, t_idx, seed)
        for mode in config.modes
        for t_idx in range(len(target_ids))
        for seed in config.seeds
    ]
    pending = []
    for mode, t_idx, seed in cells:
        path = _cell_path(out, mode, target_ids[t_idx], seed)
        if path.is_file():
            cached = json.loads(path.read_text(encoding="utf-8"))
            if cached.get("config_hash") == chash:
                continue
        pending.append((mode, t_idx, seed))

    if pending and jobs > 1:
        config_json = json.dumps(experiment_config_dict(config))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_cell_worker, config_json, mode, t_idx, seed)
                for mode, t_idx, seed in pending
            ]
            results = [f.result() for f in futures]
    else:
        results = [
            asdict(run_cell(config, benchmark, mode, t_idx, seed))
            for mode, t_idx, seed in pending
        ]
    for row in results:
        row["config_hash"] = chash
        path = _cell_path(out, row["mode"], row["target_subject_id"], row["seed"])
        path.write_text(json.dumps(row, indent=1) + "\n", encoding="utf-8")

    # assemble reports from cell files in canonical order
    report_rows = []
    timing_rows = []
    for mode, t_idx, seed in cells:
        tid = target_ids[t_idx]
        cached = json.loads(_cell_path(out, mode, tid, seed).read_text(encoding="utf-8"))
        report_rows.append(
            [mode, tid, seed, cached["accuracy"], cached["pl_accuracy_final"], cached["status"]]
        )
        timing_rows.append([mode, tid, seed, cached["wall_time_seconds"]])

    summary_rows = []
    for mode in config.modes:
        mode_accs = []
        for tid in target_ids:
            accs = [
                r[3]
                for r in report_rows
                if r[0] == mode and r[1] == tid and r[5] == "ok" and r[3] is not None
            ]
            if accs:
                summary_rows.append([mode, tid, float(np.mean(accs)), len(accs)])
                mode_accs.extend(accs)
        if mode_accs:
            summary_rows.append([mode, SUMMARY_ALL, float(np.mean(mode_accs)), len(mode_accs)])

    _write_csv(out / "report.csv", REPORT_COLUMNS, report_rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)
    _write_csv(out / "timings.csv", TIMING_COLUMNS, timing_rows)
    return out / "report.csv"


def all_cells_ok(report_path) -> bool:
    lines = Path(report_path).read_text(encoding="utf-8").strip().splitlines()[1:]
    return all(line.rsplit(",", 1)[-1] == "ok" for line in lines)


def read_summary(report_dir) -> dict[tuple[str, str], float]:
    """Map (mode, target_or_ALL) -> mean accuracy from summary.csv."""
    out = {}
    lines = (Path(report_dir) / "summary.csv").read_text(encoding="utf-8").strip().splitlines()
    for line in lines[1:]:
        mode, tid, mean_acc, _n = line.split(",")
        out[(mode, tid)] = float(mean_acc)
    return out


def ablation_pl(config: ExperimentConfig, tau: float = 0.90) -> Path:
    """Compare plain argmax pseudo-labels against the augmented confident
    rule on a stage-1 model, per target and seed; writes ablation_pl.csv."""
    out = Path(config.output_dir)
    _check_writable(out)
    benchmark = make_benchmark(config.data)
    rows = []
    for bundle in benchmark.targets:
        for seed in config.seeds:
            cfg = _cfg_for_cell(config, "msda", seed)
            s1 = train_source_alignment(cfg, benchmark.sources)
            p, p_hat = predict_pair(
                s1.model, bundle.adapt.samples, bundle.adapt.image_height, bundle.adapt.image_width
            )
            truth = bundle.adapt_labels
            plain_acc = float(np.mean(p.argmax(axis=1) == truth))
            pls = select_confident(p, p_hat, tau)
            if len(pls) > 0:
                acpl_acc = float(np.mean(pls.labels == truth[pls.selected_indices]))
            else:
                acpl_acc = None
            rows.append([bundle.subject_id, seed, plain_acc, acpl_acc, len(pls)])
    path = out / "ablation_pl.csv"
    _write_csv(path, PL_ABLATION_COLUMNS, rows)
    return path


def ablation_scaling(config: ExperimentConfig, source_counts: tuple[int, ...] = (2, 4, 8, 12)) -> Path:
    """Accuracy of the multi-source mode as the source count grows; source
    subsets are nested prefixes of the benchmark order."""
    benchmark = make_benchmark(config.data)
    if len(benchmark.sources) < max(source_counts):
        raise ValidationError(
            f"scaling ablation needs >= {max(source_counts)} sources, "
            f"got {len(benchmark.sources)}"
        )
    out = Path(config.output_dir)
    _check_writable(out)
    rows = []
    for count in source_counts:
        subset = benchmark.sources[:count]
        for bundle in benchmark.targets:
            for seed in config.seeds:
                cfg = _cfg_for_cell(config, "msda", seed)
                start = time.perf_counter()
                metrics = run_protocol(
                    cfg, subset, bundle.adapt, bundle.eval_set, target_labels=bundle.adapt_labels
                )
                wall = time.perf_counter() - start
                rows.append([count, bundle.subject_id, seed, metrics.accuracy, wall])
    path = out / "ablation_scaling.csv"
    _write_csv(path, SCALING_COLUMNS, rows)
    return path


def rank_sources_for_target(model, sources, target, k: int) -> list[str]:
    """Rank stored source domains by feature-space MMD distance to a target."""
    from .mmd import rank_sources_by_mmd

    feats = {s.subject_id: forward_features(model, s.samples) for s in sources}
    target_feats = forward_features(model, target.samples)
    return rank_sources_by_mmd(target_feats, feats, k)
