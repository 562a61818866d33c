"""Two-stage training: align labeled source subjects, then adapt to an
unlabeled target with confident pseudo-labels refreshed every M epochs.

Stage 1 minimizes mean per-subject cross-entropy through the shared source
head plus a weighted pairwise discrepancy between per-subject minibatch
features. Stage 2 keeps the source supervision, adds cross-entropy of the
target head on confident pseudo-labeled samples, and a discrepancy term
between all pooled source rows and the confident target rows. The five
protocol modes (source_only, source_combined_uda, msda, msda_topk, oracle)
are dispatched by run_protocol.

Determinism: every run derives its generators from (seed, stage, epoch), so
identical configs give bitwise-identical traces and metrics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .acpl import PseudoLabelSet, TauSchedule, predict_pair, select_confident, tau_at
from .data import SubjectDomain, merge_domains, sample_multi_domain_batch
from .errors import TrainingError, ValidationError
from .mmd import KernelConfig, median_heuristic, mmd_biased, mmd_gradient, rank_sources_by_mmd
from .nn_core import (
    ModelState,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
    sgd_step,
    softmax,
    with_target_head_from_source,
)

log = logging.getLogger("subadapt")

MODES = ("source_only", "source_combined_uda", "msda", "msda_topk", "oracle")

LOG_COLUMNS = ("epoch", "loss_total", "loss_ce_s", "loss_ce_t", "loss_mmd", "tau", "confident_count")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "msda"
    lr: float = 1e-4
    batch_size: int = 16
    lambda_mmd: float = 1.0
    epochs_stage1: int = 60
    epochs_stage2: int = 60
    pl_refresh_M: int = 10
    tau_schedule: TauSchedule = field(default_factory=TauSchedule)
    top_k: int | None = None
    seed: int = 0
    source_pair_mode: str = "all_pairs"  # "all_pairs" | "random_pair"
    stage2_mmd_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if not self.lr > 0.0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_mmd < 0.0:
            raise ValidationError(f"lambda_mmd must be >= 0, got {self.lambda_mmd}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.pl_refresh_M < 1:
            raise ValidationError(f"pl_refresh_M must be >= 1, got {self.pl_refresh_M}")
        if self.source_pair_mode not in ("all_pairs", "random_pair"):
            raise ValidationError(f"unknown source_pair_mode {self.source_pair_mode!r}")
        if self.stage2_mmd_weight < 0.0:
            raise ValidationError(f"stage2_mmd_weight must be >= 0, got {self.stage2_mmd_weight}")
        if self.top_k is not None and self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")


def parse_train_config(raw: dict) -> TrainConfig:
    """Build a TrainConfig from a plain dict; unknown keys are hard errors."""
    if not isinstance(raw, dict):
        raise ValidationError("train config must be a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown train config keys: {unknown}")
    kwargs = dict(raw)
    if "tau_schedule" in kwargs:
        ts = kwargs["tau_schedule"]
        if not isinstance(ts, dict):
            raise ValidationError("tau_schedule must be an object")
        ts_known = {f.name for f in fields(TauSchedule)}
        ts_unknown = sorted(set(ts) - ts_known)
        if ts_unknown:
            raise ValidationError(f"unknown tau_schedule keys: {ts_unknown}")
        kwargs["tau_schedule"] = TauSchedule(**ts)
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed config {p}: {e}") from None
    return parse_train_config(raw)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


@dataclass
class LogRow:
    epoch: int
    loss_total: float
    loss_ce_s: float
    loss_ce_t: float
    loss_mmd: float
    tau: float | None
    confident_count: int | None


def write_log_csv(rows: list[LogRow], path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        tau = "" if r.tau is None else repr(float(r.tau))
        count = "" if r.confident_count is None else str(int(r.confident_count))
        lines.append(
            f"{r.epoch},{repr(r.loss_total)},{repr(r.loss_ce_s)},{repr(r.loss_ce_t)},"
            f"{repr(r.loss_mmd)},{tau},{count}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: list[float]
    loss_trace: list[float] = field(default_factory=list)
    pl_accuracy_trace: list[float] | None = None
    selected_count_trace: list[int] | None = None


@dataclass
class StageResult:
    model: ModelState
    log_rows: list[LogRow]

    @property
    def loss_trace(self) -> list[float]:
        return [r.loss_total for r in self.log_rows]


@dataclass
class AdaptResult(StageResult):
    selected_count_trace: list[int] = field(default_factory=list)
    pl_accuracy_trace: list[float] = field(default_factory=list)


# generator derivation: (seed, purpose tag, epoch); keeps a run reproducible
# and makes stage 2 epochs line up with a longer stage-1 run when needed
def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def _epoch_rng(seed: int, global_epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, global_epoch])


def _bw_seed(seed: int, global_epoch: int):
    return [seed, 2, global_epoch]


def _check_labeled_sources(sources: list[SubjectDomain]) -> None:
    if not sources:
        raise ValidationError("need at least one source domain")
    for s in sources:
        if s.labels is None:
            raise ValidationError(f"source domain {s.subject_id} is unlabeled")


def _num_classes(sources: list[SubjectDomain]) -> int:
    c = 1 + max(int(s.labels.max()) for s in sources)
    return max(c, 2)


def _steps_per_epoch(domains: list[SubjectDomain], batch_size: int) -> int:
    return max(1, math.ceil(max(d.num_samples for d in domains) / batch_size))


def _train_epochs(
    model: ModelState,
    domains: list[SubjectDomain],
    cfg: TrainConfig,
    start_epoch: int,
    num_epochs: int,
) -> tuple[ModelState, list[LogRow]]:
    """Supervised epochs over labeled domains through the source head, with
    the pairwise feature discrepancy term when there are >= 2 domains."""
    n_domains = len(domains)
    use_mmd = n_domains >= 2 and cfg.lambda_mmd > 0.0
    steps = _steps_per_epoch(domains, cfg.batch_size)
    rows = []
    for e in range(num_epochs):
        g_epoch = start_epoch + e
        rng = _epoch_rng(cfg.seed, g_epoch)
        sigma = None
        ep_ce = ep_mmd = ep_total = 0.0
        for step in range(steps):
            batches = sample_multi_domain_batch(domains, cfg.batch_size, rng)
            x = np.vstack([b.samples for b in batches])
            slices = [
                slice(i * cfg.batch_size, (i + 1) * cfg.batch_size) for i in range(n_domains)
            ]
            if use_mmd and cfg.source_pair_mode == "random_pair":
                pick = rng.choice(n_domains, size=2, replace=False)
                pairs = [tuple(sorted(int(v) for v in pick))]
            elif use_mmd:
                pairs = [(i, j) for i in range(n_domains) for j in range(i + 1, n_domains)]
            else:
                pairs = []

            features = forward_features(model, x)
            probs = softmax(forward_logits(model.source_head, features))
            grad_logits = np.zeros_like(probs)
            loss_ce = 0.0
            for i, sl in enumerate(slices):
                ce_i, g_i = cross_entropy(probs[sl], batches[i].labels)
                loss_ce += ce_i / n_domains
                grad_logits[sl] = g_i / n_domains

            gfeat = np.zeros_like(features)
            loss_mmd = 0.0
            if pairs:
                if sigma is None:
                    sigma = median_heuristic(features, _bw_seed(cfg.seed, g_epoch))
                kc = KernelConfig(bandwidth=sigma)
                scale = cfg.lambda_mmd / len(pairs)
                for i, j in pairs:
                    fi, fj = features[slices[i]], features[slices[j]]
                    loss_mmd += scale * mmd_biased(fi, fj, kc).value
                    gi, gj = mmd_gradient(fi, fj, kc)
                    gfeat[slices[i]] += scale * gi
                    gfeat[slices[j]] += scale * gj

            total = loss_ce + loss_mmd
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {g_epoch} step {step}: "
                    f"ce={loss_ce}, mmd={loss_mmd}"
                )
            grads = backward(model, x, gfeat, grad_source_logits=grad_logits)
            model = sgd_step(model, grads, cfg.lr)
            ep_ce += loss_ce
            ep_mmd += loss_mmd
            ep_total += total
        rows.append(
            LogRow(g_epoch, ep_total / steps, ep_ce / steps, 0.0, ep_mmd / steps, None, None)
        )
    return model, rows


def train_source_alignment(cfg: TrainConfig, sources: list[SubjectDomain]) -> StageResult:
    """Stage 1: train the extractor and source head on labeled subjects."""
    _check_labeled_sources(sources)
    num_classes = _num_classes(sources)
    model = init_model(sources[0].samples.shape[1], num_classes, _init_rng(cfg.seed))
    model, rows = _train_epochs(model, sources, cfg, 0, cfg.epochs_stage1)
    return StageResult(model=model, log_rows=rows)


def _sample_confident_batch(
    target: SubjectDomain, pls: PseudoLabelSet, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    n = len(pls)
    if n >= batch_size:
        pick = rng.choice(n, size=batch_size, replace=False)
    else:
        pick = rng.integers(0, n, size=batch_size)
    return target.samples[pls.selected_indices[pick]], pls.labels[pick]


def adapt_target(
    cfg: TrainConfig,
    model: ModelState,
    sources: list[SubjectDomain],
    target: SubjectDomain,
    target_labels: np.ndarray | None = None,
) -> AdaptResult:
    """Stage 2: adapt a stage-1 model to one unlabeled target subject.

    Pseudo-labels are regenerated at epoch 0 and every pl_refresh_M epochs
    with the threshold from the decay schedule (stage-2 epoch counter). An
    empty confident set skips the target terms for the interval, with a
    warning; training never aborts for that reason. `target_labels` is
    optional hidden ground truth used only to log pseudo-label accuracy.
    """
    _check_labeled_sources(sources)
    if target.role != "target" or target.labels is not None:
        raise ValidationError(f"{target.subject_id}: stage 2 expects an unlabeled target domain")
    model = with_target_head_from_source(model)
    n_src = len(sources)
    steps = _steps_per_epoch(sources, cfg.batch_size)
    rows: list[LogRow] = []
    selected_counts: list[int] = []
    pl_accs: list[float] = []
    pls: PseudoLabelSet | None = None
    tau = tau_at(cfg.tau_schedule, 0)

    for e in range(cfg.epochs_stage2):
        g_epoch = cfg.epochs_stage1 + e
        rng = _epoch_rng(cfg.seed, g_epoch)
        if e % cfg.pl_refresh_M == 0:
            tau = tau_at(cfg.tau_schedule, e)
            p, p_hat = predict_pair(model, target.samples, target.image_height, target.image_width)
            pls = select_confident(p, p_hat, tau)
            selected_counts.append(len(pls))
            if target_labels is not None and len(pls) > 0:
                truth = np.asarray(target_labels)[pls.selected_indices]
                pl_accs.append(float(np.mean(pls.labels == truth)))
            else:
                pl_accs.append(float("nan"))
            if len(pls) == 0:
                log.warning(
                    "no confident target samples at tau=%.2f (stage-2 epoch %d); "
                    "target terms skipped until the next refresh",
                    tau,
                    e,
                )
        has_target = pls is not None and len(pls) > 0

        sigma = None
        ep_ce_s = ep_ce_t = ep_mmd = ep_total = 0.0
        for step in range(steps):
            batches = sample_multi_domain_batch(sources, cfg.batch_size, rng)
            parts = [b.samples for b in batches]
            if has_target:
                tx, ty = _sample_confident_batch(target, pls, cfg.batch_size, rng)
                parts.append(tx)
            x = np.vstack(parts)
            src_rows = n_src * cfg.batch_size
            src_slices = [
                slice(i * cfg.batch_size, (i + 1) * cfg.batch_size) for i in range(n_src)
            ]
            tgt_slice = slice(src_rows, src_rows + cfg.batch_size)

            features = forward_features(model, x)
            probs_s = softmax(forward_logits(model.source_head, features[:src_rows]))
            grad_logits_s = np.zeros((features.shape[0], probs_s.shape[1]))
            loss_ce_s = 0.0
            for i, sl in enumerate(src_slices):
                ce_i, g_i = cross_entropy(probs_s[sl], batches[i].labels)
                loss_ce_s += ce_i / n_src
                grad_logits_s[sl] = g_i / n_src

            gfeat = np.zeros_like(features)
            loss_ce_t = 0.0
            loss_mmd = 0.0
            grad_logits_t = None
            if has_target:
                probs_t = softmax(forward_logits(model.target_head, features[tgt_slice]))
                loss_ce_t, g_t = cross_entropy(probs_t, ty)
                grad_logits_t = np.zeros((features.shape[0], probs_t.shape[1]))
                grad_logits_t[tgt_slice] = g_t
                if cfg.stage2_mmd_weight > 0.0:
                    if sigma is None:
                        sigma = median_heuristic(features, _bw_seed(cfg.seed, g_epoch))
                    kc = KernelConfig(bandwidth=sigma)
                    fs, ft = features[:src_rows], features[tgt_slice]
                    loss_mmd = cfg.stage2_mmd_weight * mmd_biased(fs, ft, kc).value
                    gs, gt = mmd_gradient(fs, ft, kc)
                    gfeat[:src_rows] += cfg.stage2_mmd_weight * gs
                    gfeat[tgt_slice] += cfg.stage2_mmd_weight * gt

            total = loss_ce_s + loss_ce_t + loss_mmd
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at stage-2 epoch {e} step {step}: "
                    f"ce_s={loss_ce_s}, ce_t={loss_ce_t}, mmd={loss_mmd}"
                )
            grads = backward(
                model,
                x,
                gfeat,
                grad_source_logits=grad_logits_s,
                grad_target_logits=grad_logits_t,
            )
            model = sgd_step(model, grads, cfg.lr)
            ep_ce_s += loss_ce_s
            ep_ce_t += loss_ce_t
            ep_mmd += loss_mmd
            ep_total += total
        rows.append(
            LogRow(
                g_epoch,
                ep_total / steps,
                ep_ce_s / steps,
                ep_ce_t / steps,
                ep_mmd / steps,
                tau,
                len(pls) if pls is not None else 0,
            )
        )
    return AdaptResult(
        model=model,
        log_rows=rows,
        selected_count_trace=selected_counts,
        pl_accuracy_trace=pl_accs,
    )


def evaluate(model: ModelState, head: str, labeled_eval: SubjectDomain) -> Metrics:
    """Argmax accuracy of the requested head ('source' or 'target') on a
    labeled evaluation domain, plus per-class accuracies."""
    if labeled_eval.labels is None:
        raise ValidationError(f"{labeled_eval.subject_id}: evaluation set must be labeled")
    logits = forward_logits(model.head(head), forward_features(model, labeled_eval.samples))
    preds = logits.argmax(axis=1)
    truth = labeled_eval.labels
    accuracy = float(np.mean(preds == truth))
    per_class = []
    for c in range(model.num_classes):
        mask = truth == c
        per_class.append(float(np.mean(preds[mask] == c)) if mask.any() else float("nan"))
    return Metrics(accuracy=accuracy, per_class_accuracy=per_class)


def _labeled_target(target: SubjectDomain, target_labels) -> SubjectDomain:
    if target_labels is None:
        raise ValidationError("oracle mode needs ground-truth labels for the target samples")
    return SubjectDomain(
        subject_id=target.subject_id,
        samples=target.samples.copy(),
        labels=np.asarray(target_labels, dtype=np.int64),
        image_height=target.image_height,
        image_width=target.image_width,
        role="source",
    )


def run_protocol(
    cfg: TrainConfig,
    sources: list[SubjectDomain],
    target: SubjectDomain,
    target_eval: SubjectDomain,
    target_labels: np.ndarray | None = None,
) -> Metrics:
    """Run one protocol mode end to end and evaluate on the held-out set.

    Final evaluation uses the target head when stage 2 ran (the adaptation
    modes) and the source head otherwise (source_only, oracle).
    """
    _check_labeled_sources(sources)
    mode = cfg.mode

    if mode == "source_only":
        s1 = train_source_alignment(cfg, sources)
        metrics = evaluate(s1.model, "source", target_eval)
        metrics.loss_trace = s1.loss_trace
        return metrics

    if mode == "oracle":
        s1 = train_source_alignment(cfg, sources)
        labeled = _labeled_target(target, target_labels)
        model, rows = _train_epochs(s1.model, [labeled], cfg, cfg.epochs_stage1, cfg.epochs_stage2)
        metrics = evaluate(model, "source", target_eval)
        metrics.loss_trace = s1.loss_trace + [r.loss_total for r in rows]
        return metrics

    if mode == "source_combined_uda":
        train_sources = [merge_domains(sources)]
    elif mode == "msda":
        train_sources = list(sources)
    elif mode == "msda_topk":
        if cfg.top_k is None:
            raise ValidationError("msda_topk mode requires top_k")
        if cfg.top_k > len(sources):
            raise ValidationError(
                f"top_k={cfg.top_k} exceeds the {len(sources)} available sources"
            )
        probe = train_source_alignment(cfg, sources)
        source_feats = {
            s.subject_id: forward_features(probe.model, s.samples) for s in sources
        }
        target_feats = forward_features(probe.model, target.samples)
        keep = set(rank_sources_by_mmd(target_feats, source_feats, cfg.top_k))
        train_sources = [s for s in sources if s.subject_id in keep]
    else:  # pragma: no cover - modes validated by TrainConfig
        raise ValidationError(f"unhandled mode {mode!r}")

    s1 = train_source_alignment(cfg, train_sources)
    adapted = adapt_target(cfg, s1.model, train_sources, target, target_labels)
    metrics = evaluate(adapted.model, "target", target_eval)
    metrics.loss_trace = s1.loss_trace + adapted.loss_trace
    metrics.pl_accuracy_trace = adapted.pl_accuracy_trace
    metrics.selected_count_trace = adapted.selected_count_trace
    return metrics
