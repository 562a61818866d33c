"""Augmented confident pseudo-labels.

Each unlabeled target sample is scored twice with the source classifier:
once as-is and once horizontally flipped. A sample is kept only when the
class-wise average of the two probability rows has a maximum entry strictly
above the confidence threshold tau; its label is the argmax of the
elementwise maximum of the two rows. The threshold follows a stepwise decay
schedule over adaptation epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import augment_hflip
from .errors import ShapeError, ValidationError
from .nn_core import ModelState, as_matrix, forward_features, forward_logits, softmax


@dataclass(frozen=True)
class TauSchedule:
    """Stepwise-decaying confidence threshold, floored at tau_min."""

    tau_init: float = 0.90
    decay: float = 0.02
    period_epochs: int = 20
    tau_min: float = 0.50

    def __post_init__(self):
        if not 0.0 < self.tau_init <= 1.0:
            raise ValidationError(f"tau_init must be in (0, 1], got {self.tau_init}")
        if self.decay < 0.0:
            raise ValidationError(f"decay must be >= 0, got {self.decay}")
        if self.period_epochs < 1:
            raise ValidationError(f"period_epochs must be >= 1, got {self.period_epochs}")
        if not 0.0 <= self.tau_min <= self.tau_init:
            raise ValidationError(
                f"tau_min must be in [0, tau_init={self.tau_init}], got {self.tau_min}"
            )


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    """Threshold in effect at a given epoch; non-increasing in epoch."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    steps = epoch // schedule.period_epochs
    return max(schedule.tau_min, schedule.tau_init - schedule.decay * steps)


@dataclass
class PseudoLabelSet:
    """Confident target subset: indices (strictly increasing), assigned
    labels, the averaged confidence that admitted each sample, and which
    version (original or augmented) supplied the winning probability."""

    selected_indices: np.ndarray
    labels: np.ndarray
    avg_confidence: np.ndarray
    chosen_version: list[str]

    def __len__(self) -> int:
        return len(self.selected_indices)


def predict_pair(
    model: ModelState, target_samples, image_height: int, image_width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Source-head probabilities for each sample and its mirrored twin.

    Rows of the two outputs align index-for-index with target_samples.
    """
    x = as_matrix(target_samples, "target_samples")
    x_aug = augment_hflip(x, image_height, image_width)
    p = softmax(forward_logits(model.source_head, forward_features(model, x)))
    p_hat = softmax(forward_logits(model.source_head, forward_features(model, x_aug)))
    return p, p_hat


def select_confident(P, P_hat, tau: float) -> PseudoLabelSet:
    """Keep samples whose averaged probability peaks strictly above tau.

    For a kept sample the label is argmax of elementwise max(p, p_hat);
    argmax ties go to the lowest class index, and the original version wins
    ties over the augmented one.
    """
    p = as_matrix(P, "P")
    p_hat = as_matrix(P_hat, "P_hat")
    if p.shape != p_hat.shape:
        raise ShapeError(f"P shape {p.shape} != P_hat shape {p_hat.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")

    avg = 0.5 * (p + p_hat)
    avg_max = avg.max(axis=1)
    keep = avg_max > tau
    indices = np.flatnonzero(keep)

    p_star = np.maximum(p[indices], p_hat[indices])
    labels = p_star.argmax(axis=1)
    original_won = p[indices, labels] >= p_hat[indices, labels]
    versions = ["original" if ow else "augmented" for ow in original_won]
    return PseudoLabelSet(
        selected_indices=indices.astype(np.int64),
        labels=labels.astype(np.int64),
        avg_confidence=avg_max[indices],
        chosen_version=versions,
    )


def write_pseudo_label_csv(pls: PseudoLabelSet, path) -> None:
    """CSV export: index,label,avg_confidence,chosen_version."""
    lines = ["index,label,avg_confidence,chosen_version"]
    for i in range(len(pls)):
        lines.append(
            f"{int(pls.selected_indices[i])},{int(pls.labels[i])},"
            f"{repr(float(pls.avg_confidence[i]))},{pls.chosen_version[i]}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
