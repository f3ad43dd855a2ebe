"""Frame-level training objectives.

All losses are means over the frames in the batch and return both the
scalar value and its gradient with respect to the network logits, ready
to feed :func:`hdnn.network.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softmax_with_temperature

# floor inside log() so a zero posterior yields a large finite loss
_LOG_FLOOR = np.finfo(np.float64).tiny


@dataclass
class LossResult:
    value: float
    dlogits: np.ndarray  # N x output_dim


@dataclass
class SoftTargets:
    """Per-frame teacher posteriors used as pseudo labels.

    ``temperature`` records the softmax temperature the teacher used; the
    student side must train with the same value.
    """

    posteriors: np.ndarray  # N x output_dim
    temperature: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.posteriors, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(f"soft targets must be a 2-d batch, got shape {p.shape}")
        if (p < 0).any():
            raise ValueError("soft targets contain negative entries")
        sums = p.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("soft target rows do not sum to 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.posteriors = p


def _check_labels(labels, num_frames: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (num_frames,):
        raise ValueError(f"labels must have shape ({num_frames},), got {y.shape}")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return y.astype(np.intp)


def _normalizer(num_frames: int, frame_weights) -> tuple[np.ndarray, float]:
    if frame_weights is None:
        w = np.ones(num_frames, dtype=np.float64)
    else:
        w = np.asarray(frame_weights, dtype=np.float64)
        if w.shape != (num_frames,):
            raise ValueError("frame_weights must have one entry per frame")
    total = float(w.sum())
    if total <= 0:
        raise ValueError("frame weights must have positive total mass")
    return w, total


def ce_loss(posteriors: np.ndarray, labels, frame_weights=None) -> LossResult:
    """Cross-entropy against hard state labels.

    ``posteriors`` must be temperature-1 softmax outputs; the returned
    gradient is the fused softmax/CE form (posterior minus one-hot,
    normalized over frames).
    """
    y = np.asarray(posteriors, dtype=np.float64)
    n, k = y.shape
    labels = _check_labels(labels, n, k)
    w, total = _normalizer(n, frame_weights)
    picked = y[np.arange(n), labels]
    value = float(-(w * np.log(np.maximum(picked, _LOG_FLOOR))).sum() / total)
    dlogits = y * (w / total)[:, None]
    dlogits[np.arange(n), labels] -= w / total
    return LossResult(value, dlogits)


def kd_loss(student_logits: np.ndarray, teacher_targets: SoftTargets,
            temperature: float, frame_weights=None) -> LossResult:
    """Teacher-student cross-entropy on temperature-smoothed posteriors.

    Both sides use the same temperature: the student posterior is
    softmax(logits / temperature) and must match the temperature the
    teacher targets were produced with. The gradient carries the 1/T
    factor from differentiating the tempered softmax.
    """
    if float(teacher_targets.temperature) != float(temperature):
        raise ValueError(
            f"teacher targets were computed at T={teacher_targets.temperature}, "
            f"loss called with T={temperature}")
    z = np.asarray(student_logits, dtype=np.float64)
    soft = teacher_targets.posteriors
    if z.shape != soft.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {soft.shape}")
    n = z.shape[0]
    w, total = _normalizer(n, frame_weights)
    y = softmax_with_temperature(z, temperature)
    frame_ce = -(soft * np.log(np.maximum(y, _LOG_FLOOR))).sum(axis=1)
    value = float((w * frame_ce).sum() / total)
    dlogits = (y - soft) * (w / (total * temperature))[:, None]
    return LossResult(value, dlogits)


def hybrid_loss(student_logits: np.ndarray, teacher_targets: SoftTargets,
                labels, q: float, temperature: float,
                frame_weights=None) -> LossResult:
    """Interpolation of the teacher-student loss with q times the CE loss.

    The CE term always evaluates at temperature 1 on the same logits;
    ground-truth labels are only required when q > 0, so q = 0 degrades
    to the pure teacher-student loss (bit for bit).
    """
    if q < 0:
        raise ValueError(f"q must be non-negative, got {q}")
    kd = kd_loss(student_logits, teacher_targets, temperature, frame_weights)
    if q == 0:
        return kd
    if labels is None:
        raise ValueError("hybrid loss with q > 0 requires hard labels")
    posteriors = softmax_with_temperature(np.asarray(student_logits, dtype=np.float64), 1.0)
    ce = ce_loss(posteriors, labels, frame_weights)
    return LossResult(kd.value + q * ce.value, kd.dlogits + q * ce.dlogits)
