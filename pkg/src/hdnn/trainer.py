"""Optimization loops: CE training, distillation, sequence training, adaptation.

All loops share the same conventions: momentum is 0 during the first
epoch and the configured value afterwards, shuffling and initialization
draw from named substreams of the config seed, and every epoch emits an
EpochReport. Reruns with the same seed and config produce bit-identical
parameters and reports (timing aside).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .losses import LossResult, SoftTargets, ce_loss, hybrid_loss, kd_loss
from .network import (GATE_PARAM_NAMES, GradientSet, Network, NetworkConfig,
                      backward, build, forward, iter_gradients, iter_params,
                      zero_gradients)
from .numerics import Rng, STORAGE_DTYPE
from .sequence import Lattice, SmbrConfig, smbr_kd_objective, smbr_objective

LOSS_KINDS = ("ce", "kd", "hybrid", "smbr_kd")
SCHEDULES = ("constant", "halve_on_cv_stall")
SCOPES = ("all", "gates_only")
SMBR_REGULARIZERS = ("kd", "ce")


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    learning_rate: float
    max_epochs: int = 10
    momentum_after_first_epoch: float = 0.9
    minibatch_size: int = 256
    lr_schedule: str = "constant"
    seed: int = 0
    loss_kind: str = "ce"
    q: float = 0.0
    temperature: float = 1.0
    p: float = 0.0
    update_scope: str = "all"
    # use a raised temperature only on the teacher side (experimental;
    # the student then trains at temperature 1 on the flattened targets)
    teacher_only_temperature: bool = False
    smbr_regularizer: str = "kd"

    def __post_init__(self):
        if self.learning_rate < 0:
            # 0 is allowed as an explicit null update (useful for smoke tests)
            raise ValueError("learning_rate must be non-negative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.q < 0 or self.p < 0:
            raise ValueError("q and p must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.update_scope not in SCOPES:
            raise ValueError(f"unknown update_scope {self.update_scope!r}")
        if self.smbr_regularizer not in SMBR_REGULARIZERS:
            raise ValueError(f"unknown smbr_regularizer {self.smbr_regularizer!r}")


@dataclass
class EpochReport:
    epoch: int
    loss: float
    cv_frame_error: float | None
    seconds: float
    learning_rate: float
    expected_accuracy: float | None = None

    def to_json(self) -> str:
        record = {
            "epoch": self.epoch,
            "loss": self.loss,
            "cv_frame_error": self.cv_frame_error,
            "seconds": self.seconds,
            "learning_rate": self.learning_rate,
        }
        if self.expected_accuracy is not None:
            record["expected_accuracy"] = self.expected_accuracy
        return json.dumps(record)


def report_from_json(line: str) -> EpochReport:
    rec = json.loads(line)
    return EpochReport(
        epoch=rec["epoch"], loss=rec["loss"], cv_frame_error=rec["cv_frame_error"],
        seconds=rec["seconds"], learning_rate=rec["learning_rate"],
        expected_accuracy=rec.get("expected_accuracy"))


def write_reports(reports, path) -> None:
    """Line-delimited report stream, one JSON record per epoch."""
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(r.to_json() + "\n")


@dataclass
class FrameDataset:
    """Spliced feature rows with (optionally) aligned hard state labels."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d frame matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels must align one-to-one with feature rows")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SequenceExample:
    """One utterance ready for sequence training: spliced features,
    hypothesis lattice, and the reference state alignment."""

    features: np.ndarray
    lattice: Lattice | None
    alignment: np.ndarray


@dataclass
class MomentumState:
    velocity: GradientSet


def init_momentum(net: Network) -> MomentumState:
    return MomentumState(zero_gradients(net))


def sgd_step(net: Network, grads: GradientSet, state: MomentumState,
             lr: float, momentum: float, scope: str = "all") -> None:
    """One momentum-SGD update in place: v <- momentum*v - lr*g; p <- p + v.

    With scope="gates_only" every non-gate tensor (and its velocity) is
    left untouched, bit for bit.
    """
    if scope not in SCOPES:
        raise ValueError(f"unknown update scope {scope!r}")
    if scope == "gates_only" and not net.config.is_highway:
        raise ValueError("gates_only updates require a highway network")
    gvals = dict(iter_gradients(grads))
    vvals = dict(iter_gradients(state.velocity))
    for name, param in iter_params(net):
        if scope == "gates_only" and name not in GATE_PARAM_NAMES:
            continue
        v = vvals[name]
        v *= momentum
        v -= lr * gvals[name]
        param[...] = (param.astype(np.float64) + v).astype(param.dtype)


def posteriors(net: Network, features: np.ndarray, temperature: float = 1.0,
               chunk: int = 8192) -> np.ndarray:
    """Posterior rows for a (possibly large) frame matrix, evaluated in chunks."""
    parts = [forward(net, features[i:i + chunk], temperature).posteriors
             for i in range(0, len(features), chunk)]
    return np.vstack(parts)


def evaluate_frame_error(net: Network, data: FrameDataset) -> float:
    """Fraction of frames whose argmax posterior misses the reference state."""
    if data.labels is None:
        raise ValueError("frame error needs labeled data")
    pred = np.argmax(posteriors(net, data.features), axis=1)
    return float(np.mean(pred != data.labels))


def _epoch_momentum(cfg: TrainConfig, epoch: int) -> float:
    return 0.0 if epoch == 1 else cfg.momentum_after_first_epoch


def _next_lr(cfg: TrainConfig, lr: float, cv_err, best_cv: float) -> tuple[float, float]:
    if cfg.lr_schedule == "halve_on_cv_stall" and cv_err is not None:
        if cv_err < best_cv:
            return lr, cv_err
        return lr / 2.0, best_cv
    if cv_err is not None and cv_err < best_cv:
        best_cv = cv_err
    return lr, best_cv


def _frame_training_loop(net, train_data, cv_data, cfg, batch_loss_fn,
                         report_sink=None):
    """Shared minibatch loop; batch_loss_fn(trace, idx) -> LossResult."""
    n = train_data.num_frames
    if n == 0:
        raise ValueError("training corpus is empty")
    rng = Rng(cfg.seed)
    state = init_momentum(net)
    reports: list[EpochReport] = []
    lr = cfg.learning_rate
    best_cv = math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        momentum = _epoch_momentum(cfg, epoch)
        perm = rng.stream(f"shuffle/{epoch}").permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.minibatch_size):
            idx = perm[lo:lo + cfg.minibatch_size]
            trace = forward(net, train_data.features[idx], 1.0)
            loss = batch_loss_fn(trace, idx)
            grads = backward(net, trace, loss.dlogits)
            sgd_step(net, grads, state, lr, momentum, cfg.update_scope)
            total += loss.value * len(idx)
        cv_err = evaluate_frame_error(net, cv_data) if cv_data is not None else None
        report = EpochReport(epoch, total / n, cv_err,
                             time.perf_counter() - started, lr)
        reports.append(report)
        if report_sink is not None:
            report_sink(report)
        lr, best_cv = _next_lr(cfg, lr, cv_err, best_cv)
    return net, reports


def train_ce(net: Network, train_data: FrameDataset, cv_data: FrameDataset | None,
             cfg: TrainConfig, report_sink=None):
    """Cross-entropy training against hard labels."""
    if cfg.loss_kind != "ce":
        raise ValueError(f"train_ce requires loss_kind='ce', got {cfg.loss_kind!r}")
    if train_data.labels is None:
        raise ValueError("CE training requires labeled frames")

    def batch_loss(trace, idx):
        return ce_loss(trace.posteriors, train_data.labels[idx])

    return _frame_training_loop(net, train_data, cv_data, cfg, batch_loss, report_sink)


def distill(student_cfg: NetworkConfig, teacher: Network,
            train_data: FrameDataset, cv_data: FrameDataset | None,
            cfg: TrainConfig, dtype=STORAGE_DTYPE, report_sink=None):
    """Train a fresh student under the teacher's posterior supervision.

    The teacher is evaluated at the configured temperature on each
    minibatch and never updated. Ground-truth labels are needed only for
    the hybrid loss with q > 0, so unlabeled corpora distill fine.
    """
    if cfg.loss_kind not in ("kd", "hybrid"):
        raise ValueError("distillation requires loss_kind 'kd' or 'hybrid'")
    if teacher.config.output_dim != student_cfg.output_dim:
        raise ValueError("teacher and student must share the output state set")
    if teacher.config.input_dim != student_cfg.input_dim:
        raise ValueError("teacher and student must consume the same spliced input")
    q = cfg.q if cfg.loss_kind == "hybrid" else 0.0
    if q > 0 and train_data.labels is None:
        raise ValueError("hybrid loss with q > 0 requires a labeled corpus")
    student = build(student_cfg, Rng(cfg.seed), dtype)
    student_temp = 1.0 if cfg.teacher_only_temperature else cfg.temperature

    def batch_loss(trace, idx):
        teacher_post = forward(teacher, train_data.features[idx], cfg.temperature).posteriors
        targets = SoftTargets(teacher_post, student_temp)
        if q > 0:
            return hybrid_loss(trace.logits, targets, train_data.labels[idx],
                               q, student_temp)
        return kd_loss(trace.logits, targets, student_temp)

    return _frame_training_loop(student, train_data, cv_data, cfg, batch_loss,
                                report_sink)


def _sequence_regularizer(cfg: TrainConfig, trace, example, teacher) -> LossResult | None:
    if cfg.p == 0:
        return None
    if cfg.smbr_regularizer == "ce":
        return ce_loss(trace.posteriors, example.alignment)
    teacher_post = forward(teacher, example.features, cfg.temperature).posteriors
    targets = SoftTargets(teacher_post, cfg.temperature)
    return kd_loss(trace.logits, targets, cfg.temperature)


def training_expected_accuracy(net: Network, examples, smbr_cfg: SmbrConfig) -> float:
    """Per-frame expected accuracy of the current model over all lattices."""
    expected = 0.0
    frames = 0
    for ex in examples:
        trace = forward(net, ex.features, 1.0)
        res = smbr_objective(ex.lattice, trace.posteriors, ex.alignment, smbr_cfg)
        expected += res.expected_accuracy
        frames += ex.lattice.num_frames
    return expected / frames


def sequence_train(net: Network, examples: list[SequenceExample],
                   cfg: TrainConfig, smbr_cfg: SmbrConfig,
                   teacher: Network | None = None,
                   cv_data: FrameDataset | None = None, report_sink=None):
    """Sequence-level fine-tuning on per-utterance lattices.

    Gradients are full per-utterance updates in fixed corpus order. Each
    report carries the per-frame expected accuracy over the training
    lattices measured after the epoch's updates; the cross-validation
    frame error may well rise while it improves.
    """
    if cfg.loss_kind != "smbr_kd":
        raise ValueError("sequence_train requires loss_kind='smbr_kd'")
    if not examples:
        raise ValueError("sequence training corpus is empty")
    if any(ex.lattice is None for ex in examples):
        raise ValueError("sequence training requires a lattice for every utterance")
    if cfg.p > 0 and cfg.smbr_regularizer == "kd" and teacher is None:
        raise ValueError("the teacher-student regularizer needs a teacher network")
    state = init_momentum(net)
    reports: list[EpochReport] = []
    lr = cfg.learning_rate
    best_cv = math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        momentum = _epoch_momentum(cfg, epoch)
        total = 0.0
        frames = 0
        for ex in examples:
            trace = forward(net, ex.features, 1.0)
            smbr = smbr_objective(ex.lattice, trace.posteriors, ex.alignment, smbr_cfg)
            reg = _sequence_regularizer(cfg, trace, ex, teacher)
            combined = smbr_kd_objective(smbr, reg, cfg.p)
            grads = backward(net, trace, combined.dlogits)
            sgd_step(net, grads, state, lr, momentum, cfg.update_scope)
            n = ex.lattice.num_frames
            total += combined.value * n
            frames += n
        cv_err = evaluate_frame_error(net, cv_data) if cv_data is not None else None
        report = EpochReport(
            epoch, total / frames, cv_err, time.perf_counter() - started, lr,
            expected_accuracy=training_expected_accuracy(net, examples, smbr_cfg))
        reports.append(report)
        if report_sink is not None:
            report_sink(report)
        lr, best_cv = _next_lr(cfg, lr, cv_err, best_cv)
    return net, reports


ADAPT_MODES = ("two_pass_ce", "one_pass_kd")


def default_adapt_config(**overrides) -> TrainConfig:
    """Adaptation recipe: 5 iterations at a fixed 2e-4 learning rate."""
    base = TrainConfig(learning_rate=2e-4, max_epochs=5,
                       momentum_after_first_epoch=0.0, lr_schedule="constant")
    return replace(base, **overrides) if overrides else base


def adapt(si_net: Network, adapt_data: FrameDataset, mode: str,
          teacher: Network | None = None,
          cfg: TrainConfig | None = None) -> Network:
    """Unsupervised adaptation of a speaker-independent model.

    two_pass_ce first labels the adaptation frames with the SI model's own
    argmax posteriors, then fine-tunes on those hard labels. one_pass_kd
    skips the labeling pass: the teacher's posteriors supervise directly.
    ``cfg.update_scope`` selects between adapting everything or only the
    tied gate matrices; the SI model itself is never modified.
    """
    if mode not in ADAPT_MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}")
    if mode == "one_pass_kd" and teacher is None:
        raise ValueError("one_pass_kd adaptation requires a teacher network")
    if cfg is None:
        cfg = default_adapt_config()
    adapted = si_net.copy()
    if mode == "two_pass_ce":
        pseudo = np.argmax(posteriors(si_net, adapt_data.features), axis=1)

        def batch_loss(trace, idx):
            return ce_loss(trace.posteriors, pseudo[idx])
    else:
        def batch_loss(trace, idx):
            teacher_post = forward(teacher, adapt_data.features[idx],
                                   cfg.temperature).posteriors
            targets = SoftTargets(teacher_post, cfg.temperature)
            return kd_loss(trace.logits, targets, cfg.temperature)

    _frame_training_loop(adapted, adapt_data, None, cfg, batch_loss)
    return adapted
