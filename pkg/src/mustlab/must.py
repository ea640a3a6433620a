"""Joint teacher/student training with confidence-gated distillation.

Per step: one labeled batch from a uniformly chosen source domain and one
unlabeled target batch. The student fits the teacher's soft predictions on
the confident part of the target batch (L1 loss); the teacher minimizes its
source cross-entropy plus ``lam`` times that same L1 term, with the
student's outputs held fixed at their values before the student update.

Domain ids: with per-domain batch norm the teacher owns ``K + 1`` entries
(sources ``0..K-1``, target ``K``); the student has a single entry used for
the target. The ``source-only`` variant uses one shared entry for everything.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .datasets import Dataset, UNLABELED
from .numerics import Rng

log = logging.getLogger(__name__)

VARIANTS = ("must", "only-bn", "source-only")

# independent streams derived from TrainerConfig.seed
TEACHER_INIT, STUDENT_INIT, SOURCE_BATCHES, TARGET_BATCHES = 10, 11, 12, 13


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    lam: float = 0.5
    confidence_threshold: float = 0.6
    lr: float = 0.001
    momentum: float = 0.9
    steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    record_every: int = 50
    teacher_arch: str = "bn-16-relu-2-softmax"
    student_arch: str = "bn-16-relu-2-softmax"
    variant: str = "must"

    def validate(self) -> "TrainerConfig":
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError(f"confidence_threshold must lie in [0, 1], got {self.confidence_threshold}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.record_every < 1:
            raise ConfigError(f"record_every must be positive, got {self.record_every}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for arch in (self.teacher_arch, self.student_arch):
            try:
                nn.parse_arch(arch, 1)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return self


@dataclass
class StepRecord:
    step: int
    loss_teacher_clf: float
    loss_student: float
    loss_teacher_total: float
    pct_confident: float
    teacher_src_acc: float
    teacher_tgt_acc: float | None = None
    student_tgt_acc: float | None = None


LOG_COLUMNS = [f.name for f in fields(StepRecord)]


@dataclass
class TrainedPair:
    teacher: nn.Network
    student: nn.Network | None
    log: list[StepRecord]
    target_domain: int
    snapshot_steps: list[int] = field(default_factory=list)
    snapshots: np.ndarray | None = None


def confidence_mask(teacher_probs, c_th: float) -> np.ndarray:
    if not 0.0 <= c_th <= 1.0:
        raise ConfigError(f"confidence threshold must lie in [0, 1], got {c_th}")
    return np.asarray(teacher_probs).max(axis=1) >= c_th


def predict(net: nn.Network, x, domain_id: int = 0) -> np.ndarray:
    """Eval-mode argmax; ties go to the lowest class index."""
    probs, _ = nn.forward(net, x, domain_id, "eval")
    return np.argmax(probs, axis=1)


def accuracy(net: nn.Network, ds: Dataset, domain_id: int = 0) -> float:
    if not ds.is_labeled:
        raise ValueError("accuracy needs a labeled dataset")
    return float(np.mean(predict(net, ds.features, domain_id) == ds.labels))


def teacher_objective(
    teacher: nn.Network,
    src_x,
    src_y,
    src_domain: int,
    tgt=None,
    student_probs=None,
    mask=None,
    lam: float = 0.0,
):
    """Teacher loss pieces and the gradient of ``clf + lam * student``.

    ``tgt`` is the ``(probs, trace)`` pair of a train-mode teacher forward on
    the target batch; ``student_probs`` and ``mask`` are constants. Returns
    ``(loss_clf, loss_student, grads, src_probs)``. The regularizer is
    skipped when it cannot contribute (``lam == 0`` or nothing confident).
    """
    src_probs, src_trace = nn.forward(teacher, src_x, src_domain, "train")
    loss_clf, d_src = nn.cross_entropy(src_probs, src_y)
    grads = nn.backward(teacher, src_trace, d_src)
    loss_student = 0.0
    if tgt is not None and mask is not None and np.any(mask):
        tgt_probs, tgt_trace = tgt
        loss_student, d_conf = nn.l1_distill_loss(tgt_probs[mask], student_probs[mask])
        if lam > 0:
            d_tgt = np.zeros_like(tgt_probs)
            d_tgt[mask] = d_conf
            grads = grads.add_scaled(nn.backward(teacher, tgt_trace, d_tgt), lam)
    return loss_clf, loss_student, grads, src_probs


def student_objective(student: nn.Network, tgt_x, teacher_probs, mask):
    """L1 distillation on confident rows; the forward uses the whole batch.

    Returns ``(loss, grads, student_probs)``.
    """
    probs, trace = nn.forward(student, tgt_x, 0, "train")
    loss, d_conf = nn.l1_distill_loss(probs[mask], teacher_probs[mask])
    d = np.zeros_like(probs)
    d[mask] = d_conf
    return loss, nn.backward(student, trace, d), probs


def train_step(
    teacher: nn.Network,
    student: nn.Network | None,
    src_x,
    src_y,
    src_domain: int,
    tgt_x,
    tgt_domain: int,
    cfg: TrainerConfig,
    step: int = 0,
) -> StepRecord:
    """One iteration: pseudo-label, update the student, then the teacher.

    ``student=None`` runs a teacher-only step; the target batch then only
    refreshes the teacher's target batch-norm statistics (pass ``tgt_x=None``
    to skip it).
    """
    src_x = np.asarray(src_x, dtype=np.float64)
    src_y = np.asarray(src_y)
    if len(src_x) == 0:
        raise ValueError("empty source batch")
    if np.any(src_y == UNLABELED):
        raise ValueError("source batch must be labeled")
    for d in (src_domain, tgt_domain):
        if not 0 <= d < teacher.num_domains:
            raise ValueError(f"domain id {d} out of range for teacher with {teacher.num_domains} entries")

    tgt = None
    if tgt_x is not None:
        tgt_x = np.asarray(tgt_x, dtype=np.float64)
        if len(tgt_x) == 0:
            raise ValueError("empty target batch")
        tgt = nn.forward(teacher, tgt_x, tgt_domain, "train")

    mask = None
    student_probs = None
    if student is not None and tgt is not None:
        pseudo = tgt[0]
        mask = confidence_mask(pseudo, cfg.confidence_threshold)
        if np.any(mask):
            _, s_grads, student_probs = student_objective(student, tgt_x, pseudo, mask)
            nn.sgd_momentum_step(student, s_grads, cfg.lr, cfg.momentum)

    lam = cfg.lam if student is not None else 0.0
    loss_clf, loss_student, grads, src_probs = teacher_objective(
        teacher, src_x, src_y, src_domain, tgt, student_probs, mask, lam
    )
    nn.sgd_momentum_step(teacher, grads, cfg.lr, cfg.momentum)
    acc = float(np.mean(np.argmax(src_probs, axis=1) == src_y))
    return StepRecord(
        step,
        loss_clf,
        loss_student,
        loss_clf + lam * loss_student,
        float(np.mean(mask)) if mask is not None else 0.0,
        acc,
    )


def _sample(rng: Rng, n: int, size: int) -> np.ndarray:
    return rng.permutation(n)[: min(size, n)]


def init_networks(cfg: TrainerConfig, input_dim: int, num_sources: int):
    """Freshly initialized ``(teacher, student)``; the student is ``None`` for teacher-only variants."""
    teacher_domains = 1 if cfg.variant == "source-only" else num_sources + 1
    teacher = nn.Network.init(
        nn.parse_arch(cfg.teacher_arch, input_dim), teacher_domains, Rng(cfg.seed, TEACHER_INIT)
    )
    student = None
    if cfg.variant == "must":
        student = nn.Network.init(
            nn.parse_arch(cfg.student_arch, input_dim), 1, Rng(cfg.seed, STUDENT_INIT)
        )
    return teacher, student


def target_domain_id(cfg: TrainerConfig, num_sources: int) -> int:
    return 0 if cfg.variant == "source-only" else num_sources


def train(
    cfg: TrainerConfig,
    sources: Sequence[Dataset],
    target: Dataset,
    target_eval: Dataset | None = None,
    snapshot_every: int | None = None,
    snapshot_x=None,
) -> TrainedPair:
    """Run ``cfg.steps`` iterations and return the trained networks and log.

    ``target_eval`` is used only for the accuracy columns of the log. When
    ``snapshot_every`` is given, the teacher's eval-mode probabilities on
    ``snapshot_x`` (default: the target features) are stored every that
    many steps, starting after step ``snapshot_every``.
    """
    cfg.validate()
    if not sources:
        raise ValueError("at least one source domain is required")
    dim = target.dim
    for ds in sources:
        if ds.dim != dim:
            raise ValueError(f"source {ds.domain_name!r} has {ds.dim} features, target has {dim}")
        if not ds.is_labeled:
            raise ValueError(f"source {ds.domain_name!r} must be fully labeled")
        if len(ds) < 2:
            raise ValueError(f"source {ds.domain_name!r} needs at least 2 samples")
    if not target.is_unlabeled:
        raise ValueError("target must be unlabeled")
    if len(target) < 2:
        raise ValueError("target needs at least 2 samples")

    k = len(sources)
    teacher, student = init_networks(cfg, dim, k)
    tgt_domain = target_domain_id(cfg, k)
    src_rng = Rng(cfg.seed, SOURCE_BATCHES)
    tgt_rng = Rng(cfg.seed, TARGET_BATCHES)
    if snapshot_every is not None and snapshot_x is None:
        snapshot_x = target.features
    snaps, snap_steps = [], []

    records: list[StepRecord] = []
    for t in range(1, cfg.steps + 1):
        src = int(src_rng.integers(k, 1)[0])
        idx = _sample(src_rng, len(sources[src]), cfg.batch_size)
        tidx = _sample(tgt_rng, len(target), cfg.batch_size)
        src_domain = 0 if cfg.variant == "source-only" else src
        tgt_x = None if cfg.variant == "source-only" else target.features[tidx]
        rec = train_step(
            teacher,
            student,
            sources[src].features[idx],
            sources[src].labels[idx],
            src_domain,
            tgt_x,
            tgt_domain,
            cfg,
            step=t,
        )
        if t % cfg.record_every == 0 or t == cfg.steps:
            if target_eval is not None:
                rec.teacher_tgt_acc = accuracy(teacher, target_eval, tgt_domain)
                if student is not None:
                    rec.student_tgt_acc = accuracy(student, target_eval, 0)
            records.append(rec)
            log.debug("step %d: %s", t, rec)
        if snapshot_every is not None and t % snapshot_every == 0:
            probs, _ = nn.forward(teacher, snapshot_x, tgt_domain, "eval")
            snaps.append(probs)
            snap_steps.append(t)

    return TrainedPair(
        teacher,
        student,
        records,
        tgt_domain,
        snap_steps,
        np.stack(snaps) if snaps else None,
    )


# -- telemetry files ---------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(records: Sequence[StepRecord], path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for r in records:
        row = asdict(r)
        lines.append(",".join(_fmt(row[c]) for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_log(path) -> list[StepRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != LOG_COLUMNS:
        raise ValueError(f"{path}: not a training log")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        kw = {}
        for col, v in zip(LOG_COLUMNS, vals):
            if col == "step":
                kw[col] = int(v)
            else:
                kw[col] = float(v) if v != "" else None
        out.append(StepRecord(**kw))
    return out
