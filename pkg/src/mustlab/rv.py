"""Hyperparameter selection without target labels.

Reverse validation trains a forward pair on source/target training splits,
pseudo-labels the held-out target split with the forward student, then
trains a reverse pair with that pseudo-labeled split as the only source and
the pooled source training features as the unlabeled target. The reverse
student's cross-entropy on the held-out source splits is the score; lower is
better.

The alternative selector scores a candidate by the forward student's mean
accuracy on the held-out source splits.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import nn
from .datasets import UNLABELED, DataError, Dataset
from .must import TrainedPair, TrainerConfig, accuracy, predict, train
from .numerics import Rng

log = logging.getLogger(__name__)

CRITERIA = ("rv", "student-src-acc")
DEFAULT_FRAC = 0.8

# Rng stream for splits; the second key component is the domain index.
SPLIT_STREAM = 20


@dataclass
class PairSummary:
    loss_teacher_clf: float
    loss_student: float
    pct_confident: float


@dataclass
class RVResult:
    candidate: TrainerConfig
    rv_loss: float
    student_src_acc: float
    forward_pair: PairSummary
    reverse_pair: PairSummary


def split(ds: Dataset, frac: float = DEFAULT_FRAC, seed: int = 0, stream: int = 0):
    """Deterministic train/validation split, stratified by label when labeled.

    Each class (or the whole set, when unlabeled) contributes
    ``round(frac * n)`` samples to the training part. A class that would end
    up empty on either side is an error.
    """
    if not 0.0 < frac < 1.0:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    rng = Rng(seed, (SPLIT_STREAM, stream))
    if ds.is_unlabeled:
        groups = {UNLABELED: np.arange(len(ds))}
    elif ds.is_labeled:
        groups = {int(c): np.flatnonzero(ds.labels == c) for c in np.unique(ds.labels)}
    else:
        raise DataError(f"{ds.domain_name!r} mixes labeled and unlabeled rows")

    train_idx, val_idx = [], []
    for c, idx in groups.items():
        n_train = int(round(frac * len(idx)))
        if n_train == 0 or n_train == len(idx):
            what = "the set" if c == UNLABELED else f"class {c}"
            raise DataError(
                f"splitting {ds.domain_name!r} at {frac} leaves {what} "
                f"({len(idx)} samples) empty on one side"
            )
        order = idx[rng.permutation(len(idx))]
        train_idx.append(order[:n_train])
        val_idx.append(order[n_train:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(val_idx)))


def _classifier(pair: TrainedPair) -> tuple[nn.Network, int]:
    """The network a candidate deploys on the target: the student, or the teacher without one."""
    if pair.student is not None:
        return pair.student, 0
    return pair.teacher, pair.target_domain


def _source_domain(pair: TrainedPair, cfg: TrainerConfig, k: int) -> int:
    """Domain entry used when the deployed classifier sees source ``k``."""
    if pair.student is not None or cfg.variant == "source-only":
        return 0
    return k


def _summary(pair: TrainedPair) -> PairSummary:
    if not pair.log:
        return PairSummary(math.nan, math.nan, math.nan)
    last = pair.log[-1]
    return PairSummary(last.loss_teacher_clf, last.loss_student, last.pct_confident)


def _cross_entropy(net: nn.Network, domain_id: int, datasets: Sequence[Dataset]) -> float:
    x = np.concatenate([d.features for d in datasets])
    y = np.concatenate([d.labels for d in datasets])
    probs, _ = nn.forward(net, x, domain_id, "eval")
    loss, _ = nn.cross_entropy(probs, y)
    return float(loss)


def reverse_validate(
    candidate: TrainerConfig,
    sources: Sequence[Dataset],
    target: Dataset,
    seed: int = 0,
    frac: float = DEFAULT_FRAC,
) -> RVResult:
    """Reverse-validation score of one candidate (target labels are never read)."""
    candidate.validate()
    if not target.is_unlabeled:
        raise ValueError("target must be unlabeled")
    src_parts = [split(ds, frac, seed, stream=k) for k, ds in enumerate(sources)]
    tgt_train, tgt_val = split(target, frac, seed, stream=len(sources))
    src_train = [p[0] for p in src_parts]
    src_val = [p[1] for p in src_parts]

    forward = train(candidate, src_train, tgt_train)
    net, dom = _classifier(forward)
    src_acc = float(np.mean([accuracy(net, d, _source_domain(forward, candidate, k))
                             for k, d in enumerate(src_val)]))
    pseudo = Dataset(tgt_val.features, predict(net, tgt_val.features, dom), "pseudo-target")

    pooled = Dataset(
        np.concatenate([d.features for d in src_train]),
        np.full(sum(len(d) for d in src_train), UNLABELED, dtype=np.int64),
        "pooled-sources",
    )
    reverse = train(candidate, [pseudo], pooled)
    rnet, rdom = _classifier(reverse)
    rv_loss = _cross_entropy(rnet, rdom, src_val)
    if not math.isfinite(rv_loss) or rv_loss < 0:
        raise ArithmeticError(f"reverse validation produced an invalid loss {rv_loss}")
    return RVResult(candidate, rv_loss, src_acc, _summary(forward), _summary(reverse))


def _evaluate(args) -> RVResult:
    candidate, sources, target, seed, frac = args
    result = reverse_validate(candidate, sources, target, seed, frac)
    log.info("candidate %s: rv_loss=%.6f student_src_acc=%.4f",
             candidate, result.rv_loss, result.student_src_acc)
    return result


def select(
    grid: Sequence[TrainerConfig],
    sources: Sequence[Dataset],
    target: Dataset,
    seed: int = 0,
    criterion: str = "rv",
    frac: float = DEFAULT_FRAC,
    workers: int = 1,
) -> tuple[TrainerConfig, list[RVResult]]:
    """Score every candidate and return the best one with all results in grid order.

    ``rv`` picks the lowest reverse-validation loss, ``student-src-acc`` the
    highest held-out source accuracy of the forward student. Ties go to the
    earliest candidate.
    """
    if not grid:
        raise ValueError("the candidate grid is empty")
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    jobs = [(c, list(sources), target, seed, frac) for c in grid]
    if workers > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate, jobs))
    else:
        results = [_evaluate(j) for j in jobs]

    if criterion == "rv":
        scores = [r.rv_loss for r in results]
    else:
        scores = [-r.student_src_acc for r in results]
    best = int(np.argmin(scores))  # first minimum
    return grid[best], results


# -- results file ------------------------------------------------------------

CONFIG_COLUMNS = [f.name for f in fields(TrainerConfig)]
RESULT_COLUMNS = CONFIG_COLUMNS + [
    "rv_loss",
    "student_src_acc",
    "forward_loss_teacher_clf",
    "forward_loss_student",
    "forward_pct_confident",
    "reverse_loss_teacher_clf",
    "reverse_loss_student",
    "reverse_pct_confident",
]


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_results(results: Sequence[RVResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            row = list(asdict(r.candidate).values())
            row += [r.rv_loss, r.student_src_acc]
            row += [r.forward_pair.loss_teacher_clf, r.forward_pair.loss_student,
                    r.forward_pair.pct_confident]
            row += [r.reverse_pair.loss_teacher_clf, r.reverse_pair.loss_student,
                    r.reverse_pair.pct_confident]
            w.writerow([_cell(v) for v in row])

