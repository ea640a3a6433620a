"""Diagnostics for trained teachers.

* :func:`check_sigmoid_derivative_identity` and :func:`lemma_bound_report`
  check the bound on the distillation-term gradient of a sigmoid-head
  teacher: with ``f = sigmoid(g)``, ``|df/dtheta| <= |dg/dtheta| e^{-|g|}``,
  so the gradient of ``lam * mean_z (f_teacher - f_student)^2`` is bounded
  by ``2 lam mean|f_teacher - f_student| A e^{-rho}``, where ``A`` bounds
  ``|dg/dtheta|`` and ``rho`` bounds ``|g|`` from below on the target.
* :func:`consistency_track` measures how much the teacher's target
  predictions wander during training (sliding-window std).
* :func:`margin_probe` counts target samples whose label flips under a
  single normalized-gradient step of radius ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn


# -- sigmoid derivative -----------------------------------------------------


def sigmoid_prime(g) -> np.ndarray:
    """``sigmoid'(g)`` as ``e^{-|g|} / (1 + e^{-|g|})^2``, which never overflows."""
    e = np.exp(-np.abs(np.asarray(g, dtype=np.float64)))
    return e / (1.0 + e) ** 2


@dataclass
class SigmoidCheck:
    passed: bool
    max_identity_error: float
    max_product_error: float
    max_bound_excess: float


def check_sigmoid_derivative_identity(g_values, tol: float = 1e-12) -> SigmoidCheck:
    """Check ``sigmoid'(g) = 1 / (2 + e^{-g} + e^{g})`` and ``sigmoid'(g) <= e^{-|g|}``.

    ``sigmoid'`` is also compared with ``s (1 - s)`` as computed by the
    network's head. Failures are reported, not raised.
    """
    g = np.asarray(g_values, dtype=np.float64).reshape(-1)
    sp = sigmoid_prime(g)
    with np.errstate(over="ignore"):
        closed = 1.0 / (2.0 + np.exp(-g) + np.exp(g))
    s = nn._sigmoid(g)
    identity_err = float(np.max(np.abs(sp - closed))) if g.size else 0.0
    product_err = float(np.max(np.abs(sp - s * (1.0 - s)))) if g.size else 0.0
    excess = float(np.max(sp - np.exp(-np.abs(g)))) if g.size else 0.0
    passed = identity_err <= tol and product_err <= tol and excess <= 0.0
    return SigmoidCheck(passed, identity_err, product_err, excess)


# -- gradient bound ----------------------------------------------------------


@dataclass
class BoundReport:
    names: list[str]
    A: np.ndarray
    rho: float
    lhs: np.ndarray
    rhs: np.ndarray
    rhs_signed: np.ndarray
    slack: np.ndarray
    mean_residual: float
    mean_abs_residual: float
    max_per_sample_excess: float

    @property
    def min_slack(self) -> float:
        return float(self.slack.min()) if self.slack.size else 0.0

    def passed(self, tol: float = 1e-9) -> bool:
        return self.min_slack >= -tol and self.max_per_sample_excess <= tol


def _flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in params.values()])


def _flat_names(net: nn.Network) -> list[str]:
    names = []
    for k, v in net.params.items():
        names.extend(f"{k}[{i}]" for i in range(v.size))
    return names


def lemma_bound_report(
    teacher: nn.Network,
    student: nn.Network,
    target_x,
    lam: float,
    teacher_domain: int = 0,
    student_domain: int = 0,
) -> BoundReport:
    """Measure the L2 distillation-term gradient against its analytic bound.

    Both networks are evaluated in eval mode, so each target sample's
    logit depends on the parameters alone. The L2 gradient is assembled here
    from per-sample logit gradients, independently of the trainer.
    """
    if teacher.head != nn.SIGMOID_HEAD:
        raise ValueError("the bound applies to a binary teacher with a sigmoid head")
    if student.num_classes != 2:
        raise ValueError("student must be a binary classifier")
    z = np.asarray(target_x, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("target sample is empty")
    if lam < 0:
        raise ValueError("lambda must be non-negative")

    n = len(z)
    rows = []
    g = np.empty(n)
    for i in range(n):
        _, trace = nn.forward(teacher, z[i : i + 1], teacher_domain, "eval")
        g[i] = trace.caches[-1][0][0, 0]
        rows.append(_flatten(nn.backward(teacher, trace, np.ones((1, 1)), from_logits=True).params))
    dg = np.stack(rows)  # (n, num_params)

    f_t = nn._sigmoid(g)
    f_s = nn.forward(student, z, student_domain, "eval")[0][:, 1]
    r = f_t - f_s
    sp = sigmoid_prime(g)
    df = sp[:, None] * dg

    A = np.abs(dg).max(axis=0)
    rho = float(np.abs(g).min())
    lhs = np.abs(lam * np.mean(2.0 * r[:, None] * df, axis=0))
    decay = np.exp(-rho)
    rhs = 2.0 * lam * np.mean(np.abs(r)) * A * decay
    rhs_signed = 2.0 * lam * np.mean(r) * A * decay
    per_sample = np.abs(df) - np.abs(dg) * np.exp(-np.abs(g))[:, None]
    return BoundReport(
        names=_flat_names(teacher),
        A=A,
        rho=rho,
        lhs=lhs,
        rhs=rhs,
        rhs_signed=rhs_signed,
        slack=rhs - lhs,
        mean_residual=float(np.mean(r)),
        mean_abs_residual=float(np.mean(np.abs(r))),
        max_per_sample_excess=float(per_sample.max()),
    )


# -- prediction consistency ------------------------------------------------

DEFAULT_SNAPSHOT_EVERY = 10  # training steps between snapshots
DEFAULT_WINDOW = 50  # snapshots per window


@dataclass
class ConsistencyReport:
    snapshot_steps: list[int]
    window: int
    per_sample_std: np.ndarray  # (num_windows, num_samples)
    mean_std: np.ndarray  # (num_windows,)
    window_end_steps: list[int] = field(default_factory=list)

    @property
    def time_averaged(self) -> float:
        return float(self.mean_std.mean())


def tracked_probability(snapshots) -> np.ndarray:
    """(S, N, C) teacher probabilities -> (S, N) tracked scalar per sample.

    Binary: probability of class 0. Multiclass: the max-class probability.
    Already-reduced (S, N) input is returned unchanged.
    """
    p = np.asarray(snapshots, dtype=np.float64)
    if p.ndim == 2:
        return p
    if p.ndim != 3:
        raise ValueError(f"snapshots must be (S, N) or (S, N, C), got {p.shape}")
    return p[:, :, 0] if p.shape[2] == 2 else p.max(axis=2)


def consistency_track(snapshots, window: int, snapshot_steps=None) -> ConsistencyReport:
    """Population std of each sample's tracked probability over every window of snapshots."""
    p = tracked_probability(snapshots)
    s = p.shape[0]
    if window < 1:
        raise ValueError("window must be positive")
    if window > s:
        raise ValueError(f"window {window} is larger than the {s} available snapshots")
    steps = list(snapshot_steps) if snapshot_steps is not None else list(range(s))
    if len(steps) != s:
        raise ValueError("snapshot_steps length does not match the snapshots")
    stds = sliding_window_view(p, window, axis=0).std(axis=-1)
    return ConsistencyReport(
        snapshot_steps=steps,
        window=window,
        per_sample_std=stds,
        mean_std=stds.mean(axis=1),
        window_end_steps=steps[window - 1 :],
    )


# -- adversarial margin -------------------------------------------------------


@dataclass
class MarginCurve:
    epsilons: np.ndarray
    flip_counts: np.ndarray
    flip_eps: np.ndarray  # per sample; inf when it never flips on the grid
    zero_gradient: list[int] = field(default_factory=list)

    def count_at(self, eps: float) -> int:
        return int(np.sum(self.flip_eps <= eps))


def input_gradient_of_predicted(net: nn.Network, x, domain_id: int = 0):
    """Predicted classes and d p_pred / d x for each row (eval mode)."""
    probs, trace = nn.forward(net, x, domain_id, "eval")
    pred = np.argmax(probs, axis=1)
    d = np.zeros_like(probs)
    d[np.arange(len(pred)), pred] = 1.0
    return pred, nn.backward(net, trace, d).input


def margin_probe(net: nn.Network, target_features, domain_id: int, eps_grid) -> MarginCurve:
    eps = np.asarray(eps_grid, dtype=np.float64).reshape(-1)
    if eps.size == 0 or np.any(eps < 0) or np.any(np.diff(eps) <= 0):
        raise ValueError("eps_grid must be non-negative and strictly increasing")
    x = np.asarray(target_features, dtype=np.float64)
    pred, grad = input_gradient_of_predicted(net, x, domain_id)
    norms = np.linalg.norm(grad, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    direction = np.zeros_like(grad)
    ok = norms > 0
    direction[ok] = grad[ok] / norms[ok, None]

    flip_eps = np.full(len(x), np.inf)
    for e in eps:
        pending = np.flatnonzero(np.isinf(flip_eps) & ok)
        if pending.size == 0:
            break
        moved = x[pending] - e * direction[pending]
        changed = pending[predict_eval(net, moved, domain_id) != pred[pending]]
        flip_eps[changed] = e
    counts = np.array([np.sum(flip_eps <= e) for e in eps], dtype=np.int64)
    return MarginCurve(eps, counts, flip_eps, zero.tolist())


def predict_eval(net: nn.Network, x, domain_id: int) -> np.ndarray:
    probs, _ = nn.forward(net, x, domain_id, "eval")
    return np.argmax(probs, axis=1)


def parse_grid(text: str) -> np.ndarray:
    """``"start:step:stop"`` (inclusive stop) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        start, step, stop = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(n)
    return np.array([float(v) for v in text.split(",")])
