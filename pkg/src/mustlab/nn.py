"""Small feed-forward networks with hand-written backprop.

A network is a chain of layers described by :class:`LayerSpec`. Supported
kinds:

``affine``
    ``y = x @ W + b`` with ``W`` of shape (in, out).
``relu``
    elementwise ``max(x, 0)``.
``batchnorm-per-domain``
    batch normalization with a separate (gamma, beta, running mean, running
    variance) entry for every domain id.
``softmax-head``
    row-wise softmax over ``C`` logits.
``sigmoid-head``
    binary head: one logit ``g`` mapped to the two class probabilities
    ``(1 - sigmoid(g), sigmoid(g))``, so downstream code always sees a
    ``batch x classes`` matrix whose rows sum to one.

Every parameter array is stored in ``Network.params`` under a name like
``"3.weight"`` or ``"0.gamma"``; gradients and momentum buffers use the same
names and shapes. Batch-norm gamma/beta arrays have shape (num_domains, dim),
and a backward pass only fills the row of the domain that was used.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, ShapeError

AFFINE = "affine"
RELU = "relu"
BATCHNORM = "batchnorm-per-domain"
SIGMOID_HEAD = "sigmoid-head"
SOFTMAX_HEAD = "softmax-head"
HEADS = (SIGMOID_HEAD, SOFTMAX_HEAD)
KINDS = (AFFINE, RELU, BATCHNORM) + HEADS

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_FORMAT = "mustlab-network"
CHECKPOINT_VERSION = 1

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int
    output_dim: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be positive: {self}")
        if self.kind in (RELU, BATCHNORM, SOFTMAX_HEAD) and self.input_dim != self.output_dim:
            raise ValueError(f"{self.kind} layer must keep its width: {self}")
        if self.kind == SIGMOID_HEAD and (self.input_dim, self.output_dim) != (1, 2):
            raise ValueError("sigmoid-head maps one logit to two class probabilities")
        if self.kind == SOFTMAX_HEAD and self.input_dim < 2:
            raise ValueError("softmax-head needs at least two classes")


def validate_specs(specs) -> None:
    if not specs:
        raise ValueError("network needs at least one layer")
    for prev, nxt in zip(specs, specs[1:]):
        if prev.output_dim != nxt.input_dim:
            raise ValueError(f"layer dims do not chain: {prev} -> {nxt}")
    heads = [i for i, s in enumerate(specs) if s.kind in HEADS]
    if heads != [len(specs) - 1]:
        raise ValueError("exactly one head layer is required, and it must be last")


def parse_arch(arch: str, input_dim: int) -> list[LayerSpec]:
    """Build layer specs from a compact description such as ``"bn-16-relu-2-softmax"``.

    Tokens are separated by ``-``: an integer ``N`` is an affine layer to
    ``N`` units, ``relu`` and ``bn`` keep the width, and the final token is
    ``softmax`` or ``sigmoid`` (the latter requires a 1-unit affine before it).
    """
    specs: list[LayerSpec] = []
    width = input_dim
    for tok in arch.strip().split("-"):
        tok = tok.strip().lower()
        if tok.isdigit():
            specs.append(LayerSpec(AFFINE, width, int(tok)))
            width = int(tok)
        elif tok == "relu":
            specs.append(LayerSpec(RELU, width, width))
        elif tok == "bn":
            specs.append(LayerSpec(BATCHNORM, width, width))
        elif tok == "softmax":
            specs.append(LayerSpec(SOFTMAX_HEAD, width, width))
        elif tok == "sigmoid":
            specs.append(LayerSpec(SIGMOID_HEAD, width, 2))
            width = 2
        else:
            raise ValueError(f"bad token {tok!r} in architecture {arch!r}")
    validate_specs(specs)
    return specs


def _as_float(x) -> np.ndarray:
    """float64 array, except that extended-precision input is kept as is."""
    arr = np.asarray(x)
    if arr.dtype == np.longdouble:
        return arr
    return arr.astype(np.float64, copy=False)


def _sigmoid(g: np.ndarray) -> np.ndarray:
    out = np.empty_like(g)
    pos = g >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-g[pos]))
    e = np.exp(g[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Network:
    """Layer stack plus parameters, per-domain BN statistics and momentum buffers."""

    def __init__(self, specs, num_domains: int = 1):
        specs = list(specs)
        validate_specs(specs)
        if num_domains < 1:
            raise ValueError("num_domains must be positive")
        self.specs = specs
        self.num_domains = int(num_domains)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for i, s in enumerate(specs):
            if s.kind == AFFINE:
                self.params[f"{i}.weight"] = np.zeros((s.input_dim, s.output_dim))
                self.params[f"{i}.bias"] = np.zeros(s.output_dim)
            elif s.kind == BATCHNORM:
                d = s.input_dim
                self.params[f"{i}.gamma"] = np.ones((num_domains, d))
                self.params[f"{i}.beta"] = np.zeros((num_domains, d))
                self.buffers[f"{i}.running_mean"] = np.zeros((num_domains, d))
                self.buffers[f"{i}.running_var"] = np.ones((num_domains, d))
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    @classmethod
    def init(cls, specs, num_domains: int, rng: Rng) -> "Network":
        """He-normal affine weights, zero biases, unit gamma, zero beta."""
        net = cls(specs, num_domains)
        for i, s in enumerate(net.specs):
            if s.kind == AFFINE:
                std = np.sqrt(2.0 / s.input_dim)
                w = rng.normal(s.input_dim * s.output_dim).reshape(s.input_dim, s.output_dim)
                net.params[f"{i}.weight"] = std * w
        return net

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.specs[-1].output_dim

    @property
    def head(self) -> str:
        return self.specs[-1].kind

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def state_equal(self, other: "Network") -> bool:
        """Bitwise equality of specs, parameters, buffers and momentum."""
        if self.specs != other.specs or self.num_domains != other.num_domains:
            return False
        for mine, theirs in (
            (self.params, other.params),
            (self.buffers, other.buffers),
            (self.velocity, other.velocity),
        ):
            if mine.keys() != theirs.keys():
                return False
            if any(mine[k].tobytes() != theirs[k].tobytes() for k in mine):
                return False
        return True


@dataclass
class ForwardTrace:
    domain_id: int
    mode: str
    caches: list = field(default_factory=list)


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def add_scaled(self, other: "Gradients", scale: float) -> "Gradients":
        """Return ``self + scale * other`` as a new object."""
        params = {k: v + scale * other.params[k] for k, v in self.params.items()}
        return Gradients(params, self.input)


def forward(net: Network, x, domain_id: int = 0, mode: str = "train"):
    """Run ``x`` through the network; returns ``(probs, trace)``.

    In train mode batch-norm layers normalize with batch statistics and
    update the running statistics of ``domain_id`` only; in eval mode they
    use the stored running statistics and nothing is mutated.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0 <= domain_id < net.num_domains:
        raise ValueError(f"unknown domain_id {domain_id} (network has {net.num_domains})")
    h = _as_float(x)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of shape (batch, {net.input_dim}), got {h.shape}")
    trace = ForwardTrace(domain_id, mode)
    for i, s in enumerate(net.specs):
        if s.kind == AFFINE:
            trace.caches.append(h)
            h = h @ net.params[f"{i}.weight"] + net.params[f"{i}.bias"]
        elif s.kind == RELU:
            mask = h > 0
            trace.caches.append(mask)
            h = h * mask
        elif s.kind == BATCHNORM:
            h = _bn_forward(net, i, h, domain_id, mode, trace)
        elif s.kind == SOFTMAX_HEAD:
            e = np.exp(h - h.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            trace.caches.append((h, p))
            h = p
        else:
            p1 = _sigmoid(h[:, 0])
            trace.caches.append((h, p1))
            h = np.column_stack([1.0 - p1, p1])
    return h, trace


def _bn_forward(net, i, h, domain_id, mode, trace):
    gamma = net.params[f"{i}.gamma"][domain_id]
    beta = net.params[f"{i}.beta"][domain_id]
    rm = net.buffers[f"{i}.running_mean"]
    rv = net.buffers[f"{i}.running_var"]
    if mode == "train":
        n = h.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = h.mean(axis=0)
        var = h.var(axis=0)
        rm[domain_id] = (1.0 - BN_MOMENTUM) * rm[domain_id] + BN_MOMENTUM * mean
        rv[domain_id] = (1.0 - BN_MOMENTUM) * rv[domain_id] + BN_MOMENTUM * var * n / (n - 1)
    else:
        mean = rm[domain_id]
        var = rv[domain_id]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mean) * inv_std
    trace.caches.append((xhat, inv_std))
    return gamma * xhat + beta


def backward(net: Network, trace: ForwardTrace, d_out, from_logits: bool = False) -> Gradients:
    """Backpropagate ``d_out`` (gradient w.r.t. the head output) through ``trace``.

    With ``from_logits=True`` the head is skipped and ``d_out`` is taken as
    the gradient w.r.t. the head input. Works for traces from either mode;
    eval-mode traces treat batch-norm statistics as constants.
    """
    if len(trace.caches) != len(net.specs):
        raise ValueError("trace does not match the network's layer count")
    grad = np.asarray(d_out, dtype=np.float64)
    width = net.specs[-1].input_dim if from_logits else net.num_classes
    if grad.ndim != 2 or grad.shape[1] != width:
        raise ShapeError(f"upstream gradient must have {width} columns, got {grad.shape}")
    d = trace.domain_id
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    top = len(net.specs) - (2 if from_logits else 1)
    for i in range(top, -1, -1):
        s = net.specs[i]
        cache = trace.caches[i]
        if s.kind == AFFINE:
            grads[f"{i}.weight"] = cache.T @ grad
            grads[f"{i}.bias"] = grad.sum(axis=0)
            grad = grad @ net.params[f"{i}.weight"].T
        elif s.kind == RELU:
            grad = grad * cache
        elif s.kind == BATCHNORM:
            xhat, inv_std = cache
            gamma = net.params[f"{i}.gamma"][d]
            grads[f"{i}.gamma"][d] = (grad * xhat).sum(axis=0)
            grads[f"{i}.beta"][d] = grad.sum(axis=0)
            dxhat = grad * gamma
            if trace.mode == "train":
                n = grad.shape[0]
                grad = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                grad = dxhat * inv_std
        elif s.kind == SOFTMAX_HEAD:
            p = cache[1]
            grad = p * (grad - (grad * p).sum(axis=1, keepdims=True))
        else:
            p1 = cache[1]
            grad = ((grad[:, 1] - grad[:, 0]) * p1 * (1.0 - p1)).reshape(-1, 1)
    return Gradients(grads, grad)


def logits(net: Network, x, domain_id: int = 0, mode: str = "eval") -> np.ndarray:
    """Head inputs: the softmax logits, or the single sigmoid logit ``g`` as (batch, 1)."""
    _, trace = forward(net, x, domain_id, mode)
    return trace.caches[-1][0]


# -- losses ---------------------------------------------------------------


def cross_entropy(probs, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``probs``."""
    p = _as_float(probs)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError(f"probs {p.shape} and labels {y.shape} do not match")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    n = p.shape[0]
    rows = np.arange(n)
    picked = np.maximum(p[rows, y], _TINY)
    loss = -np.mean(np.log(picked))
    loss = loss if p.dtype == np.longdouble else float(loss)
    grad = np.zeros_like(p)
    grad[rows, y] = -1.0 / (n * picked)
    return loss, grad


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1_distill_loss(student_probs, teacher_probs):
    """Mean absolute difference over all entries; gradient w.r.t. the first argument.

    The subgradient at exact ties is 0.
    """
    s, t = _check_pair(student_probs, teacher_probs)
    diff = s - t
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def l2_distill_loss(a_probs, b_probs):
    """Mean squared difference over all entries; gradient w.r.t. the first argument."""
    a, b = _check_pair(a_probs, b_probs)
    diff = a - b
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- optimizer --------------------------------------------------------------


def sgd_momentum_step(net: Network, grads: Gradients | dict, lr: float, momentum: float) -> None:
    """In place: ``v = momentum * v + g``; ``theta -= lr * v`` for every parameter."""
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    g = grads.params if isinstance(grads, Gradients) else grads
    if g.keys() != net.params.keys():
        raise ShapeError("gradients do not cover the network's parameters")
    for name, theta in net.params.items():
        if g[name].shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g[name].shape}, expected {theta.shape}")
    for name, theta in net.params.items():
        v = net.velocity[name]
        v *= momentum
        v += g[name]
        theta -= lr * v


# -- checkpoints -------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v).hex() for v in arr.reshape(-1)]}


def _decode(obj: dict) -> np.ndarray:
    data = np.array([float.fromhex(v) for v in obj["data"]], dtype=np.float64)
    return data.reshape(obj["shape"])


def to_dict(net: Network) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_domains": net.num_domains,
        "layers": [[s.kind, s.input_dim, s.output_dim] for s in net.specs],
        "params": {k: _encode(v) for k, v in net.params.items()},
        "buffers": {k: _encode(v) for k, v in net.buffers.items()},
        "velocity": {k: _encode(v) for k, v in net.velocity.items()},
    }


def from_dict(obj: dict) -> Network:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a network checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    specs = [LayerSpec(k, i, o) for k, i, o in obj["layers"]]
    net = Network(specs, obj["num_domains"])
    for section in ("params", "buffers", "velocity"):
        target = getattr(net, section)
        stored = obj[section]
        if stored.keys() != target.keys():
            raise ValueError(f"checkpoint {section} do not match the layer list")
        for k in target:
            arr = _decode(stored[k])
            if arr.shape != target[k].shape:
                raise ValueError(f"checkpoint entry {k} has shape {arr.shape}")
            target[k] = arr
    return net


def save(net: Network, path) -> None:
    """Write a text checkpoint; floats are stored as hex so reloads are bit-exact."""
    text = json.dumps(to_dict(net), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load(path) -> Network:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
