"""Synthetic multi-domain data, CSV datasets and domain manifests.

CSV layout: a header ``label,f0,...,f{D-1}`` followed by one row per
sample; ``label`` is ``-1`` for unlabeled samples. Floats are written with
``repr`` so a save/load cycle is exact.

Manifest layout (``key = value`` lines, ``#`` comments)::

    feature_dim = 3
    num_classes = 2
    domain = source0 source source0.csv
    domain = target target target.csv
    domain = target target-eval target_eval.csv

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import Rng

UNLABELED = -1
ROLES = ("source", "target", "target-eval")
SCENARIOS = ("clusters2d", "spurious-feature")


class DataError(ValueError):
    """Malformed dataset file, manifest, or generator spec."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domain_name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(
                f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels"
            )
        if np.any(self.labels < UNLABELED):
            raise DataError("labels must be -1 (unlabeled) or a class index")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return bool(len(self)) and bool(np.all(self.labels != UNLABELED))

    @property
    def is_unlabeled(self) -> bool:
        return bool(np.all(self.labels == UNLABELED))

    def unlabeled(self, domain_name: str | None = None) -> "Dataset":
        return Dataset(
            self.features.copy(),
            np.full(len(self), UNLABELED),
            self.domain_name if domain_name is None else domain_name,
        )

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.domain_name)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.domain_name == other.domain_name
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SyntheticSpec:
    scenario: str = "clusters2d"
    n_per_class: int = 200
    num_sources: int = 3
    shift: float = 1.5
    separation: float = 4.0
    noise: float = 0.5
    seed: int = 0
    spurious_noise: float = 0.05

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise DataError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n_per_class < 1 or self.num_sources < 1:
            raise DataError("n_per_class and num_sources must be positive")
        for name in ("shift", "separation", "noise", "spurious_noise"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise DataError(f"{name} must be a non-negative number, got {value}")


@dataclass(frozen=True)
class DomainTransform:
    """Rotation about the origin followed by a translation."""

    angle: float
    offset: tuple[float, float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[c, s], [-s, c]])
        return points @ rot + np.asarray(self.offset)


def class_centers(separation: float) -> np.ndarray:
    return np.array([[-separation / 2.0, 0.0], [separation / 2.0, 0.0]])


def domain_transforms(spec: SyntheticSpec) -> tuple[list[DomainTransform], DomainTransform]:
    """Per-source transforms and the target transform for a spec.

    A source draws a translation of length ``<= shift`` in a random direction
    and a rotation of at most ``shift / separation`` radians (which moves a
    class center by at most ``shift / 2``). The target uses the extreme of
    both ranges: translation exactly ``shift`` and rotation exactly
    ``shift / separation``, with random direction and sign.
    """
    rng = Rng(spec.seed, 0)
    max_angle = spec.shift / spec.separation if spec.separation > 0 else 0.0
    sources = []
    for _ in range(spec.num_sources):
        u = rng.uniform(4)
        radius = spec.shift * u[0]
        phi = 2.0 * math.pi * u[1]
        angle = max_angle * (2.0 * u[2] - 1.0)
        sources.append(DomainTransform(angle, (radius * math.cos(phi), radius * math.sin(phi))))
    u = rng.uniform(3)
    phi = 2.0 * math.pi * u[0]
    angle = max_angle * (1.0 if u[1] < 0.5 else -1.0)
    target = DomainTransform(angle, (spec.shift * math.cos(phi), spec.shift * math.sin(phi)))
    return sources, target


def _blobs(spec: SyntheticSpec, transform: DomainTransform, rng: Rng):
    n = spec.n_per_class
    centers = class_centers(spec.separation)
    labels = np.repeat(np.arange(2), n)
    points = centers[labels] + spec.noise * rng.normal(2 * n * 2).reshape(2 * n, 2)
    return transform.apply(points), labels


def gen_clusters2d(spec: SyntheticSpec):
    """Two Gaussian classes per domain; returns ``(sources, target, target_eval)``."""
    spec.validate()
    if spec.scenario != "clusters2d":
        raise DataError(f"gen_clusters2d needs scenario 'clusters2d', got {spec.scenario!r}")
    return _generate(spec, spurious=False)


def gen_spurious_feature(spec: SyntheticSpec):
    """clusters2d plus a third column that equals the label on sources only.

    Sources: ``label + spurious_noise * N(0, 1)``. Target: the same formula
    applied to an independent fair coin instead of the label, so the column
    has the source marginal but carries no class information.
    """
    spec.validate()
    if spec.scenario != "spurious-feature":
        raise DataError(
            f"gen_spurious_feature needs scenario 'spurious-feature', got {spec.scenario!r}"
        )
    return _generate(spec, spurious=True)


def generate(spec: SyntheticSpec):
    if spec.scenario == "clusters2d":
        return gen_clusters2d(spec)
    return gen_spurious_feature(spec)


def _generate(spec: SyntheticSpec, spurious: bool):
    source_tf, target_tf = domain_transforms(spec)
    sources = []
    for k, tf in enumerate(source_tf):
        rng = Rng(spec.seed, (1, k))
        x, y = _blobs(spec, tf, rng)
        if spurious:
            col = y + spec.spurious_noise * rng.normal(len(y))
            x = np.column_stack([x, col])
        sources.append(Dataset(x, y, f"source{k}"))
    rng = Rng(spec.seed, 2)
    x, y = _blobs(spec, target_tf, rng)
    if spurious:
        coin = (rng.uniform(len(y)) < 0.5).astype(np.float64)
        x = np.column_stack([x, coin + spec.spurious_noise * rng.normal(len(y))])
    target_eval = Dataset(x, y, "target")
    return sources, target_eval.unlabeled(), target_eval


# -- CSV -------------------------------------------------------------------


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
        for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
            w.writerow([label] + [repr(v) for v in row])


def load_csv(path, domain_name: str | None = None) -> Dataset:
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DataError(f"{path}: header must start with 'label'")
        dim = len(header) - 1
        if dim < 1:
            raise DataError(f"{path}: no feature columns")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {dim + 1}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: non-finite feature value")
    return Dataset(features, np.array(labels, dtype=np.int64), domain_name or path.stem)


# -- manifests -------------------------------------------------------------


@dataclass
class DomainManifest:
    feature_dim: int
    num_classes: int
    entries: list[tuple[str, str, Path]] = field(default_factory=list)

    def role(self, role: str) -> list[tuple[str, str, Path]]:
        return [e for e in self.entries if e[1] == role]


@dataclass
class Problem:
    """A loaded manifest: labeled sources, the unlabeled target, optional eval labels."""

    manifest: DomainManifest
    sources: list[Dataset]
    target: Dataset
    target_eval: Dataset | None = None


def parse_manifest(path) -> DomainManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    fields: dict[str, str] = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise DataError(f"{path}: line {lineno}: expected 'key = value'")
        if key == "domain":
            parts = value.split()
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: domain needs 'name role file'")
            name, role, file = parts
            if role not in ROLES:
                raise DataError(f"{path}: line {lineno}: unknown role {role!r}")
            entries.append((name, role, base / file))
        elif key in ("feature_dim", "num_classes"):
            fields[key] = value
        else:
            raise DataError(f"{path}: line {lineno}: unknown key {key!r}")
    try:
        manifest = DomainManifest(int(fields["feature_dim"]), int(fields["num_classes"]), entries)
    except KeyError as exc:
        raise DataError(f"{path}: missing {exc.args[0]}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(manifest.role("target")) != 1:
        raise DataError(f"{path}: exactly one target entry required, found {len(manifest.role('target'))}")
    if not manifest.role("source"):
        raise DataError(f"{path}: at least one source entry required")
    if len(manifest.role("target-eval")) > 1:
        raise DataError(f"{path}: at most one target-eval entry allowed")
    return manifest


def load_manifest(path) -> Problem:
    manifest = parse_manifest(path)

    def load(entry):
        ds = load_csv(entry[2], entry[0])
        if ds.dim != manifest.feature_dim:
            raise DataError(f"{entry[2]}: {ds.dim} features, manifest says {manifest.feature_dim}")
        if np.any(ds.labels >= manifest.num_classes):
            raise DataError(f"{entry[2]}: label outside [0, {manifest.num_classes})")
        return ds

    sources = []
    for entry in manifest.role("source"):
        ds = load(entry)
        if not ds.is_labeled:
            raise DataError(f"{entry[2]}: source domains must be fully labeled")
        sources.append(ds)
    target = load(manifest.role("target")[0])
    if not target.is_unlabeled:
        raise DataError("target must be unlabeled")
    evals = manifest.role("target-eval")
    target_eval = load(evals[0]) if evals else None
    if target_eval is not None and not target_eval.is_labeled:
        raise DataError(f"{evals[0][2]}: target-eval must be fully labeled")
    return Problem(manifest, sources, target, target_eval)


def write_problem(out_dir, sources, target, target_eval=None, num_classes: int = 2) -> list[Path]:
    """Write per-domain CSVs plus ``manifest.txt``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = [f"feature_dim = {target.dim}", f"num_classes = {num_classes}"]
    for ds in sources:
        p = out / f"{ds.domain_name}.csv"
        save_csv(ds, p)
        written.append(p)
        lines.append(f"domain = {ds.domain_name} source {p.name}")
    p = out / "target.csv"
    save_csv(target, p)
    written.append(p)
    lines.append(f"domain = {target.domain_name or 'target'} target {p.name}")
    if target_eval is not None:
        p = out / "target_eval.csv"
        save_csv(target_eval, p)
        written.append(p)
        lines.append(f"domain = {target_eval.domain_name or 'target'} target-eval {p.name}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(manifest)
    return written


def with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)
