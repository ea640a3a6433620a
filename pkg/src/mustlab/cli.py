"""Command-line entry point: ``mustlab {gen-data,train,sweep,analyze}``.

Every command reads an optional flat ``key = value`` config file
(``--config``) and ``--set key=value`` overrides. Precedence is
flags > file > defaults; ``--out`` and ``--manifest`` are shorthands for the
``out`` and ``manifest`` keys. When ``out`` is not set anywhere, outputs go
under ``$MUSTLAB_OUT`` (default ``runs``) in a per-command directory.

Output files (all CSVs have a header row and the column order below):

* gen-data: ``<domain>.csv`` (``label,f0,..``), ``manifest.txt``
* train: ``teacher.json``, ``student.json`` (not for source-only),
  ``log.csv`` (step record columns), ``config.txt``, and with
  ``snapshot_every > 0`` ``snapshots.csv`` (``step,sample,p0,..``)
* sweep: ``results.csv`` (config fields, ``rv_loss``, ``student_src_acc``,
  forward/reverse summaries), ``best_config.txt``
* analyze bound: ``bound.csv`` (``param,A,lhs,rhs,rhs_signed,slack``)
* analyze consistency: ``consistency.csv`` (``window_end_step,mean_std``)
* analyze margin: ``margin.csv`` (``eps,flip_count``)

Each analysis also writes ``<which>_summary.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, datasets, must, nn, rv
from .datasets import SyntheticSpec
from .must import TrainerConfig
from .numerics import Rng

log = logging.getLogger("mustlab")

OUT_ENV = "MUSTLAB_OUT"
DEFAULT_OUT_ROOT = "runs"
COMMANDS = ("gen-data", "train", "sweep", "analyze")
ANALYSES = ("bound", "consistency", "margin")


class CliError(Exception):
    """A user-facing failure; reported without a traceback."""


# -- configuration ------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _opt_str(text: str) -> str | None:
    return text.strip() or None


def _opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


_CASTS = {int: int, float: float, str: str, "int": int, "float": float, "str": str}

# synthetic-data keys; ``seed`` belongs to the trainer, so the data seed is renamed
_DATA_KEYS = {f.name if f.name != "seed" else "data_seed": f for f in fields(SyntheticSpec)}
_TRAINER_KEYS = {f.name: f for f in fields(TrainerConfig)}

# other keys: (parser, default)
_EXTRA_KEYS = {
    "out": (_opt_str, None),
    "manifest": (_opt_str, None),
    "seeds": (_int_list, None),
    "workers": (int, 1),
    "snapshot_every": (int, 0),
    "grid_lam": (_float_list, [0.25, 0.5, 1.0]),
    "grid_confidence_threshold": (_float_list, [0.6, 0.9]),
    "criterion": (str, "rv"),
    "split_frac": (float, rv.DEFAULT_FRAC),
    "teacher": (_opt_str, None),
    "student": (_opt_str, None),
    "snapshots": (_opt_str, None),
    "domain": (_opt_int, None),
    "window": (int, analysis.DEFAULT_WINDOW),
    "eps_grid": (str, "0:0.05:2"),
    "random_instance": (_parse_bool, False),
    "analyses": (str, ",".join(ANALYSES)),
}


def known_keys() -> list[str]:
    return sorted(set(_DATA_KEYS) | set(_TRAINER_KEYS) | set(_EXTRA_KEYS))


def _cast(key: str, text: str):
    if key in _EXTRA_KEYS:
        parser = _EXTRA_KEYS[key][0]
    else:
        f = _TRAINER_KEYS.get(key) or _DATA_KEYS[key]
        parser = _CASTS[f.type]
    try:
        return parser(text.strip())
    except ValueError as exc:
        raise CliError(f"bad value for {key!r}: {text!r} ({exc})") from None


def read_config_file(path) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment. Unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _check_key(key, f"{p}:{lineno}")
        if key in raw:
            raise CliError(f"{p}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _check_key(key: str, where: str) -> None:
    if key not in known_keys():
        raise CliError(f"{where}: unknown key {key!r}")


@dataclass
class RunConfig:
    trainer: TrainerConfig
    data: SyntheticSpec
    extra: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["extra"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def seeds(self) -> list[int]:
        s = self.extra["seeds"]
        return list(s) if s else [self.trainer.seed]


def resolve_config(file_values: dict[str, str], flag_values: dict[str, str]) -> RunConfig:
    """Merge defaults, file values and flag values (in increasing priority)."""
    merged = dict(file_values)
    merged.update(flag_values)
    trainer_kw, data_kw = {}, {}
    extra = {k: default for k, (_, default) in _EXTRA_KEYS.items()}
    for key, text in merged.items():
        _check_key(key, "--set" if key in flag_values else "config")
        value = _cast(key, text)
        if key in _TRAINER_KEYS:
            trainer_kw[key] = value
        elif key in _DATA_KEYS:
            data_kw["seed" if key == "data_seed" else key] = value
        else:
            extra[key] = value
    trainer = TrainerConfig(**trainer_kw)
    data = SyntheticSpec(**data_kw)
    try:
        trainer.validate()
        data.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if extra["criterion"] not in rv.CRITERIA:
        raise CliError(f"criterion must be one of {rv.CRITERIA}")
    if extra["workers"] < 1:
        raise CliError("workers must be at least 1")
    if extra["snapshot_every"] < 0:
        raise CliError("snapshot_every must be non-negative")
    return RunConfig(trainer, data, extra)


def format_trainer_config(cfg: TrainerConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(cfg).items())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def output_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT)) / command


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory is not writable: {path}")
    return path


def _load_problem(cfg: RunConfig) -> datasets.Problem:
    if not cfg.manifest:
        raise CliError("missing input: 'manifest' is not set")
    if not Path(cfg.manifest).is_file():
        raise CliError(f"missing input: manifest {cfg.manifest} does not exist")
    try:
        return datasets.load_manifest(cfg.manifest)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load manifest {cfg.manifest}: {exc}") from None


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    out = _mkdir(output_dir(cfg, "data"))
    sources, target, target_eval = datasets.generate(cfg.data)
    written = datasets.write_problem(out, sources, target, target_eval)
    for p in written:
        print(p)
    return written


def write_snapshots(path, steps, snapshots) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        num_classes = snapshots.shape[2] if snapshots is not None else 0
        w.writerow(["step", "sample"] + [f"p{c}" for c in range(num_classes)])
        for step, probs in zip(steps, snapshots if snapshots is not None else []):
            for i, row in enumerate(probs):
                w.writerow([step, i] + [repr(float(v)) for v in row])


def read_snapshots(path):
    """``(steps, array of shape (S, N, C))`` from a snapshots CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["step", "sample"]:
            raise CliError(f"{path} is not a snapshots file")
        rows = [r for r in reader if r]
    if not rows:
        return [], np.zeros((0, 0, len(header) - 2))
    steps = sorted({int(r[0]) for r in rows})
    n = max(int(r[1]) for r in rows) + 1
    out = np.full((len(steps), n, len(header) - 2), np.nan)
    pos = {s: i for i, s in enumerate(steps)}
    for r in rows:
        out[pos[int(r[0])], int(r[1])] = [float(v) for v in r[2:]]
    if np.isnan(out).any():
        raise CliError(f"{path} has missing snapshot rows")
    return steps, out


def _train_one(args) -> Path:
    trainer, problem, out, snapshot_every = args
    pair = must.train(
        trainer,
        problem.sources,
        problem.target,
        problem.target_eval,
        snapshot_every=snapshot_every or None,
    )
    _mkdir(out)
    nn.save(pair.teacher, out / "teacher.json")
    if pair.student is not None:
        nn.save(pair.student, out / "student.json")
    must.write_log(pair.log, out / "log.csv")
    (out / "config.txt").write_text(format_trainer_config(trainer), encoding="utf-8")
    if snapshot_every:
        write_snapshots(out / "snapshots.csv", pair.snapshot_steps, pair.snapshots)
    return out


def cmd_train(cfg: RunConfig) -> list[Path]:
    problem = _load_problem(cfg)
    root = _mkdir(output_dir(cfg, "train"))
    seeds = cfg.seeds
    jobs = []
    for s in seeds:
        out = root if len(seeds) == 1 else root / f"seed{s}"
        jobs.append((replace(cfg.trainer, seed=s), problem, out, cfg.snapshot_every))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(_train_one, jobs))
    else:
        outs = [_train_one(j) for j in jobs]
    for o in outs:
        print(o)
    return outs


def sweep_grid(cfg: RunConfig) -> list[TrainerConfig]:
    grid = [
        replace(cfg.trainer, lam=lam, confidence_threshold=c)
        for lam in cfg.grid_lam
        for c in cfg.grid_confidence_threshold
    ]
    for g in grid:
        try:
            g.validate()
        except ValueError as exc:
            raise CliError(f"invalid grid point: {exc}") from None
    if not grid:
        raise CliError("the sweep grid is empty")
    return grid


def cmd_sweep(cfg: RunConfig) -> TrainerConfig:
    problem = _load_problem(cfg)
    out = _mkdir(output_dir(cfg, "sweep"))
    grid = sweep_grid(cfg)
    best, results = rv.select(
        grid,
        problem.sources,
        problem.target,
        seed=cfg.trainer.seed,
        criterion=cfg.criterion,
        frac=cfg.split_frac,
        workers=cfg.workers,
    )
    rv.write_results(results, out / "results.csv")
    (out / "best_config.txt").write_text(format_trainer_config(best), encoding="utf-8")
    print(format_trainer_config(best), end="")
    return best


def _load_net(path, key: str) -> nn.Network:
    if not path:
        raise CliError(f"missing input: '{key}' checkpoint is not set")
    if not Path(path).is_file():
        raise CliError(f"missing input: {key} checkpoint {path} does not exist")
    try:
        return nn.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load {key} checkpoint {path}: {exc}") from None


def _domain_for(cfg: RunConfig, net: nn.Network) -> int:
    """Configured domain entry, or the last one (the target for trained teachers)."""
    d = cfg.domain if cfg.domain is not None else net.num_domains - 1
    if not 0 <= d < net.num_domains:
        raise CliError(f"domain {d} is out of range for a network with {net.num_domains} entries")
    return d


def random_bound_instance(seed: int, input_dim: int = 2, n: int = 64):
    """A random sigmoid-head teacher, binary student and target sample."""
    rng = Rng(seed, 30)
    teacher = nn.Network.init(nn.parse_arch("bn-8-relu-1-sigmoid", input_dim), 1, rng)
    student = nn.Network.init(nn.parse_arch("8-relu-2-softmax", input_dim), 1, rng)
    z = rng.normal(n * input_dim).reshape(n, input_dim)
    # populate the teacher's running statistics so eval mode is not the identity
    nn.forward(teacher, z, 0, "train")
    return teacher, student, z


def _write_summary(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in items.items()), encoding="utf-8")


def analyze_bound(cfg: RunConfig, out: Path) -> dict:
    if cfg.random_instance:
        teacher, student, z = random_bound_instance(cfg.trainer.seed)
        t_dom = s_dom = 0
    else:
        teacher = _load_net(cfg.teacher, "teacher")
        student = _load_net(cfg.student, "student")
        z = _load_problem(cfg).target.features
        t_dom = _domain_for(cfg, teacher)
        s_dom = 0
    try:
        report = analysis.lemma_bound_report(teacher, student, z, cfg.trainer.lam, t_dom, s_dom)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    with open(out / "bound.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "A", "lhs", "rhs", "rhs_signed", "slack"])
        for i, name in enumerate(report.names):
            w.writerow([name] + [repr(float(a[i])) for a in
                                 (report.A, report.lhs, report.rhs, report.rhs_signed, report.slack)])
    summary = {
        "passed": report.passed(),
        "min_slack": report.min_slack,
        "rho": report.rho,
        "mean_residual": report.mean_residual,
        "mean_abs_residual": report.mean_abs_residual,
        "max_per_sample_excess": report.max_per_sample_excess,
    }
    _write_summary(out / "bound_summary.txt", summary)
    return summary


def analyze_consistency(cfg: RunConfig, out: Path) -> dict:
    if not cfg.snapshots:
        raise CliError("missing input: 'snapshots' is not set")
    if not Path(cfg.snapshots).is_file():
        raise CliError(f"missing input: snapshots file {cfg.snapshots} does not exist")
    steps, snaps = read_snapshots(cfg.snapshots)
    if cfg.window > len(steps):
        raise CliError(f"window {cfg.window} is larger than the {len(steps)} available snapshots")
    try:
        report = analysis.consistency_track(snaps, cfg.window, steps)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    with open(out / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_end_step", "mean_std"])
        for s, v in zip(report.window_end_steps, report.mean_std):
            w.writerow([s, repr(float(v))])
    summary = {"window": cfg.window, "num_snapshots": len(steps),
               "time_averaged": report.time_averaged}
    _write_summary(out / "consistency_summary.txt", summary)
    return summary


def analyze_margin(cfg: RunConfig, out: Path) -> dict:
    teacher = _load_net(cfg.teacher, "teacher")
    z = _load_problem(cfg).target.features
    try:
        grid = analysis.parse_grid(cfg.eps_grid)
        curve = analysis.margin_probe(teacher, z, _domain_for(cfg, teacher), grid)
    except ValueError as exc:
        raise CliError(f"margin analysis failed: {exc}") from None
    with open(out / "margin.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "flip_count"])
        for e, c in zip(curve.epsilons, curve.flip_counts):
            w.writerow([repr(float(e)), int(c)])
    median_eps = float(np.median(curve.epsilons))
    summary = {
        "grid_points": len(curve.epsilons),
        "median_eps": median_eps,
        "flips_at_median_eps": curve.count_at(median_eps),
        "zero_gradient_samples": len(curve.zero_gradient),
    }
    _write_summary(out / "margin_summary.txt", summary)
    return summary


_ANALYZERS = {"bound": analyze_bound, "consistency": analyze_consistency, "margin": analyze_margin}


def cmd_analyze(cfg: RunConfig, which: list[str]) -> dict:
    out = _mkdir(output_dir(cfg, "analyze"))
    results = {}
    for name in which:
        results[name] = _ANALYZERS[name](cfg, out)
        print(f"{name}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in results[name].items()))
    return results


# -- argument parsing ---------------------------------------------------------


def _set_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mustlab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--set", dest="overrides", type=_set_pair, action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory")
        if name in ("train", "sweep", "analyze"):
            p.add_argument("--manifest", help="domain manifest file")
        if name == "analyze":
            p.add_argument("which", nargs="*",
                           help=f"any of {', '.join(ANALYSES)} (default: the 'analyses' key)")
    return parser


def _flag_values(args) -> dict[str, str]:
    values = {}
    for k, v in args.overrides:
        _check_key(k, "--set")
        values[k] = v
    if args.out is not None:
        values["out"] = args.out
    if getattr(args, "manifest", None) is not None:
        values["manifest"] = args.manifest
    return values


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, _flag_values(args))
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg)
        else:
            which = args.which or [w.strip() for w in cfg.analyses.split(",") if w.strip()]
            bad = [w for w in which if w not in ANALYSES]
            if bad:
                raise CliError(f"unknown analysis {bad[0]!r}; choose from {', '.join(ANALYSES)}")
            cmd_analyze(cfg, which)
    except CliError as exc:
        print(f"mustlab: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"mustlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
