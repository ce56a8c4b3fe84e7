"""Command-line runner: ``flipsim run | sweep | compare | explore-only``.

Experiments are described by an INI file:

``[federation]``
    Any :class:`~flipsim.federation.FederationConfig` field. Unset fields
    keep the dataclass defaults. ``C_exp`` written as an integer is an
    explorer count; written with a decimal point it is a fraction of ``C``.
``[data]``
    ``source`` is ``synthetic_blobs`` (default) or ``image_csv``; the other
    keys are that loader's keyword arguments. ``image_shape`` is a
    comma-separated tuple. A relative CSV ``path`` resolves against the
    config file's directory.
``[experiment]``
    ``repeat`` (>= 1, default 1), ``target_accuracy`` (default 0.75, used by
    summaries), ``checkpoint_every`` (rounds, default 0 = off).
``[sweep]``
    Comma-separated lists keyed by federation field, e.g. ``T_p = 0.1, 0.3``.

``--config preset:NAME`` loads a preset shipped in ``flipsim/presets``.
Logging follows ``FLIPSIM_LOG`` (error, info or debug); debug also turns on
the dense-vs-sparse aggregation cross-check.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import guidance as gd
from .data import load_image_csv, synthetic_blobs
from .errors import ConfigurationError, ParseError
from .federation import FederationConfig, prepare, run_exploration, run_experiment
from .metrics import _fmt, guidance_histogram, read_reports_csv, rounds_to_target, write_reports_csv

log = logging.getLogger("flipsim")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SECTIONS = ("federation", "data", "experiment", "sweep")
FEDERATION_TYPES = {f.name: f.type for f in fields(FederationConfig)}


def _shape(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


DATA_SCHEMA = {
    "synthetic_blobs": {"num_classes": int, "per_class": int, "n_features": int, "separation": float,
                        "class_std": float, "n_informative": int, "image_shape": _shape, "seed": int},
    "image_csv": {"path": str, "num_classes": int, "image_shape": _shape},
}
EXPERIMENT_SCHEMA = {"repeat": int, "target_accuracy": float, "checkpoint_every": int}


@dataclass
class ExperimentSpec:
    config: FederationConfig
    data: dict = field(default_factory=lambda: {"source": "synthetic_blobs"})
    repeat: int = 1
    target_accuracy: float = 0.75
    checkpoint_every: int = 0
    sweep: dict = field(default_factory=dict)


# --------------------------------------------------------------------- parsing

def _federation_value(key, text):
    kind = FEDERATION_TYPES[key]
    text = text.strip()
    try:
        if key == "C_exp":
            return float(text) if any(c in text for c in ".eE") else int(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if kind == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        return text
    except (KeyError, ValueError):
        raise ConfigurationError(f"[federation] {key}: cannot read {text!r} as {kind}") from None


def _typed(section, key, text, schema):
    if key not in schema:
        raise ConfigurationError(f"[{section}] unknown key {key!r}; expected one of {', '.join(sorted(schema))}")
    try:
        return schema[key](text.strip())
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: cannot read {text!r}") from None


def _resolve_config_path(path):
    text = str(path)
    if text.startswith("preset:"):
        name = text.split(":", 1)[1]
        preset = resources.files("flipsim.presets") / f"{name}.ini"
        if not preset.is_file():
            available = sorted(p.name[:-4] for p in resources.files("flipsim.presets").iterdir() if p.name.endswith(".ini"))
            raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(available)}")
        return preset.read_text(), None
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return p.read_text(), p.parent


def parse_config(path):
    """Read and validate an experiment INI file (or ``preset:NAME``)."""
    text, base_dir = _resolve_config_path(path)
    if not text.strip():
        raise ConfigurationError(f"config {path} is empty")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # field names are case sensitive (C vs c)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]; expected {', '.join(SECTIONS)}")

    fed = {}
    if parser.has_section("federation"):
        for key, value in parser.items("federation"):
            if key not in FEDERATION_TYPES:
                raise ConfigurationError(f"[federation] unknown key {key!r}")
            fed[key] = _federation_value(key, value)
    try:
        config = FederationConfig(**fed)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[federation] {exc}") from None

    data = {"source": "synthetic_blobs"}
    if parser.has_section("data"):
        items = dict(parser.items("data"))
        data["source"] = items.pop("source", "synthetic_blobs").strip()
        if data["source"] not in DATA_SCHEMA:
            raise ConfigurationError(f"[data] source: expected one of {', '.join(DATA_SCHEMA)}")
        for key, value in items.items():
            data[key] = _typed("data", key, value, DATA_SCHEMA[data["source"]])
    if data["source"] == "image_csv":
        if "path" not in data:
            raise ConfigurationError("[data] path is required for source = image_csv")
        if base_dir is not None and not Path(data["path"]).is_absolute():
            data["path"] = str(base_dir / data["path"])

    exp = {}
    if parser.has_section("experiment"):
        exp = {k: _typed("experiment", k, v, EXPERIMENT_SCHEMA) for k, v in parser.items("experiment")}
    spec = ExperimentSpec(config, data, **exp)
    if spec.repeat < 1:
        raise ConfigurationError(f"[experiment] repeat={spec.repeat}: expected >= 1")
    if not 0.0 <= spec.target_accuracy <= 1.0:
        raise ConfigurationError(f"[experiment] target_accuracy={spec.target_accuracy}: expected in [0, 1]")
    if spec.checkpoint_every < 0:
        raise ConfigurationError(f"[experiment] checkpoint_every={spec.checkpoint_every}: expected >= 0")

    if parser.has_section("sweep"):
        for key, value in parser.items("sweep"):
            if key not in FEDERATION_TYPES:
                raise ConfigurationError(f"[sweep] unknown axis {key!r}; axes are federation fields")
            points = [_federation_value(key, v) for v in value.split(",") if v.strip()]
            if not points:
                raise ConfigurationError(f"[sweep] axis {key} is empty")
            for p in points:
                try:
                    config.with_(**{key: p})
                except ConfigurationError as exc:
                    raise ConfigurationError(f"[sweep] {exc}") from None
            spec.sweep[key] = points
    return spec


def load_dataset(data):
    params = dict(data)
    source = params.pop("source")
    if source == "image_csv":
        return load_image_csv(**params)
    return synthetic_blobs(**params)


# --------------------------------------------------------------------- execution

def _setup_logging(level_name):
    level = LOG_LEVELS[level_name]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("flipsim").setLevel(level)


def _log_level():
    name = os.environ.get("FLIPSIM_LOG", "error").strip().lower() or "error"
    if name not in LOG_LEVELS:
        raise ConfigurationError(f"FLIPSIM_LOG={name!r}: expected one of {', '.join(LOG_LEVELS)}")
    return name


def write_costs(items, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item", "comm_up_bytes", "comm_down_bytes", "flops"])
        for name, up, down, flops in items:
            writer.writerow([name, int(up), int(down), int(flops)])


def read_costs(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["item", "comm_up_bytes", "comm_down_bytes", "flops"]:
        raise ParseError(f"{path}: bad costs header")
    try:
        return [(r[0], int(r[1]), int(r[2]), int(r[3])) for r in rows[1:]]
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None


def _run_repeat(job):
    """Worker: one seeded experiment written to its own directory."""
    config, data, out_dir, checkpoint_every, resume, level = job
    _setup_logging(level)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.npz"
    resume_from = ckpt if resume and ckpt.exists() else None
    result = run_experiment(config, load_dataset(data), checkpoint_every=checkpoint_every,
                            checkpoint_path=ckpt if checkpoint_every else None, resume_from=resume_from,
                            check_transport=level == "debug")
    write_reports_csv(result.reports, out_dir / "rounds.csv")
    if result.server.guidance is not None:
        gd.save_guidance(result.server.guidance, out_dir / "guidance.afg")
    write_costs(result.costs(), out_dir / "costs.csv")
    return str(out_dir)


def _map(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _prepare_out(path, force, resume=False):
    if path is None:
        raise ConfigurationError("--out DIR is required")
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise ConfigurationError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _std(values):
    # sample std across repeats; a single repeat has no spread
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def write_summary(run_dir, algorithm, seeds, finals, target=None, hits=()):
    finals = np.asarray(finals, dtype=np.float64)
    mean, std = float(finals.mean()), _std(finals)
    text = (f"algorithm = {algorithm}\n"
            f"repeats = {len(seeds)}\n"
            f"seeds = {' '.join(str(s) for s in seeds)}\n"
            f"final_accuracy_mean = {mean:.6g}\n"
            f"final_accuracy_std = {std:.6g}\n"
            f"final_accuracy = {mean:.4f} ± {std:.4f}\n")
    if target is not None:
        text += (f"target_accuracy = {target:.6g}\n"
                 f"rounds_to_target = {' '.join('NA' if h is None else str(h) for h in hits)}\n")
    (Path(run_dir) / "summary.txt").write_text(text, encoding="utf-8")
    return text


def read_summary(run_dir):
    path = Path(run_dir) / "summary.txt"
    if not path.is_file():
        raise ConfigurationError(f"run directory not found or incomplete: {run_dir}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    if "algorithm" not in out or "repeats" not in out:
        raise ParseError(f"{path}: missing algorithm or repeats")
    return out


def _final(reports, attr):
    return getattr(reports[-1], attr) if reports else float("nan")


def _execute_runs(runs, spec, args, level):
    """``runs`` is a list of (run_dir, config, seeds); executes every repeat, then
    writes each run's summary and first-repeat copies."""
    jobs = []
    for run_dir, config, seeds in runs:
        for i, seed in enumerate(seeds):
            jobs.append((config.with_(seed=seed), spec.data, str(Path(run_dir) / f"repeat_{i:02d}"),
                         spec.checkpoint_every, args.resume, level))
    _map(_run_repeat, jobs, args.threads)
    summaries = []
    for run_dir, config, seeds in runs:
        run_dir = Path(run_dir)
        reports = [read_reports_csv(run_dir / f"repeat_{i:02d}" / "rounds.csv") for i in range(len(seeds))]
        first = run_dir / "repeat_00"
        for name in ("rounds.csv", "guidance.afg", "costs.csv"):
            if (first / name).exists():
                shutil.copyfile(first / name, run_dir / name)
        write_summary(run_dir, config.algorithm, seeds, [_final(r, "test_accuracy") for r in reports],
                      spec.target_accuracy, [rounds_to_target(r, spec.target_accuracy) for r in reports])
        summaries.append(reports)
    return summaries


def cmd_run(spec, args, level):
    out = _prepare_out(args.out, args.force, args.resume)
    base = spec.config.seed if args.seed is None else args.seed
    seeds = [base + r for r in range(spec.repeat)]
    _execute_runs([(out, spec.config, seeds)], spec, args, level)
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0


SWEEP_STATS = ("final_accuracy_mean", "final_accuracy_std", "final_sparsity_mean", "compression_rate_mean",
               "flops_forward_mean", "sigma2_dW_late_mean")


def cmd_sweep(spec, args, level):
    if not spec.sweep:
        raise ConfigurationError("sweep needs a [sweep] section with at least one axis")
    out = _prepare_out(args.out, args.force, args.resume)
    base = spec.config.seed if args.seed is None else args.seed
    names = list(spec.sweep)
    cells = list(itertools.product(*(spec.sweep[n] for n in names)))
    runs = []
    for j, combo in enumerate(cells):
        try:
            config = spec.config.with_(**dict(zip(names, combo)))
        except ConfigurationError as exc:
            raise ConfigurationError(f"sweep cell {j} {dict(zip(names, combo))}: {exc}") from None
        seeds = [base + r + 1000 * j for r in range(spec.repeat)]
        runs.append((out / f"cell_{j:03d}", config, seeds))
    all_reports = _execute_runs(runs, spec, args, level)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", *names, "repeats", *SWEEP_STATS])
        for j, (combo, reports) in enumerate(zip(cells, all_reports)):
            acc = [_final(r, "test_accuracy") for r in reports]
            late = [np.mean([x.sigma2_dW for x in r[len(r) // 2:]]) if r else float("nan") for r in reports]
            stats = [np.mean(acc), _std(acc), np.mean([_final(r, "sparsity") for r in reports]),
                     np.mean([_final(r, "compression_rate") for r in reports]),
                     np.mean([_final(r, "flops_forward") for r in reports]), np.mean(late)]
            writer.writerow([f"cell_{j:03d}", *(_fmt(v) if not isinstance(v, str) else v for v in combo),
                             len(reports), *(_fmt(float(s)) for s in stats)])
    print((out / "sweep.csv").read_text(), end="")
    return 0


COMPARE_COLUMNS = ("run", "algorithm", "repeats", "final_accuracy_mean", "final_accuracy_std", "rounds_to_target",
                   "exploration_comm_bytes", "training_comm_bytes", "total_comm_bytes", "exploration_flops",
                   "training_flops", "total_flops")


def _mean_exact(values):
    """Mean that stays an exact int when the repeats agree on an integral value."""
    m = float(np.mean(values)) if values else 0.0
    return int(m) if m.is_integer() else m


def compare_runs(run_dirs, target):
    missing = [str(d) for d in run_dirs if not Path(d).is_dir()]
    if missing:
        raise ConfigurationError(f"run directory not found: {', '.join(missing)}")
    rows = []
    for d in run_dirs:
        d = Path(d)
        summary = read_summary(d)
        n = int(summary["repeats"])
        finals, hits = [], []
        comm = {"exploration": [], "training": []}
        flops = {"exploration": [], "training": []}
        for i in range(n):
            rep_dir = d / f"repeat_{i:02d}"
            reports = read_reports_csv(rep_dir / "rounds.csv")
            finals.append(_final(reports, "test_accuracy"))
            hits.append(rounds_to_target(reports, target))
            items = {name: (up, down, fl) for name, up, down, fl in read_costs(rep_dir / "costs.csv")}
            for key in comm:
                up, down, fl = items.get(key, (0, 0, 0))
                comm[key].append(up + down)
                flops[key].append(fl)
        ex_comm, tr_comm = _mean_exact(comm["exploration"]), _mean_exact(comm["training"])
        ex_fl, tr_fl = _mean_exact(flops["exploration"]), _mean_exact(flops["training"])
        rtt = "NA" if any(h is None for h in hits) else _fmt(_mean_exact(hits))
        rows.append([str(d), summary["algorithm"], str(n), _fmt(float(np.mean(finals))), _fmt(_std(finals)), rtt,
                     _fmt(ex_comm), _fmt(tr_comm), _fmt(ex_comm + tr_comm), _fmt(ex_fl), _fmt(tr_fl),
                     _fmt(ex_fl + tr_fl)])
    return rows


def cmd_compare(args):
    rows = compare_runs(args.runs, args.target)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        writer.writerows(rows)
    table = [list(COMPARE_COLUMNS)] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(COMPARE_COLUMNS))]
    for r in table:
        print("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return 0


def cmd_explore_only(spec, args, level):
    out = _prepare_out(args.out, args.force)
    config = spec.config if args.seed is None else spec.config.with_(seed=args.seed)
    ctx, w0 = prepare(config, load_dataset(spec.data))
    ex = run_exploration(config, ctx.layout, w0, ctx.partition, ctx.train)
    gd.save_guidance(ex.guidance, out / "guidance.afg")
    write_costs([("exploration", ex.comm_up_bytes, ex.comm_down_bytes, ex.flops)], out / "costs.csv")
    with open(out / "exploration.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["explorer", "epochs"])
        writer.writerows(zip(ex.explorers.tolist(), ex.epochs))
    counts, edges = guidance_histogram(ex.guidance, ctx.layout)
    print(f"{len(ex.explorers)} explorers, epochs {min(ex.epochs)}-{max(ex.epochs)}")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"  G in [{lo:.1f}, {hi:.1f}{']' if hi == 1.0 else ')'}: {c}")
    return 0


# --------------------------------------------------------------------- entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI file or preset:NAME")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for repeats and cells")
    common.add_argument("--seed", type=int, help="base seed (overrides [federation] seed)")
    common.add_argument("--resume", action="store_true", help="continue repeats from their checkpoints")

    parser = argparse.ArgumentParser(prog="flipsim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one configuration, repeated over seeds")
    sub.add_parser("sweep", parents=[common], help="Cartesian sweep over the [sweep] axes")
    explore = sub.add_parser("explore-only", parents=[common], help="exploration phase only; writes guidance.afg")
    explore.set_defaults(resume=False)
    cmp_ = sub.add_parser("compare", help="tabulate finished run directories")
    cmp_.add_argument("runs", nargs="+", help="run directories written by run or sweep")
    cmp_.add_argument("--out", help="directory for compare.csv (default: current directory)")
    cmp_.add_argument("--target", type=float, default=0.75, help="accuracy target for rounds_to_target")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        level = _log_level()
        _setup_logging(level)
        if args.command == "compare":
            return cmd_compare(args)
        if args.threads < 1:
            raise ConfigurationError(f"--threads={args.threads}: expected >= 1")
        spec = parse_config(args.config)
        handler = {"run": cmd_run, "sweep": cmd_sweep, "explore-only": cmd_explore_only}[args.command]
        return handler(spec, args, level)
    except (ConfigurationError, ParseError) as exc:
        print(f"flipsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
