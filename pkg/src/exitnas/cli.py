"""Operator entry point: run searches, resume checkpoints, emit reports.

Exit status: 0 success, 2 configuration problem, 3 evaluator failure that
exhausted its retry allowance.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import macmodel, search
from .config import EngineConfig, config_from_dict, load_config, write_manifest
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluatorUnavailableError,
    ExitNasError,
)
from .genome import (
    NUM_EXITS,
    SearchSpace,
    genome_from_dict,
    genome_id,
    genome_to_dict,
    sample_genome,
)
from .oracle import ExternalEvaluator, SyntheticEvaluator
from .search import load_checkpoint, run_search
from .tuner import TunerConfig

logger = logging.getLogger(__name__)

ARCHIVE_VERSION = "archive/v1"


# ---------------------------------------------------------------------------
# reporting helpers
# ---------------------------------------------------------------------------

def percent_strings(fractions, decimals=2):
    """Render fractions as percentages that sum to exactly 100.

    Largest-remainder rounding in units of 10^-decimals percent, ties broken
    toward earlier columns.
    """
    unit = 10 ** decimals
    total_units = 100 * unit
    raw = [f * total_units for f in fractions]
    base = [int(math.floor(x)) for x in raw]
    deficit = total_units - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:deficit]:
        base[i] += 1
    return [f"{u / unit:.{decimals}f}" for u in base]


def pareto_rows(entries):
    """Rows for the iteration-colored accuracy-vs-MACs scatter."""
    pairs = [(e.measured_error, e.measured_average_macs) for e in entries]
    front = set(search.pareto_front(pairs)) if pairs else set()
    rows = []
    for i, e in enumerate(entries):
        rows.append(
            {
                "iteration": e.iteration,
                "measured_error": e.measured_error,
                "measured_average_macs_millions": e.measured_average_macs / 1e6,
                "is_pareto": i in front,
            }
        )
    return rows


def write_pareto_csv(path, entries):
    rows = pareto_rows(entries)
    with open(path, "w") as f:
        f.write("iteration,measured_error,measured_average_macs_millions,is_pareto\n")
        for r in rows:
            f.write(
                f"{r['iteration']},{r['measured_error']!r},"
                f"{r['measured_average_macs_millions']!r},"
                f"{'true' if r['is_pareto'] else 'false'}\n"
            )
    return rows


def write_pareto_plot(path, entries):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = pareto_rows(entries)
    xs = [r["measured_average_macs_millions"] for r in rows]
    ys = [(1.0 - r["measured_error"]) * 100 for r in rows]
    cs = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 5))
    sc = ax.scatter(xs, ys, c=cs, cmap="viridis", s=18)
    fig.colorbar(sc, ax=ax, label="iteration")
    px = [x for x, r in zip(xs, rows) if r["is_pareto"]]
    py = [y for y, r in zip(ys, rows) if r["is_pareto"]]
    ax.scatter(px, py, marker="x", c="red", s=60, label="best trade-offs")
    ax.set_xlabel("average MACs (millions)")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def utilization_rows(entries):
    """Per-architecture exit utilization table, '-' for disabled exits."""
    rows = []
    for e in entries:
        positions = e.genome.enabled_positions()
        percents = percent_strings(list(e.utilization))
        cells = ["-"] * NUM_EXITS
        for slot, pos in enumerate(positions):
            cells[pos - 1] = percents[slot]
        rows.append(
            {
                "genome_id": e.genome_id,
                "iteration": e.iteration,
                "accuracy_percent": f"{(1.0 - e.measured_error) * 100:.2f}",
                "average_macs_millions": f"{e.measured_average_macs / 1e6:.2f}",
                "exits": len(positions) + 1,
                "exit_cells": cells,
                "final_cell": percents[-1],
            }
        )
    return rows


def write_utilization_csv(path, entries):
    rows = utilization_rows(entries)
    with open(path, "w") as f:
        header = ["genome_id", "iteration", "accuracy_percent", "average_macs_millions",
                  "exits"] + [f"exit{i + 1}" for i in range(NUM_EXITS)] + ["final"]
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(
                ",".join(
                    [r["genome_id"], str(r["iteration"]), r["accuracy_percent"],
                     r["average_macs_millions"], str(r["exits"])]
                    + r["exit_cells"] + [r["final_cell"]]
                )
                + "\n"
            )
    return rows


# ---------------------------------------------------------------------------
# archive files
# ---------------------------------------------------------------------------

def write_archive(path, config: EngineConfig, entries):
    doc = {
        "version": ARCHIVE_VERSION,
        "config": config.to_dict(),
        "entries": [e.to_dict(config.space) for e in entries],
    }
    Path(path).write_text(json.dumps(doc))


def read_archive(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{path}: unreadable archive: {exc}"]) from exc
    if doc.get("version") != ARCHIVE_VERSION:
        raise ConfigError([f"{path}: unsupported archive version {doc.get('version')!r}"])
    config = config_from_dict(doc["config"])
    entries = [search.ArchiveEntry.from_dict(d) for d in doc["entries"]]
    return config, entries


def build_evaluator(cfg: EngineConfig, out_dir: Path):
    if cfg.oracle.kind == "synthetic":
        return SyntheticEvaluator(cfg.space, cfg.oracle.synthetic,
                                  n_samples=cfg.oracle.n_samples)
    return ExternalEvaluator(
        cfg.oracle.command,
        cfg.space,
        dataset_id=cfg.oracle.dataset_id,
        training_epochs=cfg.search.training_epochs,
        workdir=out_dir / "eval",
        timeout=cfg.oracle.timeout_s,
        options=cfg.oracle.options,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _finish_run(cfg, result, out_dir, evaluator_kind, started_at):
    archive_path = out_dir / "archive.json"
    write_archive(archive_path, cfg, result.archive)
    manifest = write_manifest(
        out_dir / "manifest.json",
        cfg,
        evaluator_kind=evaluator_kind,
        archive_path=str(archive_path),
        checkpoint_path=str(out_dir / "checkpoint.json"),
        started_at=started_at,
        finished_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
        status="finished",
    )
    best = result.best_entry_index(cfg.tuner)
    e = result.archive[best]
    print(f"archive: {len(result.archive)} entries -> {archive_path}")
    print(
        f"best architecture: id={e.genome_id} iteration={e.iteration} "
        f"accuracy={100 * (1 - e.measured_error):.2f}% "
        f"avg_macs={e.measured_average_macs / 1e6:.2f}M "
        f"(target {cfg.search.target_macs}M)"
    )
    return manifest


def cmd_search(args):
    overrides = {
        "target_macs": args.target_macs,
        "seed": args.seed,
        "iterations": args.iterations,
        "initial_population": args.initial_population,
        "per_iteration_evals": args.per_iteration_evals,
        "beta": args.beta,
        "gamma": args.gamma,
        "training_epochs": args.training_epochs,
    }
    if args.evaluator:
        if args.evaluator == "synthetic":
            overrides["kind"] = "synthetic"
        elif args.evaluator.startswith("external:"):
            overrides["kind"] = "external"
            overrides["command"] = args.evaluator.split(":", 1)[1]
        else:
            raise ConfigError(
                [f"--evaluator {args.evaluator!r}: expected 'synthetic' or 'external:<command>'"]
            )
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluator = build_evaluator(cfg, out_dir)
    started_at = time.strftime("%Y-%m-%dT%H:%M:%S")
    result = run_search(
        cfg.search,
        cfg.space,
        cfg.tuner,
        evaluator,
        out_dir=out_dir,
        extra_config={"oracle": cfg.oracle.to_dict()},
        surrogate_hyper=cfg.surrogate,
    )
    _finish_run(cfg, result, out_dir, evaluator.kind, started_at)
    return 0


def cmd_resume(args):
    state = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(state["config"])
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    completed = state["completed_iterations"]
    if completed >= cfg.search.iterations:
        print(f"checkpoint already covers all {cfg.search.iterations} iterations; nothing to do")
        return 0
    evaluator = build_evaluator(cfg, out_dir)
    started_at = time.strftime("%Y-%m-%dT%H:%M:%S")
    result = run_search(
        cfg.search,
        cfg.space,
        cfg.tuner,
        evaluator,
        out_dir=out_dir,
        resume_state=state,
        extra_config={"oracle": cfg.oracle.to_dict()},
        surrogate_hyper=cfg.surrogate,
    )
    _finish_run(cfg, result, out_dir, evaluator.kind, started_at)
    return 0


def cmd_report(args):
    cfg, entries = read_archive(args.archive)
    if not entries:
        print("archive is empty; no report generated")
        return 0
    out = Path(args.out) if args.out else Path(args.archive).parent / f"{args.kind}.csv"
    if args.kind == "pareto":
        write_pareto_csv(out, entries)
        print(f"pareto report: {len(entries)} rows -> {out}")
        if args.plot:
            png = out.with_suffix(".png")
            write_pareto_plot(png, entries)
            print(f"scatter plot -> {png}")
    elif args.kind == "utilization":
        write_utilization_csv(out, entries)
        print(f"utilization report: {len(entries)} rows -> {out}")
    else:  # macs_breakdown
        index = args.index
        if index is None:
            result = search.SearchResult(archive=entries, pareto_indices=[])
            index = result.best_entry_index(cfg.tuner)
        if not (0 <= index < len(entries)):
            raise ConfigError([f"--index {index}: archive has {len(entries)} entries"])
        report = macmodel.layer_report(entries[index].genome, cfg.space)
        out = Path(args.out) if args.out else Path(args.archive).parent / "macs_breakdown.json"
        out.write_text(json.dumps(report, indent=2))
        print(f"MAC breakdown for entry {index} ({entries[index].genome_id}) -> {out}")
    return 0


def cmd_profile(args):
    cfg = load_config(args.config, require_target=False) if args.config else None
    space = cfg.space if cfg else SearchSpace()
    if args.genome:
        genome = genome_from_dict(json.loads(Path(args.genome).read_text()))
    else:
        genome = sample_genome(space, args.sample_seed)
    report = macmodel.layer_report(genome, space)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"MAC breakdown -> {args.out}")
    else:
        print(text)
    return 0


def cmd_sample(args):
    cfg = load_config(args.config, require_target=False) if args.config else None
    space = cfg.space if cfg else SearchSpace()
    genomes = []
    for i in range(args.count):
        g = sample_genome(space, args.seed + i)
        genomes.append({"genome_id": genome_id(g, space), "genome": genome_to_dict(g, space)})
    text = json.dumps(genomes, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{args.count} genomes -> {args.out}")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="exitnas",
        description="Multi-objective architecture search for early-exit networks",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search campaign")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--target-macs", type=float, help="budget in millions")
    p.add_argument("--evaluator", help="'synthetic' or 'external:<command>'")
    p.add_argument("--iterations", type=int)
    p.add_argument("--initial-population", type=int)
    p.add_argument("--per-iteration-evals", type=int)
    p.add_argument("--training-epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("resume", help="continue a checkpointed search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="emit report artifacts from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--kind", required=True,
                   choices=["pareto", "utilization", "macs_breakdown"])
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true", help="also render a PNG scatter")
    p.add_argument("--index", type=int, help="archive entry for macs_breakdown")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("profile", help="MAC audit for a single genome")
    p.add_argument("--genome", help="genome JSON file")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sample", help="dump random genomes")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except EvaluatorUnavailableError as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return 3
    except ExitNasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
