"""Bi-objective evolutionary outer loop.

Each iteration refits the surrogates on the archive of truly evaluated
candidates, evolves an offspring pool by tournament selection, uniform
crossover and per-gene mutation, scores the pool with the surrogate
objectives, picks a handful of candidates by greedy hypervolume contribution,
evaluates them for real, tunes their exit thresholds, and archives the
results. Every random draw is seeded from (master seed, stage, iteration),
so a run resumed from a checkpoint replays the identical remaining
trajectory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import macmodel, surrogate, tuner
from .errors import (
    CheckpointError,
    ContractViolation,
    EvaluatorUnavailableError,
    ExitNasError,
)
from .exitsim import write_trace
from .genome import (
    Genome,
    SearchSpace,
    crossover,
    encode,
    genome_from_dict,
    genome_id,
    genome_to_dict,
    mutate,
    sample_genome,
    with_thresholds,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "checkpoint/v1"


@dataclass(frozen=True)
class SearchConfig:
    target_macs: float               # millions
    beta: float = 0.2
    iterations: int = 30
    initial_population: int = 100
    per_iteration_evals: int = 8
    training_epochs: int = 5
    seed: int = 0
    offspring_pool: int = 100
    mutation_probability: float = 0.1
    objective_mode: str = "augmented"   # or "raw": (error, predicted macs)
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if self.target_macs <= 0:
            raise ContractViolation("target_macs must be > 0")
        if self.beta < 0:
            raise ContractViolation("beta must be >= 0")
        if min(self.iterations, self.per_iteration_evals, self.initial_population) < 0:
            raise ContractViolation("iterations, evals and population must be >= 0")
        if self.initial_population < 2:
            raise ContractViolation("initial_population must be >= 2 (surrogates need data)")
        if self.objective_mode not in ("augmented", "raw"):
            raise ContractViolation(f"unknown objective_mode {self.objective_mode!r}")
        if not (0.0 <= self.mutation_probability <= 1.0):
            raise ContractViolation("mutation_probability must be in [0, 1]")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class ObjectiveVector:
    f1: float
    f2: float

    def __post_init__(self):
        if not (np.isfinite(self.f1) and np.isfinite(self.f2)):
            raise ContractViolation(f"objectives must be finite, got ({self.f1}, {self.f2})")
        if self.f1 < 0 or self.f2 < 0:
            raise ContractViolation(f"objectives must be >= 0, got ({self.f1}, {self.f2})")


@dataclass
class ArchiveEntry:
    genome: Genome                   # thresholds already tuned
    genome_id: str
    measured_error: float            # 1 - tuned policy accuracy
    measured_average_macs: float     # raw MACs of the tuned policy
    iteration: int                   # 0 = initial population
    utilization: tuple               # per tuned-enabled exit plus final
    final_exit_error: float
    tuned_exact: bool
    trace_path: str = None
    pre_tune_genome_id: str = None

    def to_dict(self, space: SearchSpace):
        return {
            "genome": genome_to_dict(self.genome, space),
            "genome_id": self.genome_id,
            "measured_error": self.measured_error,
            "measured_average_macs": self.measured_average_macs,
            "iteration": self.iteration,
            "utilization": list(self.utilization),
            "final_exit_error": self.final_exit_error,
            "tuned_exact": self.tuned_exact,
            "trace_path": self.trace_path,
            "pre_tune_genome_id": self.pre_tune_genome_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            genome=genome_from_dict(d["genome"]),
            genome_id=d["genome_id"],
            measured_error=float(d["measured_error"]),
            measured_average_macs=float(d["measured_average_macs"]),
            iteration=int(d["iteration"]),
            utilization=tuple(d["utilization"]),
            final_exit_error=float(d["final_exit_error"]),
            tuned_exact=bool(d["tuned_exact"]),
            trace_path=d.get("trace_path"),
            pre_tune_genome_id=d.get("pre_tune_genome_id"),
        )


def macs_error(predicted_macs, target_macs) -> float:
    """Relative deviation from the MAC budget (units cancel)."""
    if target_macs <= 0:
        raise ContractViolation(f"target_macs must be > 0, got {target_macs}")
    return abs(predicted_macs - target_macs) / target_macs


def objectives(g: Genome, pair: surrogate.SurrogatePair, cfg: SearchConfig,
               space: SearchSpace) -> ObjectiveVector:
    """Surrogate-predicted objective vector for one candidate."""
    predicted_error, predicted_macs = surrogate.predict(pair, g, space)
    me = macs_error(predicted_macs, cfg.target_macs)
    if cfg.objective_mode == "raw":
        return ObjectiveVector(f1=predicted_error, f2=predicted_macs)
    return ObjectiveVector(f1=predicted_error + cfg.beta * me, f2=me)


# ---------------------------------------------------------------------------
# non-dominated sorting and selection
# ---------------------------------------------------------------------------

def _dominates(a, b):
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def nondominated_sort(points):
    """Partition point indices into fronts (NSGA-II fast sort)."""
    pts = [(p.f1, p.f2) if isinstance(p, ObjectiveVector) else (p[0], p[1]) for p in points]
    n = len(pts)
    dominated_by = [[] for _ in range(n)]
    domination_count = [0] * n
    fronts = [[]]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if _dominates(pts[i], pts[j]):
                dominated_by[i].append(j)
            elif _dominates(pts[j], pts[i]):
                domination_count[i] += 1
        if domination_count[i] == 0:
            fronts[0].append(i)
    current = 0
    while fronts[current]:
        nxt = []
        for i in fronts[current]:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        current += 1
        fronts.append(nxt)
    fronts.pop()
    return fronts


def crowding_distance(points, front):
    """Per-index crowding distance within one front."""
    pts = [(p.f1, p.f2) if isinstance(p, ObjectiveVector) else (p[0], p[1]) for p in points]
    distance = {i: 0.0 for i in front}
    if len(front) <= 2:
        return {i: float("inf") for i in front}
    for axis in range(2):
        ordered = sorted(front, key=lambda i: pts[i][axis])
        distance[ordered[0]] = float("inf")
        distance[ordered[-1]] = float("inf")
        span = pts[ordered[-1]][axis] - pts[ordered[0]][axis]
        if span <= 0:
            continue
        for k in range(1, len(ordered) - 1):
            gap = pts[ordered[k + 1]][axis] - pts[ordered[k - 1]][axis]
            distance[ordered[k]] += gap / span
    return distance


def hypervolume_2d(points, ref):
    """Area dominated by a point set w.r.t. an upper-right reference (minimization)."""
    inside = [p for p in points if p[0] < ref[0] and p[1] < ref[1]]
    inside.sort(key=lambda p: (p[0], p[1]))
    hv = 0.0
    best_f2 = ref[1]
    for f1, f2 in inside:
        if f2 < best_f2:
            hv += (ref[0] - f1) * (best_f2 - f2)
            best_f2 = f2
    return hv


def select_candidates(points, k):
    """Greedy hypervolume-contribution pick from the best fronts.

    The reference point is the population maximum per objective; ties break
    toward lower f1 then lower f2 then lower index. Returns indices in
    selection order.
    """
    if k <= 0:
        raise ContractViolation(f"k must be >= 1, got {k}")
    pts = [(p.f1, p.f2) if isinstance(p, ObjectiveVector) else (float(p[0]), float(p[1]))
           for p in points]
    if k > len(pts):
        raise ContractViolation(f"cannot select {k} of {len(pts)} candidates")
    ref = (max(p[0] for p in pts), max(p[1] for p in pts))
    selected = []
    selected_points = []
    base_hv = 0.0
    for front in nondominated_sort(pts):
        remaining = list(front)
        while remaining and len(selected) < k:
            best = None
            for i in remaining:
                gain = hypervolume_2d(selected_points + [pts[i]], ref) - base_hv
                key = (-gain, pts[i][0], pts[i][1], i)
                if best is None or key < best[0]:
                    best = (key, i)
            _, chosen = best
            selected.append(chosen)
            selected_points.append(pts[chosen])
            base_hv = hypervolume_2d(selected_points, ref)
            remaining.remove(chosen)
        if len(selected) >= k:
            break
    return selected


def pareto_front(values):
    """Indices of mutually non-dominated rows of (f1, f2) pairs."""
    fronts = nondominated_sort(values)
    return sorted(fronts[0]) if fronts else []


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

def stage_seed(master_seed, stage, iteration=0) -> int:
    digest = hashlib.sha256(f"{master_seed}/{stage}/{iteration}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class SearchResult:
    archive: list
    pareto_indices: list

    def best_entry_index(self, tuner_cfg: tuner.TunerConfig):
        """Archive index maximizing the tuned accuracy/budget objective."""
        best, best_idx = None, None
        for i, e in enumerate(self.archive):
            obj = _entry_objective(e, tuner_cfg)
            if best is None or obj > best:
                best, best_idx = obj, i
        return best_idx


def _entry_objective(entry: ArchiveEntry, tuner_cfg: tuner.TunerConfig) -> float:
    acc = 1.0 - entry.measured_error
    avg_millions = entry.measured_average_macs / 1e6
    dev = abs(avg_millions - tuner_cfg.target_macs) / tuner_cfg.target_macs
    return acc - tuner_cfg.gamma * dev


def measured_objective_pairs(archive):
    return [(e.measured_error, e.measured_average_macs) for e in archive]


class _Campaign:
    """One search run: owns the archive, dedup bookkeeping and checkpoints."""

    def __init__(self, cfg, space, tuner_cfg, evaluator, out_dir=None,
                 surrogate_hyper=None):
        self.cfg = cfg
        self.space = space
        self.tuner_cfg = tuner_cfg
        self.evaluator = evaluator
        self.surrogate_hyper = surrogate_hyper or surrogate.SurrogateHyper()
        self.out_dir = Path(out_dir) if out_dir else None
        self.archive = []
        self.seen_ids = set()
        self.consecutive_failures = 0
        self.surrogate_pair = None
        if self.out_dir:
            (self.out_dir / "traces").mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    # -- evaluation ---------------------------------------------------------

    def evaluate_candidate(self, g: Genome, iteration: int) -> bool:
        """True evaluation of one genome: trace, tune, archive. Returns success."""
        pre_id = genome_id(g, self.space)
        eval_seed = stage_seed(self.cfg.seed, f"eval/{pre_id}")
        try:
            trace, final_error = self.evaluator.evaluate(
                g, seed=eval_seed, training_epochs=self.cfg.training_epochs
            )
        except (EvaluatorUnavailableError, ExitNasError) as exc:
            self.consecutive_failures += 1
            logger.warning("skipping candidate %s: %s", pre_id, exc)
            if self.consecutive_failures >= self.cfg.max_consecutive_failures:
                raise EvaluatorUnavailableError(
                    f"{self.consecutive_failures} consecutive evaluator failures"
                ) from exc
            return False
        self.consecutive_failures = 0

        prof = macmodel.profile(g, self.space)
        initial = [g.thresholds.thresholds[p - 1] for p in trace.exit_positions]
        outcome = tuner.tune(trace, prof, self.tuner_cfg, initial_thresholds=initial)
        tuned_genome = with_thresholds(g, outcome.thresholds)
        tuned_id = genome_id(tuned_genome, self.space)

        trace_path = None
        if self.out_dir:
            rel = f"traces/{pre_id}.csv"
            write_trace(
                self.out_dir / rel,
                trace,
                body="csv",
                footer={"measured_error": final_error, "evaluator_kind": self.evaluator.kind},
            )
            trace_path = rel

        self.archive.append(
            ArchiveEntry(
                genome=tuned_genome,
                genome_id=tuned_id,
                measured_error=1.0 - outcome.result.accuracy,
                measured_average_macs=outcome.result.average_macs,
                iteration=iteration,
                utilization=outcome.result.utilization,
                final_exit_error=final_error,
                tuned_exact=outcome.exact,
                trace_path=trace_path,
                pre_tune_genome_id=pre_id,
            )
        )
        self.seen_ids.add(pre_id)
        self.seen_ids.add(tuned_id)
        return True

    # -- population machinery ------------------------------------------------

    def sample_unseen(self, rng, reserved=None):
        reserved = reserved or set()
        for _ in range(10_000):
            g = sample_genome(self.space, rng)
            gid = genome_id(g, self.space)
            if gid not in self.seen_ids and gid not in reserved:
                return g, gid
        raise ContractViolation("search space exhausted while sampling fresh genomes")

    def initial_phase(self):
        rng = np.random.default_rng(stage_seed(self.cfg.seed, "init"))
        planned = []
        planned_ids = set()
        while len(planned) < self.cfg.initial_population:
            g, gid = self.sample_unseen(rng, reserved=planned_ids)
            planned.append(g)
            planned_ids.add(gid)
        for g in planned:
            self.evaluate_candidate(g, iteration=0)
        if len(self.archive) < 2:
            raise EvaluatorUnavailableError(
                f"initial population produced {len(self.archive)} evaluations; "
                "cannot fit surrogates"
            )
        logger.info("initial population evaluated: %d entries", len(self.archive))

    def _parent_ranks(self):
        pairs = measured_objective_pairs(self.archive)
        fronts = nondominated_sort(pairs)
        rank = {}
        crowd = {}
        for r, front in enumerate(fronts):
            dist = crowding_distance(pairs, front)
            for i in front:
                rank[i] = r
                crowd[i] = dist[i]
        return rank, crowd

    def _tournament(self, rng, rank, crowd):
        i = int(rng.integers(len(self.archive)))
        j = int(rng.integers(len(self.archive)))
        # lower rank wins, then higher crowding, then lower index
        ki = (rank[i], -crowd[i], i)
        kj = (rank[j], -crowd[j], j)
        return i if ki <= kj else j

    def make_offspring(self, iteration):
        """Evolve a pool of unseen candidate genomes."""
        rng = np.random.default_rng(stage_seed(self.cfg.seed, "evolve", iteration))
        rank, crowd = self._parent_ranks()
        pool = []
        pool_ids = set()
        attempts = 0
        while len(pool) < self.cfg.offspring_pool and attempts < 200 * self.cfg.offspring_pool:
            attempts += 1
            p1 = self.archive[self._tournament(rng, rank, crowd)].genome
            p2 = self.archive[self._tournament(rng, rank, crowd)].genome
            c1, c2 = crossover(p1, p2, self.space, int(rng.integers(1 << 62)))
            for child in (c1, c2):
                child = mutate(child, self.space, self.cfg.mutation_probability,
                               int(rng.integers(1 << 62)))
                cid = genome_id(child, self.space)
                if cid in self.seen_ids or cid in pool_ids:
                    continue
                pool.append(child)
                pool_ids.add(cid)
                if len(pool) >= self.cfg.offspring_pool:
                    break
        while len(pool) < self.cfg.per_iteration_evals:
            g, gid = self.sample_unseen(rng, reserved=pool_ids)
            pool.append(g)
            pool_ids.add(gid)
        return pool

    def run_iteration(self, iteration):
        fit_seed = stage_seed(self.cfg.seed, "fit", iteration)
        self.surrogate_pair = surrogate.fit(
            self.archive, self.space, hyper=self.surrogate_hyper, seed=fit_seed
        )
        pool = self.make_offspring(iteration)
        scored = [objectives(g, self.surrogate_pair, self.cfg, self.space) for g in pool]
        want = min(self.cfg.per_iteration_evals, len(pool))
        chosen = select_candidates(scored, want)
        for idx in chosen:
            # failures skip the candidate; the budget is not refilled
            self.evaluate_candidate(pool[idx], iteration=iteration)
        logger.info(
            "iteration %d: archive=%d best_objective=%.4f",
            iteration,
            len(self.archive),
            max(_entry_objective(e, self.tuner_cfg) for e in self.archive),
        )

    # -- checkpointing --------------------------------------------------------

    def state_dict(self, completed_iterations, extra_config=None):
        config = {
            "search": self.cfg.to_dict(),
            "tuner": {
                "target_macs": self.tuner_cfg.target_macs,
                "gamma": self.tuner_cfg.gamma,
                "grid": list(self.tuner_cfg.grid),
                "max_grid_evals": self.tuner_cfg.max_grid_evals,
            },
            "space": self.space.to_dict(),
            "surrogate_hyper": {
                "hidden": list(self.surrogate_hyper.hidden),
                "learning_rate": self.surrogate_hyper.learning_rate,
                "epochs": self.surrogate_hyper.epochs,
                "batch_limit": self.surrogate_hyper.batch_limit,
                "momentum": self.surrogate_hyper.momentum,
                "one_hot": self.surrogate_hyper.one_hot,
            },
            "evaluator": self.evaluator.describe(),
        }
        if extra_config:
            config.update(extra_config)
        return {
            "version": CHECKPOINT_VERSION,
            "config": config,
            "config_hash": config_hash(config),
            "completed_iterations": completed_iterations,
            "archive": [e.to_dict(self.space) for e in self.archive],
            "surrogate": self.surrogate_pair.to_dict() if self.surrogate_pair else None,
            "saved_at": time.time(),
        }

    def save_checkpoint(self, completed_iterations, extra_config=None):
        if not self.out_dir:
            return
        state = self.state_dict(completed_iterations, extra_config)
        latest = self.out_dir / "checkpoint.json"
        latest.write_text(json.dumps(state))
        snap = self.out_dir / "checkpoints" / f"iter_{completed_iterations:03d}.json"
        snap.write_text(json.dumps(state))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def load_checkpoint(path):
    path = Path(path)
    try:
        state = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {state.get('version')!r}")
    for key in ("config", "config_hash", "completed_iterations", "archive"):
        if key not in state:
            raise CheckpointError(f"{path}: checkpoint missing field {key!r}")
    if config_hash(state["config"]) != state["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch, refusing to resume")
    return state


def run_search(cfg: SearchConfig, space: SearchSpace, tuner_cfg: tuner.TunerConfig,
               evaluator, out_dir=None, resume_state=None,
               extra_config=None, surrogate_hyper=None) -> SearchResult:
    """Run (or resume) a complete search campaign.

    With a resume state, the archive is restored and only the missing
    iterations run; seeds are derived per stage, so the result is identical
    to an uninterrupted run with the same config and a deterministic
    evaluator.
    """
    campaign = _Campaign(cfg, space, tuner_cfg, evaluator, out_dir=out_dir,
                         surrogate_hyper=surrogate_hyper)
    start_iteration = 1
    if resume_state is not None:
        campaign.archive = [ArchiveEntry.from_dict(d) for d in resume_state["archive"]]
        for e in campaign.archive:
            campaign.seen_ids.add(e.genome_id)
            if e.pre_tune_genome_id:
                campaign.seen_ids.add(e.pre_tune_genome_id)
        if resume_state.get("surrogate"):
            campaign.surrogate_pair = surrogate.SurrogatePair.from_dict(
                resume_state["surrogate"]
            )
        start_iteration = resume_state["completed_iterations"] + 1
        logger.info(
            "resuming after iteration %d with %d archive entries",
            resume_state["completed_iterations"],
            len(campaign.archive),
        )
    else:
        campaign.initial_phase()
        campaign.save_checkpoint(0, extra_config)

    for iteration in range(start_iteration, cfg.iterations + 1):
        campaign.run_iteration(iteration)
        campaign.save_checkpoint(iteration, extra_config)

    pairs = measured_objective_pairs(campaign.archive)
    pareto = pareto_front(pairs) if pairs else []
    return SearchResult(archive=campaign.archive, pareto_indices=pareto)
