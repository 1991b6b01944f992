"""Post-evaluation confidence-threshold optimization by grid search.

The tuned objective is ``accuracy - gamma * |avg_macs - target| / target``
with average MACs in millions. Setting a threshold to 1 prunes that branch
out of the deployed graph, so its cost disappears from every later exit; the
search therefore scores each candidate vector against the correspondingly
restricted trace and profile.

The exact path evaluates the full grid product in one pass: sample margins
are digitized to grid indices, and per-exit utilization / correctness counts
for every threshold vector fall out of multidimensional cumulative-sum
tables. All counts stay integers, so the result matches a naive per-vector
scan exactly. If the grid product exceeds the evaluation budget we fall back
to cyclic coordinate descent and flag the outcome as approximate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macmodel
from .errors import ContractViolation
from .exitsim import EvalTrace, PolicyResult, assign_exits
from .genome import DEFAULT_THRESHOLD_GRID, NUM_EXITS, ThresholdVector


@dataclass(frozen=True)
class TunerConfig:
    target_macs: float                     # millions
    gamma: float = 0.1
    grid: tuple = DEFAULT_THRESHOLD_GRID
    max_grid_evals: int = 1_000_000

    def __post_init__(self):
        if self.target_macs <= 0:
            raise ContractViolation(f"target_macs must be > 0, got {self.target_macs}")
        if self.gamma < 0:
            raise ContractViolation(f"gamma must be >= 0, got {self.gamma}")
        grid = tuple(float(t) for t in self.grid)
        if not grid:
            raise ContractViolation("threshold grid is empty")
        if sorted(set(grid)) != list(grid):
            raise ContractViolation("threshold grid must be sorted and duplicate-free")
        if grid[0] < 0.0 or grid[-1] != 1.0:
            raise ContractViolation("threshold grid must lie in [0, 1] and contain 1.0")
        object.__setattr__(self, "grid", grid)
        if self.max_grid_evals < 1:
            raise ContractViolation("max_grid_evals must be >= 1")


def objective(result: PolicyResult, cfg: TunerConfig) -> float:
    """Accuracy penalized by relative deviation from the MAC budget."""
    avg_millions = result.average_macs / 1e6
    return result.accuracy - cfg.gamma * abs(avg_millions - cfg.target_macs) / cfg.target_macs


@dataclass(frozen=True)
class TuneOutcome:
    thresholds: ThresholdVector            # full vector, 1.0 at positions without a branch
    result: PolicyResult                   # evaluated on the pruned deployment graph
    objective: float
    exact: bool


def _full_vector(trace: EvalTrace, values):
    full = [1.0] * NUM_EXITS
    for pos, v in zip(trace.exit_positions, values):
        full[pos - 1] = float(v)
    return ThresholdVector(tuple(full))


def _deployment_eval(trace: EvalTrace, prof: macmodel.MacProfile, values, cfg: TunerConfig):
    """Score a threshold assignment with thresholds-of-1 pruned from the graph."""
    keep = [v < 1.0 for v in values]
    sub_trace = trace.restrict(keep)
    sub_prof = macmodel.restricted_profile(prof, keep)
    kept_values = [v for v in values if v < 1.0]
    result = assign_exits(sub_trace, kept_values, sub_prof)
    return objective(result, cfg), result


def _lattice_search(trace: EvalTrace, prof: macmodel.MacProfile, cfg: TunerConfig):
    grid = np.asarray(cfg.grid, dtype=np.float64)
    nb = len(grid)
    et = trace.n_exits - 1
    n = trace.n_samples
    margins = trace.margins
    correct = trace.correct

    # digitize: c[i, e] = number of grid values strictly below the margin,
    # so grid index tau passes iff tau < c (margin > grid[tau]).
    c = np.searchsorted(grid, margins[:, :et], side="left")

    full_shape = (nb,) * et

    def spread(arr, ndim):
        """Pad trailing axes so an ndim table broadcasts over the full lattice."""
        return arr.reshape(arr.shape + (1,) * (et - ndim))

    def grow(arr):
        """Append one trailing axis so the next exit's coordinate broadcasts."""
        return arr.reshape(arr.shape + (1,))

    def cum_table(coords):
        """Multidimensional cumulative histogram over the given coordinates."""
        e = coords.shape[1]
        shape = (nb,) * e
        lin = np.ravel_multi_index(tuple(coords[:, j] for j in range(e)), shape)
        hist = np.bincount(lin, minlength=nb ** e).reshape(shape)
        for ax in range(e):
            hist = np.cumsum(hist, axis=ax)
        return hist

    # cum[e-1](tau_1..tau_e) = samples failing the first e exits at those thresholds
    cum = [cum_table(c[:, :e]) for e in range(1, et + 1)]

    pb = np.asarray(prof.per_branch_macs, dtype=np.int64)
    bb = np.asarray(prof.backbone_cumulative_macs, dtype=np.int64)
    enabled_cost = (grid < 1.0).astype(np.int64)

    correct_total = np.zeros(full_shape, dtype=np.int64)
    avg = np.zeros(full_shape, dtype=np.float64)
    branch_prefix = None
    for e in range(1, et + 1):
        # samples taking exit e: alive before it minus alive after it
        alive_before = n if e == 1 else grow(cum[e - 2])
        util = alive_before - cum[e - 1]

        # correct terminations at exit e, same inclusion-exclusion on the
        # correctness-restricted histogram
        ce = c[correct[:, e - 1]]
        hit_before = int(ce.shape[0]) if e == 1 else grow(cum_table(ce[:, : e - 1]))
        corr = hit_before - cum_table(ce[:, :e])
        correct_total = correct_total + spread(corr, e)

        # cumulative cost of exiting here under the pruned deployment graph
        step = pb[e - 1] * enabled_cost
        branch_prefix = step if branch_prefix is None else grow(branch_prefix) + step
        cost = bb[e - 1] + branch_prefix
        avg = avg + spread(util, e) / n * spread(cost, e)

    util_final = cum[et - 1]
    correct_total = correct_total + cum_table(c[correct[:, et]])
    final_cost = prof.backbone_final_macs + branch_prefix
    avg = avg + util_final / n * final_cost

    obj = correct_total / n - cfg.gamma * np.abs(avg / 1e6 - cfg.target_macs) / cfg.target_macs

    # argmax with ties broken toward the lexicographically largest vector
    # (prefer disabling exits): reverse every axis, take the first maximum.
    reversed_obj = obj[(slice(None, None, -1),) * et]
    flat = int(np.argmax(reversed_obj))
    rev_idx = np.unravel_index(flat, full_shape)
    tau = tuple(nb - 1 - int(r) for r in rev_idx)
    return [float(grid[t]) for t in tau]


def _snap_to_grid(value, grid):
    best = min(grid, key=lambda g: (abs(g - value), -g))
    return best


def _coordinate_descent(trace, prof, cfg, start_values, max_cycles=100):
    grid = cfg.grid
    values = [_snap_to_grid(float(v), grid) for v in start_values]
    best_obj, _ = _deployment_eval(trace, prof, values, cfg)
    for _ in range(max_cycles):
        changed = False
        for j in range(len(values)):
            scan_best = None
            for g in grid:  # ascending; >= keeps the larger threshold on ties
                trial = list(values)
                trial[j] = g
                trial_obj, _ = _deployment_eval(trace, prof, trial, cfg)
                if scan_best is None or trial_obj >= scan_best[0]:
                    scan_best = (trial_obj, g)
            best_obj, best_v = scan_best
            if best_v != values[j]:
                values[j] = best_v
                changed = True
        if not changed:
            break
    return values, best_obj


def tune(trace: EvalTrace, prof: macmodel.MacProfile, cfg: TunerConfig,
         initial_thresholds=None) -> TuneOutcome:
    """Find the grid threshold vector maximizing the tuned objective.

    Returns the full threshold vector (positions without an attached branch
    stay at 1), the policy result on the pruned deployment graph, the
    achieved objective, and whether the search was exhaustive.
    """
    if tuple(prof.exit_positions) != tuple(trace.exit_positions):
        raise ContractViolation(
            f"profile exits {prof.exit_positions} != trace exits {trace.exit_positions}"
        )
    et = trace.n_exits - 1
    if et == 0:
        obj_val, result = _deployment_eval(trace, prof, [], cfg)
        return TuneOutcome(_full_vector(trace, []), result, obj_val, exact=True)

    if len(cfg.grid) ** et <= cfg.max_grid_evals:
        values = _lattice_search(trace, prof, cfg)
        obj_val, result = _deployment_eval(trace, prof, values, cfg)
        return TuneOutcome(_full_vector(trace, values), result, obj_val, exact=True)

    start = list(initial_thresholds) if initial_thresholds is not None else [1.0] * et
    if len(start) != et:
        raise ContractViolation(f"{len(start)} initial thresholds for {et} exit columns")
    values, cd_obj = _coordinate_descent(trace, prof, cfg, start)
    ones = [1.0] * et
    ones_obj, _ = _deployment_eval(trace, prof, ones, cfg)
    if ones_obj >= cd_obj:
        values = ones
    obj_val, result = _deployment_eval(trace, prof, values, cfg)
    return TuneOutcome(_full_vector(trace, values), result, obj_val, exact=False)
