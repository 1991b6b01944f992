"""Shared builders for randomized traces and profiles used across test modules."""

import numpy as np

from exitnas import macmodel as M
from exitnas.exitsim import EvalTrace


def random_positions(rng, max_exits=5, max_enabled=None):
    k_max = max_exits if max_enabled is None else min(max_enabled, max_exits)
    k = int(rng.integers(0, k_max + 1))
    if k == 0:
        return ()
    return tuple(sorted(rng.choice(np.arange(1, max_exits + 1), size=k, replace=False).tolist()))


def random_trace(rng, n_samples, positions, grid_aligned=False, grid=None):
    """Margins biased so correct rows look more confident than incorrect ones."""
    e = len(positions) + 1
    correct = rng.random((n_samples, e)) < rng.uniform(0.3, 0.95, size=e)
    margins = np.where(
        correct,
        rng.beta(4.0, 1.5, size=(n_samples, e)),
        rng.beta(1.5, 4.0, size=(n_samples, e)),
    )
    if grid_aligned:
        # place some margins exactly on grid values to exercise the strict rule
        grid = np.asarray(grid)
        mask = rng.random(margins.shape) < 0.3
        snapped = grid[rng.integers(0, len(grid), size=margins.shape)]
        margins = np.where(mask, snapped, margins)
    return EvalTrace(margins=margins, correct=correct, exit_positions=positions,
                     genome_id="test", seed=0)


def random_profile(rng, positions):
    """Structurally consistent MacProfile with random integer costs."""
    backbone = np.cumsum(rng.integers(50_000, 2_000_000, size=5))
    branch = {p: int(rng.integers(10_000, 3_000_000)) for p in positions}
    running = 0
    cumulative, per_branch, backbone_at = [], [], []
    for p in positions:
        running += branch[p]
        per_branch.append(branch[p])
        backbone_at.append(int(backbone[p - 1]))
        cumulative.append(int(backbone[p - 1]) + running)
    backbone_final = int(backbone[-1]) + int(rng.integers(1_000, 50_000))
    return M.MacProfile(
        exit_positions=tuple(positions),
        cumulative_exit_macs=tuple(cumulative),
        per_branch_macs=tuple(per_branch),
        backbone_cumulative_macs=tuple(backbone_at),
        final_macs=backbone_final + running,
        backbone_final_macs=backbone_final,
    )
