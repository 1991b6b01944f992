"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured runtime. Run with:

    pytest tests/test_acceptance.py -v -s
"""

import itertools
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from exitnas import cli
from exitnas import genome as G
from exitnas import macmodel as M
from exitnas import search as R
from exitnas import surrogate as S
from exitnas import tuner as T
from exitnas.exitsim import EvalTrace, assign_exits
from exitnas.oracle import SyntheticEvaluator, SyntheticOracleParams

from helpers import random_positions, random_profile, random_trace

SPACE = G.SearchSpace()
GRID11 = tuple(round(i / 10, 1) for i in range(11))

E2E_SEED = 2024
E2E_TARGET = 2.0  # millions


@contextmanager
def criterion(name, budget_s):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        elapsed = time.monotonic() - start
        print(f"FAIL | {name} | {elapsed:.2f}s")
        raise
    elapsed = time.monotonic() - start
    assert elapsed < budget_s, f"{name}: took {elapsed:.2f}s, budget {budget_s}s"
    print(f"PASS | {name} | {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 1: MAC formula exactness (zero tolerance, < 1 s)
# ---------------------------------------------------------------------------

# (layer, backbone-mode macs, exit-mode macs), all values computed by hand
MAC_FIXTURES = [
    (M.LayerSpec("conv", 3, 2, 4, 8, 8), 4608, 4608),                     # 9*2*4*64
    (M.LayerSpec("conv", 1, 16, 48, 24, 24), 442368, 442368),             # 1*16*48*576
    (M.LayerSpec("conv", 5, 3, 8, 32, 32), 614400, 614400),               # 25*3*8*1024
    (M.LayerSpec("conv", 3, 8, 6, 4, 4, groups=2), 3456, 3456),           # 9*4*6*16
    (M.LayerSpec("conv", 7, 12, 24, 6, 6), 508032, 508032),               # 49*12*24*36
    (M.LayerSpec("depthwise_conv", 3, 4, 4, 8, 8, groups=4), 2304, 2304),  # 9*1*4*64
    (M.LayerSpec("depthwise_conv", 5, 36, 36, 12, 12, groups=36), 129600, 129600),
    (M.LayerSpec("depthwise_conv", 7, 24, 24, 6, 6, groups=24), 42336, 42336),
    (M.LayerSpec("linear", 0, 48, 10, 1, 1), 480, 480),
    (M.LayerSpec("linear", 0, 112, 100, 1, 1), 11200, 11200),
    (M.LayerSpec("batchnorm", 0, 4, 4, 8, 8), 0, 256),                    # 4*64 exit mode
    (M.LayerSpec("batchnorm", 0, 24, 24, 10, 10), 0, 2400),
    (M.LayerSpec("batchnorm", 0, 16, 16, 12, 12), 0, 2304),
    (M.LayerSpec("maxpool", 2, 16, 16, 4, 4), 0, 0),
    (M.LayerSpec("interpolate", 0, 12, 12, 10, 10), 0, 0),
    (M.LayerSpec("relu", 0, 7, 7, 9, 9), 0, 0),
    (M.LayerSpec("global_avgpool", 0, 48, 48, 1, 1), 0, 0),
    (M.LayerSpec("softmax", 0, 10, 10, 1, 1), 0, 0),
]


def test_criterion_mac_formula_exactness():
    with criterion("MAC formula exactness (18 layers, zero tolerance)", 1.0):
        assert len(MAC_FIXTURES) >= 12
        for layer, backbone_macs, exit_macs in MAC_FIXTURES:
            assert M.layer_macs(layer, M.BACKBONE_MODE) == backbone_macs
            assert M.layer_macs(layer, M.EXIT_MODE) == exit_macs


# ---------------------------------------------------------------------------
# criterion 2: exit-branch space count (exact 272, < 1 s)
# ---------------------------------------------------------------------------

def test_criterion_exit_branch_space_count():
    with criterion("exit-branch space count = 272 under 2-value options", 1.0):
        for interp, kernel, expansion in (
            ([8, 10], [3, 5], [1, 2]),
            ([8, 12], [3, 5], [1, 2]),
            ([10, 12], [3, 5], [1, 2]),
        ):
            archs = G.enumerate_branch_architectures(interp, kernel, expansion)
            assert len(archs) == 272


# ---------------------------------------------------------------------------
# criterion 3: threshold-tuner oracle equivalence (exact, < 30 s)
# ---------------------------------------------------------------------------

def _enumeration_oracle(trace, prof, cfg):
    """Exhaustive grid-product scan, one plain policy evaluation per vector."""
    et = trace.n_exits - 1
    n = trace.n_samples
    margins = trace.margins
    best = None
    pb = prof.per_branch_macs
    bb = prof.backbone_cumulative_macs
    for values in itertools.product(cfg.grid, repeat=et):
        kept = [j for j, v in enumerate(values) if v < 1.0]
        running = 0
        costs = []
        for j in kept:
            running += pb[j]
            costs.append(bb[j] + running)
        costs.append(prof.backbone_final_macs + running)
        if kept:
            passes = margins[:, kept] > np.array([values[j] for j in kept])
            any_pass = passes.any(axis=1)
            first = np.argmax(passes, axis=1)
            slot = np.where(any_pass, first, len(kept))
        else:
            slot = np.zeros(n, dtype=int)
        counts = np.bincount(slot, minlength=len(kept) + 1)
        cols = np.array(kept + [et])
        correct_total = int(trace.correct[np.arange(n), cols[slot]].sum())
        acc = correct_total / n
        avg = sum((int(c) / n) * cost for c, cost in zip(counts, costs))
        obj = acc - cfg.gamma * abs(avg / 1e6 - cfg.target_macs) / cfg.target_macs
        if best is None or obj > best:
            best = obj
    return best


def test_criterion_tuner_oracle_equivalence():
    with criterion("threshold-tuner vs exhaustive enumeration (50 traces, exact)", 30.0):
        rng = np.random.default_rng(31337)
        for case in range(50):
            positions = random_positions(rng, max_enabled=3)
            n = int(rng.integers(20, 201))
            trace = random_trace(rng, n, positions, grid_aligned=True, grid=GRID11)
            prof = random_profile(rng, positions)
            cfg = T.TunerConfig(
                target_macs=float(rng.uniform(0.05, 8.0)),
                gamma=float(rng.choice([0.0, 0.1, 0.5, 2.0])),
                grid=GRID11,
            )
            outcome = T.tune(trace, prof, cfg)
            assert outcome.exact
            assert outcome.objective == _enumeration_oracle(trace, prof, cfg)


# ---------------------------------------------------------------------------
# criterion 4: policy invariants over 1000 randomized cases (< 30 s)
# ---------------------------------------------------------------------------

def test_criterion_policy_invariants():
    with criterion("policy invariants (1000 randomized cases)", 30.0):
        rng = np.random.default_rng(777)
        cases = 0
        while cases < 1000:
            positions = random_positions(rng)
            if not positions:
                continue
            cases += 1
            n = int(rng.integers(5, 60))
            trace = random_trace(rng, n, positions, grid_aligned=True, grid=GRID11)
            prof = random_profile(rng, positions)
            thresholds = [float(GRID11[rng.integers(0, 11)]) for _ in positions]
            result = assign_exits(trace, thresholds, prof)

            # utilization sums to one (counts are exact)
            assert sum(result.exit_counts) == n
            assert abs(sum(result.utilization) - 1.0) < 1e-12

            # raising one threshold never routes a sample earlier and never
            # lowers the average cost
            j = int(rng.integers(0, len(positions)))
            raised = list(thresholds)
            raised[j] = float(min(1.0, thresholds[j] + GRID11[rng.integers(1, 11)]))
            higher = assign_exits(trace, raised, prof)
            assert np.all(higher.exit_index >= result.exit_index)
            assert higher.average_macs >= result.average_macs

            # a threshold of 1 routes identically to removing the column
            disabled = list(thresholds)
            disabled[j] = 1.0
            with_one = assign_exits(trace, disabled, prof)
            keep = [k != j for k in range(len(positions))]
            removed = assign_exits(
                trace.restrict(keep),
                [t for k, t in enumerate(disabled) if k != j],
                M.restricted_profile(prof, keep),
            )
            col_map = [k for k in range(len(positions)) if k != j] + [len(positions)]
            mapped = [col_map.index(ix) for ix in with_one.exit_index]
            assert mapped == removed.exit_index.tolist()
            assert with_one.accuracy == removed.accuracy
            assert with_one.utilization[j] == 0.0


# ---------------------------------------------------------------------------
# criterion 5: non-dominated sorting equivalence (exact, < 10 s)
# ---------------------------------------------------------------------------

def _front_peeling_oracle(points):
    def dominates(a, b):
        return a[0] <= b[0] and a[1] <= b[1] and a != b

    remaining = set(range(len(points)))
    fronts = []
    while remaining:
        front = sorted(
            i for i in remaining
            if not any(dominates(points[j], points[i]) for j in remaining if j != i)
        )
        fronts.append(front)
        remaining -= set(front)
    return fronts


def test_criterion_nondominated_sort_equivalence():
    with criterion("non-dominated sort vs brute force (200 populations)", 10.0):
        rng = np.random.default_rng(4242)
        for case in range(200):
            n = int(rng.integers(1, 101))
            if case % 3 == 0:  # integer grids provoke heavy ties
                points = [tuple(x) for x in rng.integers(0, 6, size=(n, 2)).tolist()]
            else:
                points = [tuple(x) for x in rng.uniform(0, 1, size=(n, 2)).tolist()]
            fronts = [sorted(f) for f in R.nondominated_sort(points)]
            assert fronts == _front_peeling_oracle(points)


# ---------------------------------------------------------------------------
# criterion 6: surrogate gradient check (rel err <= 1e-4, < 10 s)
# ---------------------------------------------------------------------------

def test_criterion_surrogate_gradient_check():
    with criterion("surrogate analytic vs finite-difference gradients (20 MLPs)", 10.0):
        rng = np.random.default_rng(2718)
        for case in range(20):
            d = int(rng.integers(2, 9))
            h = int(rng.integers(2, 9))
            n = int(rng.integers(3, 12))
            model = S.TinyMLP(d, (h, h), seed=int(rng.integers(1 << 30)))
            x = rng.normal(size=(n, d))
            y = rng.normal(size=n)
            _, analytic = model.loss_and_grads(x, y)
            numeric = S.numerical_gradients(model, x, y)
            n_layers = len(model.weights)
            for (gw, gb), nw, nb in zip(analytic, numeric[:n_layers], numeric[n_layers:]):
                for a, f in ((gw, nw), (gb, nb)):
                    rel = np.abs(a - f) / np.maximum(np.abs(a) + np.abs(f), 1e-8)
                    assert float(rel.max()) <= 1e-4


# ---------------------------------------------------------------------------
# criterion 7: end-to-end synthetic search (< 5 min per run)
# ---------------------------------------------------------------------------

def _e2e_config():
    cfg = R.SearchConfig(target_macs=E2E_TARGET, seed=E2E_SEED)
    tuner_cfg = T.TunerConfig(target_macs=E2E_TARGET, gamma=0.1, grid=SPACE.threshold_grid)
    evaluator = SyntheticEvaluator(SPACE, SyntheticOracleParams())
    return cfg, tuner_cfg, evaluator


def _archive_dump(entries):
    dump = [e.to_dict(SPACE) for e in entries]
    for d in dump:
        d.pop("trace_path")
    return json.dumps(dump)


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    cfg, tuner_cfg, evaluator = _e2e_config()
    out_dir = tmp_path_factory.mktemp("e2e")
    start = time.monotonic()
    result = R.run_search(cfg, SPACE, tuner_cfg, evaluator, out_dir=out_dir)
    elapsed = time.monotonic() - start
    return {"result": result, "out_dir": out_dir, "elapsed": elapsed,
            "cfg": cfg, "tuner_cfg": tuner_cfg}


def test_criterion_e2e_archive_size(e2e_run):
    with criterion("e2e (a): archive size exactly 340 with defaults", 300.0):
        assert e2e_run["elapsed"] < 300.0, "search run exceeded its budget"
        cfg = e2e_run["cfg"]
        assert cfg.iterations == 30 and cfg.initial_population == 100 \
            and cfg.per_iteration_evals == 8 and cfg.beta == 0.2 \
            and cfg.training_epochs == 5
        assert len(e2e_run["result"].archive) == 340


def test_criterion_e2e_objective_nondecreasing(e2e_run):
    with criterion("e2e (b): best tuned objective non-decreasing per iteration", 60.0):
        archive = e2e_run["result"].archive
        tuner_cfg = e2e_run["tuner_cfg"]
        best = None
        for it in range(31):
            upto = [e for e in archive if e.iteration <= it]
            assert upto, f"no entries up to iteration {it}"
            current = max(R._entry_objective(e, tuner_cfg) for e in upto)
            if best is not None:
                assert current >= best
            best = current


def test_criterion_e2e_final_best_near_target(e2e_run):
    with criterion("e2e (c): best architecture within 10% of the 2.0M target", 60.0):
        result = e2e_run["result"]
        best = result.archive[result.best_entry_index(e2e_run["tuner_cfg"])]
        deviation = abs(best.measured_average_macs / 1e6 - E2E_TARGET) / E2E_TARGET
        print(
            f"  best: iteration={best.iteration} acc={1 - best.measured_error:.4f} "
            f"avg={best.measured_average_macs / 1e6:.3f}M deviation={deviation:.3f}"
        )
        assert deviation <= 0.10


def test_criterion_e2e_bit_identical_rerun(e2e_run, tmp_path):
    with criterion("e2e (d): bit-identical rerun under the same seed", 300.0):
        cfg, tuner_cfg, evaluator = _e2e_config()
        rerun = R.run_search(cfg, SPACE, tuner_cfg, evaluator, out_dir=tmp_path / "rerun")
        assert _archive_dump(rerun.archive) == _archive_dump(e2e_run["result"].archive)
        assert rerun.pareto_indices == e2e_run["result"].pareto_indices


def test_criterion_e2e_resume_equals_uninterrupted(e2e_run, tmp_path):
    with criterion("e2e (e): resume from iteration 10 equals uninterrupted run", 300.0):
        state = R.load_checkpoint(
            e2e_run["out_dir"] / "checkpoints" / "iter_010.json"
        )
        cfg, tuner_cfg, evaluator = _e2e_config()
        resumed = R.run_search(
            cfg, SPACE, tuner_cfg, evaluator,
            out_dir=tmp_path / "resumed", resume_state=state,
        )
        assert _archive_dump(resumed.archive) == _archive_dump(e2e_run["result"].archive)


# ---------------------------------------------------------------------------
# criterion 8: report fidelity (< 5 s)
# ---------------------------------------------------------------------------

def test_criterion_report_fidelity(e2e_run, tmp_path):
    with criterion("report fidelity: '-' for disabled exits, rows sum to 100", 5.0):
        entries = e2e_run["result"].archive
        util_rows = cli.utilization_rows(entries)
        saw_disabled = False
        for entry, row in zip(entries, util_rows):
            enabled = entry.genome.enabled_positions()
            for p in range(1, 6):
                cell = row["exit_cells"][p - 1]
                if p in enabled:
                    assert cell != "-"
                else:
                    assert cell == "-"
                    saw_disabled = True
            numeric = [float(c) for c in row["exit_cells"] if c != "-"]
            numeric.append(float(row["final_cell"]))
            assert abs(sum(numeric) - 100.0) <= 0.01
        assert saw_disabled, "fixture never exercised a disabled exit"

        rows = cli.pareto_rows(entries)
        front = [
            (r["measured_error"], r["measured_average_macs_millions"])
            for r in rows if r["is_pareto"]
        ]
        assert front
        for a, b in itertools.permutations(front, 2):
            assert not (a[0] <= b[0] and a[1] <= b[1] and a != b)
