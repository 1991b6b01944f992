import json
import os
import stat
import sys
import textwrap

import numpy as np
import pytest

from exitnas import genome as G
from exitnas import oracle as O
from exitnas.errors import (
    ContractViolation,
    EvaluatorUnavailableError,
    MalformedTraceError,
)
from exitnas.exitsim import read_trace


SPACE = G.SearchSpace()
PARAMS = O.SyntheticOracleParams()


def _genome_with_thresholds(seed, thresholds):
    g = G.sample_genome(SPACE, seed)
    return G.with_thresholds(g, G.ThresholdVector(thresholds))


def test_synthetic_deterministic():
    g = _genome_with_thresholds(1, (0.2, 1.0, 0.4, 1.0, 0.6))
    t1, e1 = O.synthetic_evaluate(g, SPACE, PARAMS, 200, seed=5)
    t2, e2 = O.synthetic_evaluate(g, SPACE, PARAMS, 200, seed=5)
    assert np.array_equal(t1.margins, t2.margins)
    assert np.array_equal(t1.correct, t2.correct)
    assert e1 == e2
    t3, _ = O.synthetic_evaluate(g, SPACE, PARAMS, 200, seed=6)
    assert not np.array_equal(t1.margins, t3.margins)


def test_synthetic_trace_shape_follows_enabled_exits():
    g = _genome_with_thresholds(2, (0.1, 1.0, 1.0, 0.9, 1.0))
    trace, _ = O.synthetic_evaluate(g, SPACE, PARAMS, 50, seed=0)
    assert trace.exit_positions == (1, 4)
    assert trace.n_exits == 3
    g_off = _genome_with_thresholds(2, (1.0,) * 5)
    trace_off, err = O.synthetic_evaluate(g_off, SPACE, PARAMS, 50, seed=0)
    assert trace_off.n_exits == 1
    assert 0.0 <= err <= 1.0


def test_final_accuracy_dominates_branches():
    for seed in range(30):
        g = G.sample_genome(SPACE, seed)
        branch_accs, final_acc = O.exit_accuracies(g, PARAMS)
        assert all(final_acc >= a for a in branch_accs)
        assert all(b >= a for a, b in zip(branch_accs, branch_accs[1:]))


def test_second_block_never_hurts_accuracy():
    g = _genome_with_thresholds(7, (0.5, 1.0, 1.0, 1.0, 1.0))
    branch = g.exits[0]
    with_b2 = G.ExitBranchConfig(
        branch.block1,
        G.ExitBlockConfig(8, 3, 1, False),
    )
    without_b2 = G.ExitBranchConfig(
        branch.block1,
        G.ExitBlockConfig(0, 3, 1, False),
    )
    g_with = G.Genome(g.backbone, g.thresholds, (with_b2,) + g.exits[1:])
    g_without = G.Genome(g.backbone, g.thresholds, (without_b2,) + g.exits[1:])
    acc_with, _ = O.exit_accuracies(g_with, PARAMS)
    acc_without, _ = O.exit_accuracies(g_without, PARAMS)
    assert acc_with[0] >= acc_without[0]


def test_correct_margins_stochastically_larger():
    g = _genome_with_thresholds(3, (0.5, 1.0, 1.0, 1.0, 1.0))
    trace, _ = O.synthetic_evaluate(g, SPACE, PARAMS, 2000, seed=1)
    correct_margin = trace.margins[trace.correct].mean()
    wrong = ~trace.correct
    assert wrong.any()
    assert correct_margin > trace.margins[wrong].mean() + 0.2


def test_synthetic_rejects_bad_sample_count():
    g = G.sample_genome(SPACE, 1)
    with pytest.raises(ContractViolation):
        O.synthetic_evaluate(g, SPACE, PARAMS, 0, seed=0)


def test_synthetic_evaluator_handle():
    ev = O.SyntheticEvaluator(SPACE, PARAMS, n_samples=64)
    g = G.sample_genome(SPACE, 4)
    trace, err = ev.evaluate(g, seed=9)
    assert trace.n_samples == 64
    assert ev.describe()["kind"] == "synthetic"


# ---------------------------------------------------------------------------
# external evaluator protocol
# ---------------------------------------------------------------------------

STUB = textwrap.dedent(
    """\
    #!/usr/bin/env python3
    # reads a wire-protocol v1 request, emits a trivially valid trace
    import json, sys

    MODE = {mode!r}

    req = json.load(open(sys.argv[1]))
    thresholds = req["genome"]["thresholds"]
    positions = [i + 1 for i, t in enumerate(thresholds) if t < 1.0]
    n = 10
    cols = len(positions) + 1
    if MODE == "missing_final":
        cols -= 1
        positions = positions[:-1] if positions else positions
    header = {{
        "schema": "exit-trace/v1", "n_samples": n, "n_exits": cols,
        "exit_positions": positions if MODE != "missing_final" else positions,
        "genome_id": "stub", "seed": req["seed"], "body": "csv",
    }}
    lines = [json.dumps(header)]
    margin = "1.5" if MODE == "bad_margin" else "0.5"
    for i in range(n):
        row = [margin] * cols + ["1"] * cols
        lines.append(",".join(row))
    lines.append(json.dumps({{"measured_error": 0.125, "wall_time_s": 0.01,
                              "evaluator_version": "stub-1"}}))
    with open(req["output_path"], "w") as f:
        f.write("\\n".join(lines) + "\\n")
    """
)


def _write_stub(tmp_path, mode="ok"):
    path = tmp_path / f"stub_{mode}.py"
    path.write_text(STUB.format(mode=mode))
    return [sys.executable, str(path)]


def _request(g, tmp_path):
    return O.EvaluatorRequest(
        genome=G.genome_to_dict(g, SPACE),
        space=SPACE.to_dict(),
        dataset_id="svhn",
        training_epochs=5,
        loss_weight=1.0,
        seed=3,
        output_path="trace.csv",
    )


def test_external_evaluate_well_formed(tmp_path):
    g = _genome_with_thresholds(5, (0.3, 0.4, 1.0, 1.0, 1.0))
    command = _write_stub(tmp_path)
    trace, footer = O.external_evaluate(
        _request(g, tmp_path), command, tmp_path / "job", expected_genome=g
    )
    assert trace.n_exits == 3
    assert trace.exit_positions == (1, 2)
    assert footer["measured_error"] == 0.125


def test_external_evaluate_missing_final_column(tmp_path):
    g = _genome_with_thresholds(5, (0.3, 0.4, 1.0, 1.0, 1.0))
    command = _write_stub(tmp_path, mode="missing_final")
    with pytest.raises(MalformedTraceError):
        O.external_evaluate(_request(g, tmp_path), command, tmp_path / "job",
                            expected_genome=g)


def test_external_evaluate_margin_out_of_bounds(tmp_path):
    g = _genome_with_thresholds(5, (0.3, 1.0, 1.0, 1.0, 1.0))
    command = _write_stub(tmp_path, mode="bad_margin")
    with pytest.raises(MalformedTraceError) as err:
        O.external_evaluate(_request(g, tmp_path), command, tmp_path / "job",
                            expected_genome=g)
    assert "margins[0][0]" in str(err.value)


def test_external_evaluate_crash_surfaces_as_unavailable(tmp_path):
    g = _genome_with_thresholds(5, (0.3, 1.0, 1.0, 1.0, 1.0))
    crash = tmp_path / "crash.py"
    crash.write_text("import sys; sys.exit(3)\n")
    with pytest.raises(EvaluatorUnavailableError):
        O.external_evaluate(
            _request(g, tmp_path), [sys.executable, str(crash)], tmp_path / "job",
            expected_genome=g,
        )


def test_external_evaluator_handle_runs_stub(tmp_path):
    g = _genome_with_thresholds(8, (0.5, 1.0, 0.5, 1.0, 1.0))
    command = _write_stub(tmp_path)
    ev = O.ExternalEvaluator(
        command, SPACE, dataset_id="svhn", workdir=tmp_path / "work"
    )
    trace, err = ev.evaluate(g, seed=4)
    assert err == 0.125
    assert trace.exit_positions == (1, 3)
    # request document round-trips through disk with the documented fields
    job_dirs = list((tmp_path / "work").iterdir())
    request = json.loads((job_dirs[0] / "request.json").read_text())
    assert request["schema_version"] == "1"
    assert request["training_epochs"] == 5
    assert request["loss_weight"] == 1.0
