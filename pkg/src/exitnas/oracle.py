"""Evaluators: a deterministic synthetic model and an external-process bridge.

The synthetic evaluator is a desk-scale stand-in for real training. Per-exit
accuracy is logistic in exit depth and in a branch-capacity score (enabled
blocks, expansion widths, kernel sizes), made monotone so deeper exits never
lose to shallower ones; margins for correct predictions are drawn
stochastically larger than for incorrect ones. That gives the search a
learnable landscape with assertable invariants.

The external evaluator speaks wire protocol v1: a JSON request document is
written into an isolated working directory, the evaluator process is invoked
with the request path as its only argument, and it must write a trace file
(exitsim format) whose JSON footer carries the measured final-exit error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, EvaluatorUnavailableError, MalformedTraceError
from .exitsim import EvalTrace, read_trace
from .genome import Genome, SearchSpace, genome_id, genome_to_dict

logger = logging.getLogger(__name__)

WIRE_SCHEMA_VERSION = "1"


@dataclass(frozen=True)
class SyntheticOracleParams:
    accuracy_floor: float = 0.35
    accuracy_ceiling: float = 0.97
    depth_gain: float = 1.1          # logit gain per backbone position
    capacity_gain: float = 0.8       # logit gain per unit of branch capacity
    logit_bias: float = -1.4
    final_depth: float = 6.0         # virtual position of the final classifier
    final_capacity: float = 3.0
    block_weight: float = 1.0        # capacity credit per enabled branch block
    expansion_weight: float = 0.5    # per unit of expansion width
    kernel_weight: float = 0.5       # per kernel step above the smallest
    margin_correct: tuple = (8.0, 1.2)    # beta distribution (a, b)
    margin_incorrect: tuple = (1.2, 8.0)
    noise_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.accuracy_floor <= self.accuracy_ceiling <= 1.0):
            raise ContractViolation("need 0 <= accuracy_floor <= accuracy_ceiling <= 1")
        for name in ("margin_correct", "margin_incorrect"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ContractViolation(f"{name} beta parameters must be positive")

    def to_dict(self):
        d = {}
        for key in self.__dataclass_fields__:
            v = getattr(self, key)
            d[key] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


def branch_capacity(branch, params: SyntheticOracleParams) -> float:
    """Weighted count of enabled blocks, expansion widths and kernel sizes."""
    score = 0.0
    for block in (branch.block1, branch.block2):
        if not block.enabled:
            continue
        score += params.block_weight
        score += params.expansion_weight * block.expansion_width
        score += params.kernel_weight * (block.kernel_size - 3) / 2.0
    return score


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def exit_accuracies(g: Genome, params: SyntheticOracleParams):
    """Base accuracy per enabled exit position plus the final classifier.

    Raw logistic accuracies are clamped monotone along depth, and the final
    classifier never falls below any branch.
    """
    span = params.accuracy_ceiling - params.accuracy_floor

    def logistic(depth, capacity):
        z = params.logit_bias + params.depth_gain * depth + params.capacity_gain * capacity
        return params.accuracy_floor + span * float(_sigmoid(z))

    positions = g.enabled_positions()
    raw_by_position = {
        p: logistic(p, branch_capacity(g.exits[p - 1], params)) for p in positions
    }
    accs = []
    running = 0.0
    for p in positions:
        running = max(running, raw_by_position[p])
        accs.append(running)
    final = logistic(params.final_depth, params.final_capacity)
    final = max([final] + accs)
    return tuple(accs), final


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def synthetic_evaluate(g: Genome, space: SearchSpace, params: SyntheticOracleParams,
                       n_samples: int, seed: int):
    """Deterministic fake evaluation; returns (EvalTrace, final-exit error)."""
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    gid = genome_id(g, space)
    rng = np.random.default_rng(_stable_seed(gid, params.noise_seed, seed))
    positions = g.enabled_positions()
    branch_accs, final_acc = exit_accuracies(g, params)
    accs = np.array(list(branch_accs) + [final_acc])
    e = len(accs)

    # one latent difficulty per sample makes correctness nested across exits
    difficulty = rng.random(n_samples)
    correct = difficulty[:, None] < accs[None, :]
    ac, bc = params.margin_correct
    ai, bi = params.margin_incorrect
    margins = np.where(
        correct,
        rng.beta(ac, bc, size=(n_samples, e)),
        rng.beta(ai, bi, size=(n_samples, e)),
    )
    trace = EvalTrace(
        margins=margins,
        correct=correct,
        exit_positions=positions,
        genome_id=gid,
        seed=seed,
    )
    measured_error = 1.0 - float(correct[:, -1].mean())
    return trace, measured_error


@dataclass(frozen=True)
class EvaluatorRequest:
    """Wire-protocol v1 request document."""

    genome: dict                 # decoded JSON form
    space: dict
    dataset_id: str
    training_epochs: int
    loss_weight: float
    seed: int
    output_path: str
    options: dict = None

    def __post_init__(self):
        if self.training_epochs < 1:
            raise ContractViolation("training_epochs must be >= 1")

    def to_dict(self):
        return {
            "schema_version": WIRE_SCHEMA_VERSION,
            "genome": self.genome,
            "space": self.space,
            "dataset_id": self.dataset_id,
            "training_epochs": self.training_epochs,
            "loss_weight": self.loss_weight,
            "seed": self.seed,
            "output_path": self.output_path,
            "options": self.options or {},
        }


def _validate_against_genome(trace: EvalTrace, g: Genome, path):
    expected = g.enabled_positions()
    if trace.n_exits == len(expected):
        raise MalformedTraceError(
            f"{path}: response is missing the final-exit column "
            f"({trace.n_exits} columns for {len(expected)} enabled exits)"
        )
    if trace.n_exits != len(expected) + 1:
        raise MalformedTraceError(
            f"{path}: trace has {trace.n_exits} columns, genome expects "
            f"{len(expected)} enabled exits plus the final classifier"
        )
    if tuple(trace.exit_positions) != tuple(expected):
        raise MalformedTraceError(
            f"{path}: trace exit positions {trace.exit_positions} != genome's {expected}"
        )


def external_evaluate(request: EvaluatorRequest, command, workdir, timeout=None,
                      expected_genome: Genome = None):
    """Run one external evaluation and parse its trace.

    ``command`` is the evaluator argv prefix (string or list); the request
    path is appended. Returns (EvalTrace, footer dict).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    request_path = workdir / "request.json"
    request_path.write_text(json.dumps(request.to_dict(), indent=2))
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    argv.append(str(request_path))
    try:
        proc = subprocess.run(
            argv,
            cwd=workdir,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except (subprocess.TimeoutExpired, OSError) as exc:
        raise EvaluatorUnavailableError(f"evaluator {argv[0]!r} failed to run: {exc}") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
        raise EvaluatorUnavailableError(
            f"evaluator exited with status {proc.returncode}: {' | '.join(tail)}"
        )
    trace_path = workdir / request.output_path
    if not trace_path.exists():
        raise MalformedTraceError(f"evaluator wrote no trace file at {trace_path}")
    trace, footer = read_trace(trace_path)
    if footer is not None and footer.get("failed"):
        raise EvaluatorUnavailableError(
            f"evaluator marked the run failed: {footer.get('reason', 'unknown reason')}"
        )
    if footer is None or "measured_error" not in footer:
        raise MalformedTraceError(f"{trace_path}: footer missing field 'measured_error'")
    if expected_genome is not None:
        _validate_against_genome(trace, expected_genome, trace_path)
    return trace, footer


class SyntheticEvaluator:
    """In-process evaluator handle for searches without a trainer."""

    kind = "synthetic"

    def __init__(self, space: SearchSpace, params: SyntheticOracleParams = None,
                 n_samples: int = 1500):
        self.space = space
        self.params = params or SyntheticOracleParams()
        self.n_samples = n_samples

    def evaluate(self, g: Genome, seed: int, training_epochs: int = None):
        return synthetic_evaluate(g, self.space, self.params, self.n_samples, seed)

    def describe(self):
        return {"kind": self.kind, "n_samples": self.n_samples,
                "params": self.params.to_dict()}


class ExternalEvaluator:
    """Subprocess evaluator handle speaking wire protocol v1."""

    kind = "external"

    def __init__(self, command, space: SearchSpace, dataset_id: str,
                 training_epochs: int = 5, loss_weight: float = 1.0,
                 workdir=None, timeout: float = 1800.0, options: dict = None):
        self.command = command
        self.space = space
        self.dataset_id = dataset_id
        self.training_epochs = training_epochs
        self.loss_weight = loss_weight
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="exitnas-eval-"))
        self.timeout = timeout
        self.options = options or {}

    def evaluate(self, g: Genome, seed: int, training_epochs: int = None):
        gid = genome_id(g, self.space)
        job_dir = self.workdir / f"{gid}-{seed}"
        request = EvaluatorRequest(
            genome=genome_to_dict(g, self.space),
            space=self.space.to_dict(),
            dataset_id=self.dataset_id,
            training_epochs=training_epochs or self.training_epochs,
            loss_weight=self.loss_weight,
            seed=seed,
            output_path="trace.csv",
            options=self.options,
        )
        trace, footer = external_evaluate(
            request, self.command, job_dir, timeout=self.timeout, expected_genome=g
        )
        logger.info("external evaluation %s done: error=%.4f", gid, footer["measured_error"])
        return trace, float(footer["measured_error"])

    def describe(self):
        return {
            "kind": self.kind,
            "command": self.command,
            "dataset_id": self.dataset_id,
            "training_epochs": self.training_epochs,
            "loss_weight": self.loss_weight,
            "options": self.options,
        }
