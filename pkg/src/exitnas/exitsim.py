"""Confidence-based early-exit policy over evaluation traces.

A trace stores, per validation sample and per attached exit (final classifier
last), the softmax score margin and whether the prediction was correct. The
policy routes each sample to the first exit whose margin strictly exceeds its
threshold; a threshold of 1 can never fire because margins stay in [0, 1].

Cost accounting here follows the attached graph: a branch that is present in
the profile is charged at later exits even if its threshold is 1. Pruning a
branch out of the deployed graph is modelled by restricting the trace and
profile first (see tuner).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import macmodel
from .errors import ContractViolation, MalformedTraceError
from .genome import ThresholdVector

TRACE_SCHEMA = "exit-trace/v1"


@dataclass(frozen=True, eq=False)
class EvalTrace:
    margins: np.ndarray          # (N, E) float64, final column last
    correct: np.ndarray          # (N, E) bool
    exit_positions: tuple        # 1-based backbone positions, one per non-final column
    genome_id: str = ""
    seed: int = 0

    def __post_init__(self):
        margins = np.asarray(self.margins, dtype=np.float64)
        correct = np.asarray(self.correct, dtype=bool)
        if margins.ndim != 2 or margins.shape[0] < 1 or margins.shape[1] < 1:
            raise ContractViolation(f"margins must be (N, E) with N,E >= 1, got {margins.shape}")
        if correct.shape != margins.shape:
            raise ContractViolation(
                f"correct shape {correct.shape} != margins shape {margins.shape}"
            )
        if np.any(margins < 0.0) or np.any(margins > 1.0):
            bad = np.argwhere((margins < 0.0) | (margins > 1.0))[0]
            raise ContractViolation(
                f"margins[{bad[0]}][{bad[1]}] = {margins[bad[0], bad[1]]} outside [0, 1]"
            )
        positions = tuple(int(p) for p in self.exit_positions)
        if len(positions) != margins.shape[1] - 1:
            raise ContractViolation(
                f"{len(positions)} exit positions for {margins.shape[1]} trace columns"
            )
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ContractViolation("exit positions must be strictly increasing")
        margins.setflags(write=False)
        correct.setflags(write=False)
        object.__setattr__(self, "margins", margins)
        object.__setattr__(self, "correct", correct)
        object.__setattr__(self, "exit_positions", positions)

    @property
    def n_samples(self):
        return self.margins.shape[0]

    @property
    def n_exits(self):
        """Number of trace columns including the final classifier."""
        return self.margins.shape[1]

    def restrict(self, keep_mask) -> "EvalTrace":
        """Drop non-final columns where keep_mask is False (graph pruning)."""
        keep_mask = list(keep_mask)
        if len(keep_mask) != self.n_exits - 1:
            raise ContractViolation("keep_mask length must match non-final columns")
        cols = [j for j, k in enumerate(keep_mask) if k] + [self.n_exits - 1]
        return EvalTrace(
            margins=self.margins[:, cols],
            correct=self.correct[:, cols],
            exit_positions=tuple(p for p, k in zip(self.exit_positions, keep_mask) if k),
            genome_id=self.genome_id,
            seed=self.seed,
        )


@dataclass(frozen=True, eq=False)
class PolicyResult:
    exit_index: np.ndarray       # (N,) column index each sample terminated at
    exit_counts: tuple           # samples per column, final last (sums to N)
    utilization: tuple           # exit_counts / N
    accuracy: float
    average_macs: float          # raw MACs (not millions)
    n_samples: int


def score_margin(probabilities) -> float:
    """Top-1 minus top-2 softmax probability."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ContractViolation("probability vector must have at least 2 classes")
    if np.any(p < 0.0):
        raise ContractViolation("probabilities must be >= 0")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ContractViolation(f"probabilities sum to {float(p.sum())!r}, expected 1")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def _resolve_thresholds(trace: EvalTrace, thresholds):
    if isinstance(thresholds, ThresholdVector):
        return tuple(thresholds.thresholds[p - 1] for p in trace.exit_positions)
    t = tuple(float(x) for x in thresholds)
    if len(t) != trace.n_exits - 1:
        raise ContractViolation(
            f"{len(t)} thresholds for a trace with {trace.n_exits - 1} exit columns"
        )
    return t


def assign_exits(trace: EvalTrace, thresholds, prof: macmodel.MacProfile) -> PolicyResult:
    """Route every sample and summarize accuracy, utilization and average MACs.

    ``thresholds`` is either one value per non-final trace column or a full
    ThresholdVector, which is sliced at the trace's exit positions. The
    profile must describe exactly the trace's attached exits.
    """
    t = _resolve_thresholds(trace, thresholds)
    if tuple(prof.exit_positions) != tuple(trace.exit_positions):
        raise ContractViolation(
            f"profile exits {prof.exit_positions} != trace exits {trace.exit_positions}"
        )
    n, e = trace.n_samples, trace.n_exits
    if e > 1:
        passes = trace.margins[:, : e - 1] > np.asarray(t)[None, :]
        any_pass = passes.any(axis=1)
        first = np.argmax(passes, axis=1)
        exit_idx = np.where(any_pass, first, e - 1)
    else:
        exit_idx = np.full(n, 0, dtype=np.int64)
    counts = np.bincount(exit_idx, minlength=e).astype(np.int64)
    correct_total = int(trace.correct[np.arange(n), exit_idx].sum())
    utilization = tuple(int(c) / n for c in counts)
    avg = macmodel.average_macs(prof, utilization)
    return PolicyResult(
        exit_index=exit_idx,
        exit_counts=tuple(int(c) for c in counts),
        utilization=utilization,
        accuracy=correct_total / n,
        average_macs=avg,
        n_samples=n,
    )


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------
#
# Line 1: JSON header {"schema", "n_samples", "n_exits", "exit_positions",
#         "genome_id", "seed", "body": "csv"|"binary", "byte_order": "little"}.
# CSV body: one line per sample, E margin floats then E correctness 0/1 ints,
#         columns ordered exit 1 .. exit E-1, final.
# Binary body: N*E float64 margins (little-endian, row-major) followed by
#         N*E uint8 correctness flags.
# Optional last line: JSON footer emitted by evaluators
#         ({"measured_error", "wall_time_s", "evaluator_version"}).


def write_trace(path, trace: EvalTrace, body="csv", footer=None):
    if body not in ("csv", "binary"):
        raise ContractViolation(f"unknown trace body format {body!r}")
    header = {
        "schema": TRACE_SCHEMA,
        "n_samples": trace.n_samples,
        "n_exits": trace.n_exits,
        "exit_positions": list(trace.exit_positions),
        "genome_id": trace.genome_id,
        "seed": trace.seed,
        "body": body,
        "byte_order": "little",
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        if body == "csv":
            for i in range(trace.n_samples):
                cells = [repr(float(m)) for m in trace.margins[i]]
                cells += [str(int(c)) for c in trace.correct[i]]
                f.write((",".join(cells) + "\n").encode())
        else:
            f.write(trace.margins.astype("<f8").tobytes(order="C"))
            f.write(trace.correct.astype(np.uint8).tobytes(order="C"))
            f.write(b"\n")
        if footer is not None:
            f.write(json.dumps(footer).encode() + b"\n")


def _parse_header(line, path):
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedTraceError(f"{path}: unreadable trace header: {exc}") from exc
    if header.get("schema") != TRACE_SCHEMA:
        raise MalformedTraceError(f"{path}: schema {header.get('schema')!r} != {TRACE_SCHEMA!r}")
    for key in ("n_samples", "n_exits", "exit_positions", "body"):
        if key not in header:
            raise MalformedTraceError(f"{path}: trace header missing field {key!r}")
    return header


def read_trace(path):
    """Read a trace file; returns (EvalTrace, footer dict or None)."""
    with open(path, "rb") as f:
        header = _parse_header(f.readline().rstrip(b"\n"), path)
        n, e = int(header["n_samples"]), int(header["n_exits"])
        if n < 1 or e < 1:
            raise MalformedTraceError(f"{path}: bad dimensions n_samples={n} n_exits={e}")
        body = header["body"]
        footer_line = None
        if body == "csv":
            margins = np.empty((n, e), dtype=np.float64)
            correct = np.empty((n, e), dtype=bool)
            for i in range(n):
                line = f.readline()
                if not line:
                    raise MalformedTraceError(f"{path}: body ended at row {i}, expected {n} rows")
                cells = line.decode().strip().split(",")
                if len(cells) != 2 * e:
                    raise MalformedTraceError(
                        f"{path}: row {i} has {len(cells)} cells, expected {2 * e}"
                    )
                for j in range(e):
                    try:
                        margins[i, j] = float(cells[j])
                    except ValueError:
                        raise MalformedTraceError(
                            f"{path}: margins[{i}][{j}] = {cells[j]!r} is not a number"
                        ) from None
                for j in range(e):
                    flag = cells[e + j].strip()
                    if flag not in ("0", "1"):
                        raise MalformedTraceError(
                            f"{path}: correct[{i}][{j}] = {flag!r}, expected 0 or 1"
                        )
                    correct[i, j] = flag == "1"
            footer_line = f.readline()
        elif body == "binary":
            if header.get("byte_order", "little") != "little":
                raise MalformedTraceError(f"{path}: unsupported byte order")
            raw = f.read(n * e * 8)
            if len(raw) != n * e * 8:
                raise MalformedTraceError(f"{path}: binary margin block truncated")
            margins = np.frombuffer(raw, dtype="<f8").reshape(n, e).astype(np.float64)
            raw = f.read(n * e)
            if len(raw) != n * e:
                raise MalformedTraceError(f"{path}: binary correctness block truncated")
            flags = np.frombuffer(raw, dtype=np.uint8).reshape(n, e)
            if np.any(flags > 1):
                bad = np.argwhere(flags > 1)[0]
                raise MalformedTraceError(
                    f"{path}: correct[{bad[0]}][{bad[1]}] = {flags[bad[0], bad[1]]}, expected 0 or 1"
                )
            correct = flags.astype(bool)
            f.readline()  # newline after the binary block
            footer_line = f.readline()
        else:
            raise MalformedTraceError(f"{path}: unknown body format {body!r}")

    oob = np.argwhere((margins < 0.0) | (margins > 1.0))
    if oob.size:
        i, j = oob[0]
        raise MalformedTraceError(f"{path}: margins[{i}][{j}] = {margins[i, j]} outside [0, 1]")
    positions = tuple(int(p) for p in header["exit_positions"])
    try:
        trace = EvalTrace(
            margins=margins,
            correct=correct,
            exit_positions=positions,
            genome_id=str(header.get("genome_id", "")),
            seed=int(header.get("seed", 0)),
        )
    except ContractViolation as exc:
        raise MalformedTraceError(f"{path}: {exc}") from exc
    footer = None
    if footer_line:
        stripped = footer_line.strip()
        if stripped:
            try:
                footer = json.loads(stripped.decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise MalformedTraceError(f"{path}: unreadable trace footer: {exc}") from exc
    return trace, footer
