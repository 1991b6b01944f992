"""Search-space encoding for early-exit network candidates.

A candidate is a fixed-length genome: backbone genes (block depths, per-slot
kernel sizes and expansion rates, input resolution), a per-position confidence
threshold vector, and one two-block exit-branch configuration per potential
exit position. Layer slots beyond a block's active depth stay in the genome
with valid values so variation operators never produce structurally broken
candidates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import GenomeDecodeError, GenomeValidationError, InvalidConfigurationError

NUM_BLOCKS = 5
NUM_EXITS = 5

DEFAULT_THRESHOLD_GRID = tuple(round(i / 10, 1) for i in range(11))


def _check_options(name, options, *, allow_bool=False):
    if len(options) == 0:
        raise InvalidConfigurationError(f"{name}: option list is empty")
    if len(set(options)) != len(options):
        raise InvalidConfigurationError(f"{name}: option list has duplicates")
    if not allow_bool:
        for v in options:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise InvalidConfigurationError(f"{name}: bad option value {v!r}")


@dataclass(frozen=True)
class SearchSpace:
    """Option lists and structural constants that define the genome alphabet.

    ``block_channels`` and ``stem_channels`` are not genes; they fix the
    width schedule the cost model and trainers decode against.
    """

    depth_options: tuple = (2, 3, 4)
    kernel_options: tuple = (3, 5, 7)
    expansion_options: tuple = (3, 4, 6)
    resolution_options: tuple = (24, 28, 32)
    exit_interp_options: tuple = (8, 10, 12)
    exit_kernel_options: tuple = (3, 5)
    exit_expansion_options: tuple = (1, 2)
    threshold_grid: tuple = DEFAULT_THRESHOLD_GRID
    stem_channels: int = 8
    block_channels: tuple = (12, 16, 24, 32, 48)
    num_classes: int = 10

    def __post_init__(self):
        for name in (
            "depth_options",
            "kernel_options",
            "expansion_options",
            "resolution_options",
            "exit_interp_options",
            "exit_kernel_options",
            "exit_expansion_options",
        ):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            _check_options(name, value)
            if any(v <= 0 for v in value):
                raise InvalidConfigurationError(f"{name}: options must be positive")
        grid = tuple(float(t) for t in self.threshold_grid)
        object.__setattr__(self, "threshold_grid", grid)
        _check_options("threshold_grid", grid)
        if sorted(grid) != list(grid):
            raise InvalidConfigurationError("threshold_grid must be sorted ascending")
        if grid[0] < 0.0 or grid[-1] != 1.0:
            raise InvalidConfigurationError("threshold_grid must lie in [0, 1] and contain 1.0")
        channels = tuple(int(c) for c in self.block_channels)
        object.__setattr__(self, "block_channels", channels)
        if len(channels) != NUM_BLOCKS or any(c < 1 for c in channels):
            raise InvalidConfigurationError(f"block_channels must be {NUM_BLOCKS} positive ints")
        if self.stem_channels < 1:
            raise InvalidConfigurationError("stem_channels must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfigurationError("num_classes must be >= 2")

    @property
    def max_depth(self):
        return max(self.depth_options)

    @property
    def exit_interp_options_block2(self):
        """Block-2 interpolation alphabet: 0 (disabled) plus the regular sizes."""
        return (0,) + self.exit_interp_options

    def to_dict(self):
        return {
            "depth_options": list(self.depth_options),
            "kernel_options": list(self.kernel_options),
            "expansion_options": list(self.expansion_options),
            "resolution_options": list(self.resolution_options),
            "exit_interp_options": list(self.exit_interp_options),
            "exit_kernel_options": list(self.exit_kernel_options),
            "exit_expansion_options": list(self.exit_expansion_options),
            "threshold_grid": list(self.threshold_grid),
            "stem_channels": self.stem_channels,
            "block_channels": list(self.block_channels),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for key in cls.__dataclass_fields__:
            if key in d:
                v = d[key]
                kwargs[key] = tuple(v) if isinstance(v, (list, tuple)) else v
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigurationError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class BackboneGenes:
    block_depths: tuple          # NUM_BLOCKS entries
    kernel_sizes: tuple          # NUM_BLOCKS * max_depth entries, block-major
    expansion_rates: tuple       # NUM_BLOCKS * max_depth entries, block-major
    input_resolution: int

    def kernel_at(self, block, slot, max_depth):
        return self.kernel_sizes[block * max_depth + slot]

    def expansion_at(self, block, slot, max_depth):
        return self.expansion_rates[block * max_depth + slot]


@dataclass(frozen=True)
class ExitBlockConfig:
    interpolation_size: int      # 0 = block disabled (second block only)
    kernel_size: int
    expansion_width: int
    maxpool_enabled: bool

    @property
    def enabled(self):
        return self.interpolation_size != 0


@dataclass(frozen=True)
class ExitBranchConfig:
    block1: ExitBlockConfig
    block2: ExitBlockConfig


@dataclass(frozen=True)
class ThresholdVector:
    thresholds: tuple            # NUM_EXITS entries in [0, 1]; 1 disables the exit

    def enabled_positions(self):
        """1-based backbone positions whose exit is active (threshold < 1)."""
        return tuple(i + 1 for i, t in enumerate(self.thresholds) if t < 1.0)


@dataclass(frozen=True)
class Genome:
    backbone: BackboneGenes
    thresholds: ThresholdVector
    exits: tuple                 # NUM_EXITS ExitBranchConfig entries

    def enabled_positions(self):
        return self.thresholds.enabled_positions()


# ---------------------------------------------------------------------------
# gene layout: one (name, option tuple) per position of the flat vector
# ---------------------------------------------------------------------------

_BOOL_OPTIONS = (False, True)


def gene_layout(space: SearchSpace):
    """Ordered (name, options) pairs defining the flat integer encoding."""
    md = space.max_depth
    layout = [("resolution", space.resolution_options)]
    for b in range(NUM_BLOCKS):
        layout.append((f"depth[{b}]", space.depth_options))
    for b in range(NUM_BLOCKS):
        for s in range(md):
            layout.append((f"kernel[{b}][{s}]", space.kernel_options))
    for b in range(NUM_BLOCKS):
        for s in range(md):
            layout.append((f"expansion[{b}][{s}]", space.expansion_options))
    for p in range(NUM_EXITS):
        layout.append((f"threshold[{p}]", space.threshold_grid))
    for p in range(NUM_EXITS):
        layout.append((f"exit[{p}].block1.interp", space.exit_interp_options))
        layout.append((f"exit[{p}].block1.kernel", space.exit_kernel_options))
        layout.append((f"exit[{p}].block1.expansion", space.exit_expansion_options))
        layout.append((f"exit[{p}].block1.maxpool", _BOOL_OPTIONS))
        layout.append((f"exit[{p}].block2.interp", space.exit_interp_options_block2))
        layout.append((f"exit[{p}].block2.kernel", space.exit_kernel_options))
        layout.append((f"exit[{p}].block2.expansion", space.exit_expansion_options))
        layout.append((f"exit[{p}].block2.maxpool", _BOOL_OPTIONS))
    return layout


def genome_length(space: SearchSpace):
    return len(gene_layout(space))


def _gene_values(g: Genome, space: SearchSpace):
    values = [g.backbone.input_resolution]
    values.extend(g.backbone.block_depths)
    values.extend(g.backbone.kernel_sizes)
    values.extend(g.backbone.expansion_rates)
    values.extend(g.thresholds.thresholds)
    for branch in g.exits:
        for block in (branch.block1, branch.block2):
            values.extend(
                [
                    block.interpolation_size,
                    block.kernel_size,
                    block.expansion_width,
                    bool(block.maxpool_enabled),
                ]
            )
    return values


def _genome_from_values(values, space: SearchSpace):
    md = space.max_depth
    it = iter(values)
    resolution = next(it)
    depths = tuple(next(it) for _ in range(NUM_BLOCKS))
    kernels = tuple(next(it) for _ in range(NUM_BLOCKS * md))
    expansions = tuple(next(it) for _ in range(NUM_BLOCKS * md))
    thresholds = ThresholdVector(tuple(next(it) for _ in range(NUM_EXITS)))
    exits = []
    for _ in range(NUM_EXITS):
        blocks = []
        for _ in range(2):
            blocks.append(
                ExitBlockConfig(
                    interpolation_size=next(it),
                    kernel_size=next(it),
                    expansion_width=next(it),
                    maxpool_enabled=bool(next(it)),
                )
            )
        exits.append(ExitBranchConfig(block1=blocks[0], block2=blocks[1]))
    backbone = BackboneGenes(
        block_depths=depths,
        kernel_sizes=kernels,
        expansion_rates=expansions,
        input_resolution=resolution,
    )
    return Genome(backbone=backbone, thresholds=thresholds, exits=tuple(exits))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _as_rng(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _choice(rng, options):
    return options[int(rng.integers(len(options)))]


def sample_exit_layers(max_depth, interp_options, kernel_options, expansion_options, rng_seed):
    """Draw one exit-branch configuration per position.

    Block-1 fields are sampled uniformly from the given option lists; the
    block-2 interpolation alphabet is the option list with 0 prepended so the
    second block can come out disabled. Max-pool flags are coin flips. Fields
    of a disabled second block keep their sampled values (inert genes).
    """
    interp_options = tuple(interp_options)
    kernel_options = tuple(kernel_options)
    expansion_options = tuple(expansion_options)
    for name, opts in (
        ("interp_options", interp_options),
        ("kernel_options", kernel_options),
        ("expansion_options", expansion_options),
    ):
        _check_options(name, opts)
    if max_depth < 1:
        raise InvalidConfigurationError("max_depth must be >= 1")
    interp_b2 = (0,) + interp_options
    rng = _as_rng(rng_seed)
    branches = []
    for _ in range(max_depth):
        block1 = ExitBlockConfig(
            interpolation_size=_choice(rng, interp_options),
            kernel_size=_choice(rng, kernel_options),
            expansion_width=_choice(rng, expansion_options),
            maxpool_enabled=bool(rng.integers(2)),
        )
        block2 = ExitBlockConfig(
            interpolation_size=_choice(rng, interp_b2),
            kernel_size=_choice(rng, kernel_options),
            expansion_width=_choice(rng, expansion_options),
            maxpool_enabled=bool(rng.integers(2)),
        )
        branches.append(ExitBranchConfig(block1=block1, block2=block2))
    return branches


def sample_genome(space: SearchSpace, rng_seed) -> Genome:
    """Uniform independent draw of every gene, thresholds from the grid."""
    rng = _as_rng(rng_seed)
    md = space.max_depth
    resolution = _choice(rng, space.resolution_options)
    depths = tuple(_choice(rng, space.depth_options) for _ in range(NUM_BLOCKS))
    kernels = tuple(_choice(rng, space.kernel_options) for _ in range(NUM_BLOCKS * md))
    expansions = tuple(_choice(rng, space.expansion_options) for _ in range(NUM_BLOCKS * md))
    thresholds = ThresholdVector(
        tuple(_choice(rng, space.threshold_grid) for _ in range(NUM_EXITS))
    )
    exits = tuple(
        sample_exit_layers(
            NUM_EXITS,
            space.exit_interp_options,
            space.exit_kernel_options,
            space.exit_expansion_options,
            rng,
        )
    )
    backbone = BackboneGenes(
        block_depths=depths,
        kernel_sizes=kernels,
        expansion_rates=expansions,
        input_resolution=resolution,
    )
    return Genome(backbone=backbone, thresholds=thresholds, exits=exits)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(g: Genome, space: SearchSpace):
    """Collect invariant violations; an empty list means the genome is valid."""
    md = space.max_depth
    v = []
    bb = g.backbone
    if len(bb.block_depths) != NUM_BLOCKS:
        v.append(f"backbone.block_depths: expected {NUM_BLOCKS} entries")
    else:
        for i, d in enumerate(bb.block_depths):
            if d not in space.depth_options:
                v.append(f"backbone.block_depths[{i}]={d} not in {space.depth_options}")
    for name, genes, options in (
        ("kernel_sizes", bb.kernel_sizes, space.kernel_options),
        ("expansion_rates", bb.expansion_rates, space.expansion_options),
    ):
        if len(genes) != NUM_BLOCKS * md:
            v.append(f"backbone.{name}: expected {NUM_BLOCKS * md} entries, got {len(genes)}")
        else:
            for i, x in enumerate(genes):
                if x not in options:
                    v.append(f"backbone.{name}[{i}]={x} not in {options}")
    if bb.input_resolution not in space.resolution_options:
        v.append(
            f"backbone.input_resolution={bb.input_resolution} not in {space.resolution_options}"
        )

    ts = g.thresholds.thresholds
    if len(ts) != NUM_EXITS:
        v.append(f"thresholds: expected {NUM_EXITS} entries, got {len(ts)}")
    else:
        for i, t in enumerate(ts):
            if not (0.0 <= t <= 1.0):
                v.append(f"thresholds[{i}]={t} threshold out of range [0, 1]")
            elif t not in space.threshold_grid:
                v.append(f"thresholds[{i}]={t} not on the configured threshold grid")

    if len(g.exits) != NUM_EXITS:
        v.append(f"exits: expected {NUM_EXITS} entries, got {len(g.exits)}")
        return v
    for p, branch in enumerate(g.exits):
        b1, b2 = branch.block1, branch.block2
        if b1.interpolation_size == 0:
            v.append(f"exits[{p}].block1: block1 disabled (interpolation_size = 0)")
        elif b1.interpolation_size not in space.exit_interp_options:
            v.append(
                f"exits[{p}].block1.interpolation_size={b1.interpolation_size} "
                f"not in {space.exit_interp_options}"
            )
        if b2.interpolation_size not in space.exit_interp_options_block2:
            v.append(
                f"exits[{p}].block2.interpolation_size={b2.interpolation_size} "
                f"not in {space.exit_interp_options_block2}"
            )
        for bl_name, bl in (("block1", b1), ("block2", b2)):
            if bl.kernel_size not in space.exit_kernel_options:
                v.append(
                    f"exits[{p}].{bl_name}.kernel_size={bl.kernel_size} "
                    f"not in {space.exit_kernel_options}"
                )
            if bl.expansion_width not in space.exit_expansion_options:
                v.append(
                    f"exits[{p}].{bl_name}.expansion_width={bl.expansion_width} "
                    f"not in {space.exit_expansion_options}"
                )
    return v


def require_valid(g: Genome, space: SearchSpace):
    violations = validate(g, space)
    if violations:
        raise GenomeValidationError(violations)


# ---------------------------------------------------------------------------
# flat integer encoding
# ---------------------------------------------------------------------------

def encode(g: Genome, space: SearchSpace) -> np.ndarray:
    """Map a valid genome to its flat vector of option indices."""
    layout = gene_layout(space)
    values = _gene_values(g, space)
    if len(values) != len(layout):
        raise GenomeValidationError([f"gene count {len(values)} != layout {len(layout)}"])
    vec = np.empty(len(layout), dtype=np.int64)
    for i, ((name, options), value) in enumerate(zip(layout, values)):
        try:
            vec[i] = options.index(value)
        except ValueError:
            raise GenomeValidationError([f"{name}={value!r} not in {options}"]) from None
    return vec


def decode(vec, space: SearchSpace) -> Genome:
    """Inverse of :func:`encode`; raises on malformed vectors."""
    layout = gene_layout(space)
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] != len(layout):
        raise GenomeDecodeError(f"expected vector of length {len(layout)}, got shape {vec.shape}")
    if not np.issubdtype(vec.dtype, np.integer):
        if not np.all(vec == np.floor(vec)):
            raise GenomeDecodeError("vector entries must be integers")
        vec = vec.astype(np.int64)
    values = []
    for i, (name, options) in enumerate(layout):
        idx = int(vec[i])
        if not (0 <= idx < len(options)):
            raise GenomeDecodeError(f"{name}: index {idx} out of range for {len(options)} options")
        values.append(options[idx])
    return _genome_from_values(values, space)


def genome_id(g: Genome, space: SearchSpace) -> str:
    """Stable short digest of the encoded genome (used for dedup and file names)."""
    payload = json.dumps(
        {"space": space.to_dict(), "genes": encode(g, space).tolist()},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# variation operators
# ---------------------------------------------------------------------------

def mutate(g: Genome, space: SearchSpace, per_gene_probability, rng_seed) -> Genome:
    """Re-sample each gene from its option list with the given probability."""
    if not (0.0 <= per_gene_probability <= 1.0):
        raise InvalidConfigurationError(f"mutation probability {per_gene_probability} not in [0, 1]")
    require_valid(g, space)
    layout = gene_layout(space)
    vec = encode(g, space)
    rng = _as_rng(rng_seed)
    hit = rng.random(len(layout)) < per_gene_probability
    for i in np.nonzero(hit)[0]:
        vec[i] = int(rng.integers(len(layout[i][1])))
    return decode(vec, space)


def crossover(a: Genome, b: Genome, space: SearchSpace, rng_seed):
    """Uniform gene-wise exchange; preserves the per-position value multiset."""
    for name, g in (("a", a), ("b", b)):
        violations = validate(g, space)
        if violations:
            raise InvalidConfigurationError(
                f"crossover parent {name} does not belong to this search space: {violations[0]}"
            )
    va = encode(a, space)
    vb = encode(b, space)
    rng = _as_rng(rng_seed)
    swap = rng.random(len(va)) < 0.5
    child1 = np.where(swap, vb, va)
    child2 = np.where(swap, va, vb)
    return decode(child1, space), decode(child2, space)


def with_thresholds(g: Genome, thresholds: ThresholdVector) -> Genome:
    return replace(g, thresholds=thresholds)


# ---------------------------------------------------------------------------
# branch-space enumeration
# ---------------------------------------------------------------------------

def enumerate_branch_support(interp_options, kernel_options, expansion_options):
    """Every (block1, block2) value pair the sampler can emit, inert fields included."""
    interp_options = tuple(interp_options)
    kernel_options = tuple(kernel_options)
    expansion_options = tuple(expansion_options)
    block1s = [
        ExitBlockConfig(i, k, e, bool(m))
        for i in interp_options
        for k in kernel_options
        for e in expansion_options
        for m in (0, 1)
    ]
    block2s = [
        ExitBlockConfig(i, k, e, bool(m))
        for i in (0,) + interp_options
        for k in kernel_options
        for e in expansion_options
        for m in (0, 1)
    ]
    return [ExitBranchConfig(b1, b2) for b1 in block1s for b2 in block2s]


def canonical_branch(branch: ExitBranchConfig) -> ExitBranchConfig:
    """Collapse inert block-2 fields so equal architectures compare equal."""
    if branch.block2.enabled:
        return branch
    return ExitBranchConfig(branch.block1, ExitBlockConfig(0, 0, 0, False))


def enumerate_branch_architectures(interp_options, kernel_options, expansion_options):
    """Distinct single-branch architectures reachable from the option lists."""
    seen = {}
    for branch in enumerate_branch_support(interp_options, kernel_options, expansion_options):
        seen[canonical_branch(branch)] = None
    return list(seen)


# ---------------------------------------------------------------------------
# JSON form
# ---------------------------------------------------------------------------

def _block_to_dict(b: ExitBlockConfig):
    return {
        "interpolation_size": b.interpolation_size,
        "kernel_size": b.kernel_size,
        "expansion_width": b.expansion_width,
        "maxpool_enabled": bool(b.maxpool_enabled),
    }


def genome_to_dict(g: Genome, space: SearchSpace):
    md = space.max_depth
    ks = [list(g.backbone.kernel_sizes[b * md:(b + 1) * md]) for b in range(NUM_BLOCKS)]
    er = [list(g.backbone.expansion_rates[b * md:(b + 1) * md]) for b in range(NUM_BLOCKS)]
    return {
        "backbone": {
            "block_depths": list(g.backbone.block_depths),
            "kernel_sizes": ks,
            "expansion_rates": er,
            "input_resolution": g.backbone.input_resolution,
        },
        "thresholds": list(g.thresholds.thresholds),
        "exits": [
            {"block1": _block_to_dict(br.block1), "block2": _block_to_dict(br.block2)}
            for br in g.exits
        ],
    }


def _block_from_dict(d):
    return ExitBlockConfig(
        interpolation_size=int(d["interpolation_size"]),
        kernel_size=int(d["kernel_size"]),
        expansion_width=int(d["expansion_width"]),
        maxpool_enabled=bool(d["maxpool_enabled"]),
    )


def genome_from_dict(d) -> Genome:
    bb = d["backbone"]
    kernels = tuple(k for row in bb["kernel_sizes"] for k in row)
    expansions = tuple(e for row in bb["expansion_rates"] for e in row)
    backbone = BackboneGenes(
        block_depths=tuple(int(x) for x in bb["block_depths"]),
        kernel_sizes=tuple(int(x) for x in kernels),
        expansion_rates=tuple(int(x) for x in expansions),
        input_resolution=int(bb["input_resolution"]),
    )
    thresholds = ThresholdVector(tuple(float(t) for t in d["thresholds"]))
    exits = tuple(
        ExitBranchConfig(_block_from_dict(e["block1"]), _block_from_dict(e["block2"]))
        for e in d["exits"]
    )
    return Genome(backbone=backbone, thresholds=thresholds, exits=exits)
