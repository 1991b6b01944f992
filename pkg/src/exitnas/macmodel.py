"""Analytical multiply-accumulate accounting for decoded candidates.

Two counting conventions coexist on purpose: the backbone is counted without
batch-normalization (``BACKBONE_MODE``), exit branches are counted with it
(``EXIT_MODE``). Interpolation, pooling, activations and softmax cost 0 in
both. All counts are exact integers; convert to millions only when printing.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolation, GenomeValidationError, InvalidConfigurationError
from .genome import NUM_BLOCKS, Genome, SearchSpace, validate

BACKBONE_MODE = "backbone_mode"
EXIT_MODE = "exit_mode"

_KINDS = (
    "conv",
    "depthwise_conv",
    "batchnorm",
    "linear",
    "maxpool",
    "interpolate",
    "relu",
    "global_avgpool",
    "softmax",
)

_ZERO_COST_KINDS = {"maxpool", "interpolate", "relu", "global_avgpool", "softmax"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    in_channels: int = 1
    out_channels: int = 1
    out_height: int = 1
    out_width: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidConfigurationError(f"unknown layer kind {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.out_height, self.out_width) < 1:
            raise InvalidConfigurationError(f"{self.kind}: channels and spatial dims must be >= 1")
        if self.groups < 1 or self.in_channels % self.groups != 0:
            raise InvalidConfigurationError(
                f"{self.kind}: groups={self.groups} must divide in_channels={self.in_channels}"
            )
        if self.kind in ("conv", "depthwise_conv") and self.kernel < 1:
            raise InvalidConfigurationError(f"{self.kind}: kernel must be >= 1")
        if self.kind == "depthwise_conv" and self.groups != self.in_channels:
            raise InvalidConfigurationError(
                f"depthwise_conv: groups={self.groups} must equal in_channels={self.in_channels}"
            )


def layer_macs(layer: LayerSpec, convention) -> int:
    """Exact MAC count of one layer under the given counting convention."""
    if convention not in (BACKBONE_MODE, EXIT_MODE):
        raise ContractViolation(f"unknown convention {convention!r}")
    k = layer.kind
    if k in ("conv", "depthwise_conv"):
        return (
            layer.kernel * layer.kernel
            * (layer.in_channels // layer.groups)
            * layer.out_channels
            * layer.out_height
            * layer.out_width
        )
    if k == "linear":
        return layer.in_channels * layer.out_channels
    if k == "batchnorm":
        if convention == EXIT_MODE:
            return layer.out_channels * layer.out_height * layer.out_width
        return 0
    if k in _ZERO_COST_KINDS:
        return 0
    raise ContractViolation(f"unhandled layer kind {k!r}")


def _conv_out(size, stride):
    # odd kernels with same padding: out = floor((in - 1) / stride) + 1
    return (size - 1) // stride + 1


def _pool_out(size):
    # 2x2 max pool, stride 2, no padding
    return (size - 2) // 2 + 1


def _bottleneck_layers(in_ch, out_ch, expansion, kernel, stride, in_size):
    """Expand 1x1 -> depthwise kxk -> project 1x1, BN after each conv."""
    mid = in_ch * expansion
    out_size = _conv_out(in_size, stride)
    layers = [
        LayerSpec("conv", 1, in_ch, mid, in_size, in_size),
        LayerSpec("batchnorm", 0, mid, mid, in_size, in_size),
        LayerSpec("relu", 0, mid, mid, in_size, in_size),
        LayerSpec("depthwise_conv", kernel, mid, mid, out_size, out_size, groups=mid),
        LayerSpec("batchnorm", 0, mid, mid, out_size, out_size),
        LayerSpec("relu", 0, mid, mid, out_size, out_size),
        LayerSpec("conv", 1, mid, out_ch, out_size, out_size),
        LayerSpec("batchnorm", 0, out_ch, out_ch, out_size, out_size),
    ]
    return layers, out_size


def _head_layers(channels, size, num_classes):
    return [
        LayerSpec("global_avgpool", 0, channels, channels, 1, 1),
        LayerSpec("linear", 0, channels, num_classes, 1, 1),
        LayerSpec("softmax", 0, num_classes, num_classes, 1, 1),
    ]


def _branch_layers(branch, in_ch, num_classes):
    layers = []
    ch = in_ch
    for block in (branch.block1, branch.block2):
        if not block.enabled:
            continue
        size = block.interpolation_size
        out_ch = ch * block.expansion_width
        layers.append(LayerSpec("interpolate", 0, ch, ch, size, size))
        layers.append(LayerSpec("conv", block.kernel_size, ch, out_ch, size, size))
        layers.append(LayerSpec("batchnorm", 0, out_ch, out_ch, size, size))
        layers.append(LayerSpec("relu", 0, out_ch, out_ch, size, size))
        if block.maxpool_enabled:
            size = _pool_out(size)
            layers.append(LayerSpec("maxpool", 2, out_ch, out_ch, size, size))
        ch = out_ch
    layers.extend(_head_layers(ch, 1, num_classes))
    return layers


@dataclass(frozen=True)
class DecodedNetwork:
    """Full layer inventory of a genome, branch structure for every position."""

    stem: tuple
    blocks: tuple                # per backbone block, tuple of LayerSpec
    final_head: tuple
    exit_branches: tuple         # one tuple of LayerSpec per potential position
    block_output_channels: tuple
    block_output_sizes: tuple


def decode_network(g: Genome, space: SearchSpace) -> DecodedNetwork:
    violations = validate(g, space)
    if violations:
        raise GenomeValidationError(violations)
    md = space.max_depth
    size = g.backbone.input_resolution
    stem_ch = space.stem_channels
    stem = (
        LayerSpec("conv", 3, 3, stem_ch, size, size),
        LayerSpec("batchnorm", 0, stem_ch, stem_ch, size, size),
        LayerSpec("relu", 0, stem_ch, stem_ch, size, size),
    )
    blocks = []
    out_channels = []
    out_sizes = []
    ch = stem_ch
    for b in range(NUM_BLOCKS):
        depth = g.backbone.block_depths[b]
        block_ch = space.block_channels[b]
        block_layers = []
        for s in range(depth):
            stride = 2 if (b >= 1 and s == 0) else 1
            layers, size = _bottleneck_layers(
                in_ch=ch if s == 0 else block_ch,
                out_ch=block_ch,
                expansion=g.backbone.expansion_at(b, s, md),
                kernel=g.backbone.kernel_at(b, s, md),
                stride=stride,
                in_size=size,
            )
            block_layers.extend(layers)
        ch = block_ch
        blocks.append(tuple(block_layers))
        out_channels.append(ch)
        out_sizes.append(size)
    final_head = tuple(_head_layers(ch, size, space.num_classes))
    branches = tuple(
        tuple(_branch_layers(g.exits[p], out_channels[p], space.num_classes))
        for p in range(NUM_BLOCKS)
    )
    return DecodedNetwork(
        stem=stem,
        blocks=tuple(blocks),
        final_head=final_head,
        exit_branches=branches,
        block_output_channels=tuple(out_channels),
        block_output_sizes=tuple(out_sizes),
    )


@dataclass(frozen=True)
class MacProfile:
    """Per-exit cumulative MAC counts for one deployed candidate.

    ``exit_positions`` lists the active exits (1-based backbone block index);
    disabled exits are absent and cost nothing. ``cumulative_exit_macs[j]``
    charges the backbone up to that block plus every active branch at or
    before it, including its own classifier head. ``final_macs`` is the whole
    network through the last classifier, active branches included.
    """

    exit_positions: tuple
    cumulative_exit_macs: tuple
    per_branch_macs: tuple
    backbone_cumulative_macs: tuple
    final_macs: int
    backbone_final_macs: int

    def __post_init__(self):
        n = len(self.exit_positions)
        if not (len(self.cumulative_exit_macs) == len(self.per_branch_macs)
                == len(self.backbone_cumulative_macs) == n):
            raise ContractViolation("MacProfile field lengths disagree")
        for a, b in zip(self.cumulative_exit_macs, self.cumulative_exit_macs[1:]):
            if b <= a:
                raise ContractViolation("cumulative_exit_macs must be strictly increasing")
        if any(c > self.final_macs for c in self.cumulative_exit_macs):
            raise ContractViolation("cumulative exit cost exceeds final cost")


def _section_macs(layers, convention):
    return sum(layer_macs(l, convention) for l in layers)


def profile(g: Genome, space: SearchSpace) -> MacProfile:
    """Decode the genome and account its deployed graph under both conventions."""
    net = decode_network(g, space)
    backbone_running = _section_macs(net.stem, BACKBONE_MODE)
    backbone_cum_all = []
    for block in net.blocks:
        backbone_running += _section_macs(block, BACKBONE_MODE)
        backbone_cum_all.append(backbone_running)
    backbone_final = backbone_running + _section_macs(net.final_head, BACKBONE_MODE)

    positions = g.enabled_positions()
    branch_costs = [_section_macs(net.exit_branches[p - 1], EXIT_MODE) for p in positions]
    cumulative = []
    branch_running = 0
    backbone_at_exit = []
    for pos, cost in zip(positions, branch_costs):
        branch_running += cost
        backbone_at_exit.append(backbone_cum_all[pos - 1])
        cumulative.append(backbone_cum_all[pos - 1] + branch_running)
    final_macs = backbone_final + branch_running
    return MacProfile(
        exit_positions=tuple(positions),
        cumulative_exit_macs=tuple(cumulative),
        per_branch_macs=tuple(branch_costs),
        backbone_cumulative_macs=tuple(backbone_at_exit),
        final_macs=final_macs,
        backbone_final_macs=backbone_final,
    )


def restricted_profile(base: MacProfile, keep_mask) -> MacProfile:
    """Profile of the same candidate with a subset of its exits kept attached."""
    if len(keep_mask) != len(base.exit_positions):
        raise ContractViolation("keep_mask length must match the profile's exits")
    positions, cumulative, branch, backbone = [], [], [], []
    running = 0
    for keep, pos, pb, bb in zip(
        keep_mask, base.exit_positions, base.per_branch_macs, base.backbone_cumulative_macs
    ):
        if not keep:
            continue
        running += pb
        positions.append(pos)
        branch.append(pb)
        backbone.append(bb)
        cumulative.append(bb + running)
    return MacProfile(
        exit_positions=tuple(positions),
        cumulative_exit_macs=tuple(cumulative),
        per_branch_macs=tuple(branch),
        backbone_cumulative_macs=tuple(backbone),
        final_macs=base.backbone_final_macs + running,
        backbone_final_macs=base.backbone_final_macs,
    )


def average_macs(prof: MacProfile, utilization) -> float:
    """Utilization-weighted mean cost; one fraction per active exit plus final."""
    utilization = list(utilization)
    expected = len(prof.cumulative_exit_macs) + 1
    if len(utilization) != expected:
        raise ContractViolation(
            f"utilization has {len(utilization)} entries, profile expects {expected}"
        )
    if any(u < 0 for u in utilization):
        raise ContractViolation("utilization entries must be >= 0")
    if abs(sum(utilization) - 1.0) > 1e-9:
        raise ContractViolation(f"utilization sums to {sum(utilization)!r}, expected 1")
    costs = list(prof.cumulative_exit_macs) + [prof.final_macs]
    return float(sum(u * c for u, c in zip(utilization, costs)))


def to_millions(macs) -> float:
    return macs / 1e6


def layer_report(g: Genome, space: SearchSpace):
    """Per-layer audit rows for the JSON MAC-breakdown report."""
    net = decode_network(g, space)
    positions = g.enabled_positions()
    rows = []

    def add(section, layers, convention):
        for l in layers:
            rows.append(
                {
                    "section": section,
                    "kind": l.kind,
                    "kernel": l.kernel,
                    "in_channels": l.in_channels,
                    "out_channels": l.out_channels,
                    "out_height": l.out_height,
                    "out_width": l.out_width,
                    "groups": l.groups,
                    "convention": convention,
                    "macs": layer_macs(l, convention),
                }
            )

    add("stem", net.stem, BACKBONE_MODE)
    for b, block in enumerate(net.blocks, start=1):
        add(f"block{b}", block, BACKBONE_MODE)
    for p in positions:
        add(f"exit{p}", net.exit_branches[p - 1], EXIT_MODE)
    add("final_head", net.final_head, BACKBONE_MODE)

    prof = profile(g, space)
    return {
        "input_resolution": g.backbone.input_resolution,
        "exit_positions": list(positions),
        "rows": rows,
        "totals": {
            "per_branch_macs": list(prof.per_branch_macs),
            "cumulative_exit_macs": list(prof.cumulative_exit_macs),
            "final_macs": prof.final_macs,
            "final_macs_millions": round(to_millions(prof.final_macs), 2),
        },
    }
