"""Decode a genome descriptor into a trainable early-exit CNN.

The layer inventory mirrors the search engine's cost model one-for-one:
stem conv+BN+ReLU, five blocks of inverted bottlenecks (expand 1x1, depthwise
kxk, project 1x1, BN after each conv, ReLU after expand and depthwise, first
layer of blocks 2-5 strided), per-position exit branches of
interpolate -> conv -> BN -> ReLU (-> optional 2x2/2 max pool) blocks, and
global-average-pool + linear + softmax heads. No residual connections, so a
structural walk of the modules reproduces the engine's decoded layer list
exactly.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class Interpolate(nn.Module):
    """Bilinear resize to a fixed square size, visible to structural walks."""

    def __init__(self, size):
        super().__init__()
        self.size = int(size)

    def forward(self, x):
        if x.shape[-1] == self.size and x.shape[-2] == self.size:
            return x
        return F.interpolate(x, size=(self.size, self.size), mode="bilinear",
                             align_corners=False)

    def extra_repr(self):
        return f"size={self.size}"


def _bottleneck(in_ch, out_ch, expansion, kernel, stride):
    mid = in_ch * expansion
    return nn.Sequential(
        nn.Conv2d(in_ch, mid, 1, 1, 0, bias=False),
        nn.BatchNorm2d(mid),
        nn.ReLU(inplace=True),
        nn.Conv2d(mid, mid, kernel, stride, kernel // 2, groups=mid, bias=False),
        nn.BatchNorm2d(mid),
        nn.ReLU(inplace=True),
        nn.Conv2d(mid, out_ch, 1, 1, 0, bias=False),
        nn.BatchNorm2d(out_ch),
    )


def _head(channels, num_classes):
    return nn.Sequential(
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(channels, num_classes),
        nn.Softmax(dim=1),
    )


class ExitBranch(nn.Module):
    def __init__(self, in_ch, blocks, num_classes):
        """blocks: iterable of dicts with interpolation_size, kernel_size,
        expansion_width, maxpool_enabled; disabled blocks are skipped."""
        super().__init__()
        layers = []
        ch = in_ch
        for b in blocks:
            if int(b["interpolation_size"]) == 0:
                continue
            out_ch = ch * int(b["expansion_width"])
            k = int(b["kernel_size"])
            layers.append(Interpolate(b["interpolation_size"]))
            layers.append(nn.Conv2d(ch, out_ch, k, 1, k // 2, bias=False))
            layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.ReLU(inplace=True))
            if b["maxpool_enabled"]:
                layers.append(nn.MaxPool2d(2, 2))
            ch = out_ch
        self.blocks = nn.Sequential(*layers)
        self.head = _head(ch, num_classes)

    def forward(self, x):
        return self.head(self.blocks(x))


class EarlyExitNet(nn.Module):
    """Backbone with per-position exit branches; forward returns the softmax
    output of every active exit followed by the final classifier."""

    def __init__(self, genome, space):
        super().__init__()
        backbone = genome["backbone"]
        self.input_resolution = int(backbone["input_resolution"])
        self.num_classes = int(space["num_classes"])
        thresholds = [float(t) for t in genome["thresholds"]]
        self.exit_positions = [i + 1 for i, t in enumerate(thresholds) if t < 1.0]

        stem_ch = int(space["stem_channels"])
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(stem_ch),
            nn.ReLU(inplace=True),
        )
        blocks = []
        in_ch = stem_ch
        for b, out_ch in enumerate(int(c) for c in space["block_channels"]):
            depth = int(backbone["block_depths"][b])
            layers = []
            for s in range(depth):
                stride = 2 if (b >= 1 and s == 0) else 1
                layers.append(
                    _bottleneck(
                        in_ch if s == 0 else out_ch,
                        out_ch,
                        int(backbone["expansion_rates"][b][s]),
                        int(backbone["kernel_sizes"][b][s]),
                        stride,
                    )
                )
            blocks.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)

        branches = {}
        channels = [int(c) for c in space["block_channels"]]
        for pos in self.exit_positions:
            cfg = genome["exits"][pos - 1]
            branches[str(pos)] = ExitBranch(
                channels[pos - 1], [cfg["block1"], cfg["block2"]], self.num_classes
            )
        self.branches = nn.ModuleDict(branches)
        self.final_head = _head(in_ch, self.num_classes)

    def forward(self, x):
        outputs = []
        h = self.stem(x)
        for b, block in enumerate(self.blocks, start=1):
            h = block(h)
            if str(b) in self.branches:
                outputs.append(self.branches[str(b)](h))
        outputs.append(self.final_head(h))
        return outputs


_WALK_KINDS = {
    nn.Conv2d: "conv",
    nn.BatchNorm2d: "batchnorm",
    nn.ReLU: "relu",
    nn.MaxPool2d: "maxpool",
    Interpolate: "interpolate",
    nn.AdaptiveAvgPool2d: "global_avgpool",
    nn.Linear: "linear",
    nn.Softmax: "softmax",
}


def structural_walk(model: EarlyExitNet):
    """Execute the model once and record every compute layer's shape.

    Returns {section: [row, ...]} with rows shaped like the engine's MAC
    audit: kind, kernel, in/out channels, output spatial dims, groups.
    """
    sections = {}
    handles = []

    def section_of(name):
        if name.startswith("stem"):
            return "stem"
        if name.startswith("blocks."):
            return f"block{int(name.split('.')[1]) + 1}"
        if name.startswith("branches."):
            return f"exit{name.split('.')[1]}"
        if name.startswith("final_head"):
            return "final_head"
        return None

    def make_hook(section, module):
        def hook(mod, inputs, output):
            x = inputs[0]
            kind = _WALK_KINDS[type(mod)]
            if isinstance(mod, nn.Conv2d):
                groups = mod.groups
                if groups == mod.in_channels and groups > 1:
                    kind = "depthwise_conv"
                row = {
                    "kind": kind,
                    "kernel": mod.kernel_size[0],
                    "in_channels": mod.in_channels,
                    "out_channels": mod.out_channels,
                    "out_height": output.shape[-2],
                    "out_width": output.shape[-1],
                    "groups": groups,
                }
            elif isinstance(mod, nn.Linear):
                row = {
                    "kind": kind,
                    "kernel": 0,
                    "in_channels": mod.in_features,
                    "out_channels": mod.out_features,
                    "out_height": 1,
                    "out_width": 1,
                    "groups": 1,
                }
            else:
                channels = output.shape[1]
                spatial = output.shape[-2:] if output.dim() == 4 else (1, 1)
                row = {
                    "kind": kind,
                    "kernel": 2 if isinstance(mod, nn.MaxPool2d) else 0,
                    "in_channels": x.shape[1],
                    "out_channels": channels,
                    "out_height": int(spatial[0]),
                    "out_width": int(spatial[1]),
                    "groups": 1,
                }
            sections.setdefault(section, []).append(row)

        return hook

    for name, module in model.named_modules():
        if type(module) in _WALK_KINDS:
            section = section_of(name)
            if section is not None:
                handles.append(module.register_forward_hook(make_hook(section, module)))
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, 3, model.input_resolution, model.input_resolution))
    for h in handles:
        h.remove()
    return sections
