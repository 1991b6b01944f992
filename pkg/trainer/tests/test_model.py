import torch

from exitnas import genome as G
from exitnas import macmodel as M

from exittrainer.model import EarlyExitNet, structural_walk

SPACE = G.SearchSpace()


def _net(g, space=SPACE):
    return EarlyExitNet(G.genome_to_dict(g, space), space.to_dict())


def test_all_exits_disabled_single_classifier():
    g = G.sample_genome(SPACE, 1)
    g = G.with_thresholds(g, G.ThresholdVector((1.0,) * 5))
    net = _net(g)
    assert net.exit_positions == []
    outs = net(torch.zeros(2, 3, net.input_resolution, net.input_resolution))
    assert len(outs) == 1
    assert outs[0].shape == (2, 10)


def test_forward_returns_one_output_per_active_exit():
    g = G.sample_genome(SPACE, 2)
    g = G.with_thresholds(g, G.ThresholdVector((0.2, 1.0, 0.5, 1.0, 0.8)))
    net = _net(g)
    assert net.exit_positions == [1, 3, 5]
    outs = net(torch.zeros(2, 3, net.input_resolution, net.input_resolution))
    assert len(outs) == 4
    for p in outs:
        assert torch.allclose(p.sum(dim=1), torch.ones(2), atol=1e-5)


def test_disabled_second_block_has_single_branch_block():
    g = G.sample_genome(SPACE, 3)
    branch = G.ExitBranchConfig(
        block1=G.ExitBlockConfig(8, 3, 1, False),
        block2=G.ExitBlockConfig(0, 5, 2, True),  # disabled, fields inert
    )
    g = G.Genome(g.backbone, G.ThresholdVector((0.5, 1.0, 1.0, 1.0, 1.0)),
                 (branch,) + g.exits[1:])
    net = _net(g)
    walk = structural_walk(net)
    interp_rows = [r for r in walk["exit1"] if r["kind"] == "interpolate"]
    assert len(interp_rows) == 1


def _engine_sections(g, space=SPACE):
    report = M.layer_report(g, space)
    sections = {}
    keys = ("kind", "kernel", "in_channels", "out_channels",
            "out_height", "out_width", "groups")
    for row in report["rows"]:
        sections.setdefault(row["section"], []).append({k: row[k] for k in keys})
    return sections


def test_structural_parity_sampled_genomes():
    for seed in range(6):
        g = G.sample_genome(SPACE, seed)
        assert structural_walk(_net(g)) == _engine_sections(g)
