import hashlib

import pytest
import torch

from fpgan.feature_net import (
    ARCHITECTURES,
    FeatureNetError,
    FeatureNetworkSpec,
    FeaturePyramid,
    extract_pyramid,
    fingerprint,
    load_feature_network,
    randomize_weights,
    select_layers,
)


def test_spec_validation():
    with pytest.raises(FeatureNetError, match="power of two"):
        FeatureNetworkSpec("tiny_debug", 48, seed=0).validate()
    with pytest.raises(FeatureNetError, match="power of two"):
        FeatureNetworkSpec("tiny_debug", 32, seed=0).validate()
    with pytest.raises(FeatureNetError, match="seed"):
        FeatureNetworkSpec("tiny_debug", 64, pretrained=False).validate()
    with pytest.raises(FeatureNetError, match="unknown architecture"):
        FeatureNetworkSpec("not_a_net", 64, seed=0).validate()
    with pytest.raises(FeatureNetError, match="weights_path"):
        FeatureNetworkSpec("tiny_debug", 64, pretrained=True).validate()


def test_efficientnet_lite1_stage_widths():
    net = load_feature_network(
        FeatureNetworkSpec("efficientnet_lite1", 256, pretrained=False, seed=0)
    )
    assert net.pyramid_channels == (24, 40, 112, 320)
    x = torch.rand(1, 3, 256, 256) * 2 - 1
    pyr = extract_pyramid(net, x)
    assert pyr.resolutions == (64, 32, 16, 8)
    assert pyr.channels == (24, 40, 112, 320)


def test_seeded_build_is_bitwise_deterministic():
    spec = FeatureNetworkSpec("tiny_debug", 64, pretrained=False, seed=7)
    assert fingerprint(load_feature_network(spec)) == fingerprint(
        load_feature_network(spec)
    )


def test_forward_is_deterministic_and_frozen(tiny_feature_net):
    net = tiny_feature_net
    assert all(not p.requires_grad for p in net.parameters())
    before = fingerprint(net)
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    a = extract_pyramid(net, x)
    b = extract_pyramid(net, x)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la, lb)
    assert fingerprint(net) == before


def test_train_mode_is_pinned_to_eval(tiny_feature_net):
    tiny_feature_net.train()
    assert not tiny_feature_net.training
    x = torch.rand(4, 3, 64, 64) * 2 - 1
    before = fingerprint(tiny_feature_net)
    extract_pyramid(tiny_feature_net, x)
    # batch-norm running statistics are part of the frozen state
    assert fingerprint(tiny_feature_net) == before


def test_fully_convolutional_resolution_scaling():
    for res, expected in ((128, (32, 16, 8, 4)), (512, (128, 64, 32, 16))):
        net = load_feature_network(
            FeatureNetworkSpec("tiny_debug", res, pretrained=False, seed=1)
        )
        pyr = extract_pyramid(net, torch.rand(1, 3, res, res) * 2 - 1)
        assert pyr.resolutions == expected


def test_empty_batch_propagates_shapes(tiny_feature_net):
    pyr = extract_pyramid(tiny_feature_net, torch.zeros(0, 3, 64, 64))
    assert pyr.channels == tiny_feature_net.pyramid_channels
    assert all(level.shape[0] == 0 for level in pyr.levels)


def test_extract_errors(tiny_feature_net):
    with pytest.raises(FeatureNetError, match="shape"):
        extract_pyramid(tiny_feature_net, torch.zeros(1, 3, 32, 32))
    bad = torch.zeros(1, 3, 64, 64)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(FeatureNetError, match="non-finite"):
        extract_pyramid(tiny_feature_net, bad)


def test_select_layers():
    assert select_layers("efficientnet_lite1") == ("stage2", "stage3", "stage5",
                                                   "stage7")
    assert select_layers("vit_base") == (3, 6, 9, 12)
    assert select_layers("deit_small") == (3, 6, 9, 12)
    assert select_layers("resnet50") == ("layer1", "layer2", "layer3", "layer4")
    with pytest.raises(FeatureNetError, match="4 distinct tap points"):
        select_layers("shallow_debug")
    with pytest.raises(FeatureNetError, match="unknown"):
        select_layers("mystery")


def test_vit_readout_resolutions():
    net = load_feature_network(
        FeatureNetworkSpec("deit_small", 64, pretrained=False, seed=2)
    )
    pyr = extract_pyramid(net, torch.rand(2, 3, 64, 64) * 2 - 1)
    assert pyr.resolutions == (16, 8, 4, 2)
    assert pyr.channels == (384, 384, 384, 384)


def test_randomize_weights(tiny_feature_net):
    a = randomize_weights(tiny_feature_net, seed=11)
    b = randomize_weights(tiny_feature_net, seed=11)
    c = randomize_weights(tiny_feature_net, seed=12)
    assert fingerprint(a) == fingerprint(b)
    assert fingerprint(a) != fingerprint(c)
    assert all(not p.requires_grad for p in a.parameters())
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    assert extract_pyramid(a, x).channels == extract_pyramid(
        tiny_feature_net, x
    ).channels


def test_pretrained_load_checks_checksum(tmp_path, tiny_feature_net):
    path = tmp_path / "weights.pt"
    torch.save(tiny_feature_net.backbone.state_dict(), path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    loaded = load_feature_network(
        FeatureNetworkSpec(
            "tiny_debug", 64, pretrained=True,
            weights_path=str(path), weights_sha256=digest,
        )
    )
    assert fingerprint(loaded) == fingerprint(tiny_feature_net)
    with pytest.raises(FeatureNetError, match="checksum mismatch"):
        load_feature_network(
            FeatureNetworkSpec(
                "tiny_debug", 64, pretrained=True,
                weights_path=str(path), weights_sha256="0" * 64,
            )
        )


def test_pyramid_invariants():
    levels = tuple(torch.zeros(1, 4, r, r) for r in (16, 8, 4, 2))
    FeaturePyramid(levels)
    with pytest.raises(ValueError, match="halve"):
        FeaturePyramid(tuple(torch.zeros(1, 4, r, r) for r in (16, 8, 8, 2)))
    with pytest.raises(ValueError, match="4 levels"):
        FeaturePyramid(levels[:3])


def test_gradient_flows_through_frozen_net_to_inputs(tiny_feature_net):
    # Analytic input gradients match central differences on an 8x8 crop,
    # single precision, step 1e-3, relative error 1e-2.
    torch.manual_seed(0)
    x = (torch.rand(1, 3, 64, 64) * 2 - 1).requires_grad_(True)
    weights = [torch.randn_like(l) for l in
               extract_pyramid(tiny_feature_net, x.detach()).levels]

    def scalar(inp):
        pyr = extract_pyramid(tiny_feature_net, inp)
        return sum((w * l).sum() for w, l in zip(weights, pyr.levels))

    (grad,) = torch.autograd.grad(scalar(x), x)
    h = 1e-3
    crop = [(0, y, xx) for y in range(8) for xx in range(8)]
    fd = torch.zeros(len(crop))
    base = x.detach()
    for i, (c, y, xx) in enumerate(crop):
        plus = base.clone()
        plus[0, c, y, xx] += h
        minus = base.clone()
        minus[0, c, y, xx] -= h
        fd[i] = (scalar(plus) - scalar(minus)) / (2 * h)
    analytic = torch.tensor([grad[0, c, y, xx] for c, y, xx in crop])
    scale = max(analytic.abs().max().item(), fd.abs().max().item())
    assert (analytic - fd).abs().max().item() <= 1e-2 * scale
