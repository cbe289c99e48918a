import math

import numpy as np
import pytest
import torch

from fpgan.discriminator import (
    DiscriminatorError,
    DownBlock,
    SingleDiscriminator,
    SpectralConv2d,
    aggregate_logits,
    build_discriminators,
    build_rgb_discriminator,
    forward_logits,
    spectral_normalize,
)
from fpgan.feature_net import FeaturePyramid

CHANNELS = (24, 40, 112, 320)
RESOLUTIONS = (64, 32, 16, 8)


def exact_sigma(weight: torch.Tensor) -> float:
    flat = weight.detach().reshape(weight.shape[0], -1).numpy()
    return float(np.linalg.svd(flat, compute_uv=False).max())


def test_reference_architecture_table():
    dset = build_discriminators(CHANNELS, RESOLUTIONS)
    expected = {
        1: (64, 128, 256, 512),
        2: (128, 256, 512),
        3: (256, 512),
        4: (512,),
    }
    for level, widths in expected.items():
        d = dset[level]
        assert d.widths == widths
        assert len(d.blocks) == int(math.log2(RESOLUTIONS[level - 1] / 4))
        assert d.head.weight.shape == (1, 512, 4, 4)
        first_conv = d.blocks[0].conv
        assert first_conv.weight.shape[1] == CHANNELS[level - 1]


def test_downblock_halves_resolution():
    block = DownBlock(8, 16)
    out = block(torch.randn(2, 8, 32, 32))
    assert out.shape == (2, 16, 16, 16)


def test_forward_logit_shapes():
    dset = build_discriminators(CHANNELS, RESOLUTIONS)
    pyr = FeaturePyramid(
        tuple(torch.randn(8, c, r, r) for c, r in zip(CHANNELS, RESOLUTIONS))
    )
    logits = forward_logits(dset, pyr)
    assert sorted(logits) == [1, 2, 3, 4]
    assert all(v.shape == (8,) for v in logits.values())


def test_level_one_and_four_examples():
    dset = build_discriminators(CHANNELS, RESOLUTIONS)
    x1 = torch.randn(3, CHANNELS[0], 64, 64)
    assert dset[1](x1).shape == (3,)
    x4 = torch.randn(3, CHANNELS[3], 8, 8)
    feats = dset[4].blocks(x4)
    assert feats.shape == (3, 512, 4, 4)
    assert dset[4](x4).shape == (3,)


def test_active_level_subsets():
    dset = build_discriminators(CHANNELS, RESOLUTIONS, active_levels=(1, 2))
    assert dset.levels == (1, 2)
    assert len(dset.discriminators) == 2
    with pytest.raises(DiscriminatorError, match="non-empty"):
        build_discriminators(CHANNELS, RESOLUTIONS, active_levels=())
    with pytest.raises(DiscriminatorError, match="within 1..4"):
        build_discriminators(CHANNELS, RESOLUTIONS, active_levels=(5,))


def test_zeroed_input_with_zero_head_gives_zero_logits():
    d = SingleDiscriminator(8, 16)
    with torch.no_grad():
        d.head.weight.zero_()
    out = d(torch.zeros(4, 8, 16, 16))
    assert torch.equal(out, torch.zeros(4))


def test_empty_batch():
    dset = build_discriminators(CHANNELS, RESOLUTIONS)
    dset.eval()
    pyr = FeaturePyramid(
        tuple(torch.zeros(0, c, r, r) for c, r in zip(CHANNELS, RESOLUTIONS))
    )
    logits = forward_logits(dset, pyr)
    assert all(v.shape == (0,) for v in logits.values())
    assert aggregate_logits(logits).shape == (0,)


def test_eval_forward_is_deterministic():
    d = SingleDiscriminator(4, 16)
    d.eval()
    x = torch.randn(2, 4, 16, 16)
    assert torch.equal(d(x), d(x))


def test_shape_mismatch_error():
    d = SingleDiscriminator(4, 16)
    with pytest.raises(DiscriminatorError, match="expected input"):
        d(torch.randn(2, 4, 8, 8))


def test_spectral_normalize_scaled_identity():
    w = 3.0 * torch.eye(6)
    u = torch.nn.functional.normalize(torch.randn(6), dim=0)
    for _ in range(20):
        wn, u = spectral_normalize(w, u)
    assert torch.allclose(wn, torch.eye(6), atol=1e-4)


def test_spectral_normalize_unit_norm_fixed_point():
    torch.manual_seed(0)
    w = torch.randn(5, 7)
    w = w / np.linalg.svd(w.numpy(), compute_uv=False).max()
    u = torch.nn.functional.normalize(torch.randn(5), dim=0)
    for _ in range(50):
        wn, u = spectral_normalize(w, u)
    assert torch.allclose(wn, w, atol=1e-4)


def test_spectral_normalize_zero_weight_stays_finite():
    w = torch.zeros(4, 4)
    u = torch.nn.functional.normalize(torch.ones(4), dim=0)
    wn, _ = spectral_normalize(w, u)
    assert torch.isfinite(wn).all()
    assert torch.equal(wn, torch.zeros(4, 4))


def test_normalized_sigma_within_band_after_warmup():
    torch.manual_seed(1)
    for shape in ((16, 8, 4, 4), (1, 512, 4, 4), (64, 24, 4, 4)):
        conv = SpectralConv2d(shape[1], shape[0], shape[2])
        conv.warm_up(20)
        conv.eval()
        sigma = exact_sigma(conv.normalized_weight())
        assert 0.9 <= sigma <= 1.05


def test_training_forwards_converge_power_iteration():
    torch.manual_seed(2)
    conv = SpectralConv2d(8, 16, 4, 2, 1)
    conv.train()
    x = torch.randn(2, 8, 16, 16)
    for _ in range(20):
        conv(x)
    conv.eval()
    assert exact_sigma(conv.normalized_weight()) <= 1.05


def test_all_convs_normalized_in_a_built_set():
    dset = build_discriminators(CHANNELS, RESOLUTIONS)
    dset.warm_up(20)
    dset.eval()
    checked = 0
    for m in dset.modules():
        if isinstance(m, SpectralConv2d):
            sigma = exact_sigma(m.normalized_weight())
            assert 0.9 <= sigma <= 1.05
            checked += 1
    # 4 + 3 + 2 + 1 DownBlocks plus 4 heads
    assert checked == 14


def test_aggregate_logits():
    logits = {
        1: torch.tensor([1.0]),
        2: torch.tensor([-0.5]),
        3: torch.tensor([0.25]),
        4: torch.tensor([0.25]),
    }
    assert aggregate_logits(logits).item() == pytest.approx(1.0)
    single = {2: torch.tensor([0.7, -0.3])}
    assert torch.equal(aggregate_logits(single), single[2])
    with pytest.raises(DiscriminatorError, match="empty"):
        aggregate_logits({})


def test_aggregation_is_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    logits = {l: torch.randn(5, generator=g) for l in (1, 2, 3, 4)}
    shuffled = {l: logits[l] for l in (3, 1, 4, 2)}
    assert torch.allclose(aggregate_logits(logits), aggregate_logits(shuffled))


def test_rgb_baseline_discriminator():
    dset = build_rgb_discriminator(64)
    d = dset[1]
    assert len(d.blocks) == 4
    assert d.widths == (64, 128, 256, 512)
    out = forward_logits(dset, {1: torch.randn(2, 3, 64, 64)})
    assert out[1].shape == (2,)


def test_small_resolution_levels_get_shrunk_head():
    # Debug-scale pyramids reach 4x4 and 2x2; blocks stop at 4x4 and the
    # head kernel shrinks below that.
    d4 = SingleDiscriminator(8, 4)
    assert len(d4.blocks) == 0
    assert d4.head.weight.shape[-1] == 4
    assert d4(torch.randn(2, 8, 4, 4)).shape == (2,)
    d2 = SingleDiscriminator(8, 2)
    assert d2.head.weight.shape[-1] == 2
    assert d2(torch.randn(2, 8, 2, 2)).shape == (2,)
