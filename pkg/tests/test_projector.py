import math

import numpy as np
import pytest
import torch

from fpgan.feature_net import FeaturePyramid
from fpgan.projector import (
    ProjectionConfig,
    ProjectorError,
    build_projector,
    project,
    projector_fingerprint,
)

CHANNELS = (16, 32, 64, 128)


def make_pyramid(channels=CHANNELS, batch=2, top=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    levels = []
    r = top
    for c in channels:
        levels.append(torch.randn(batch, c, r, r, generator=g))
        r //= 2
    return FeaturePyramid(tuple(levels))


def test_config_validation():
    with pytest.raises(ProjectorError, match="mode"):
        ProjectionConfig(mode="both").validate()
    with pytest.raises(ProjectorError, match="channel_ratio"):
        ProjectionConfig(channel_ratio=0.5).validate()
    with pytest.raises(ProjectorError, match="rotation init requires"):
        ProjectionConfig(init="rotation", channel_ratio=2.0).validate()


def test_kaiming_init_std_matches_formula():
    # Empirical std over >= 1e5 draws vs sqrt(2 / fan_in), within 2%.
    cfg = ProjectionConfig(
        mode="ccm", seed=0, level_widths=(512, 512, 512, 512)
    )
    proj = build_projector((64, 64, 64, 64), cfg)
    draws = torch.cat([conv.weight.flatten() for conv in proj.ccm])
    assert draws.numel() >= 1e5
    expected = math.sqrt(2.0 / 64.0)
    assert abs(draws.std().item() - expected) <= 0.02 * expected


def test_rotation_init_is_orthogonal():
    cfg = ProjectionConfig(mode="ccm", init="rotation", channel_ratio=1.0, seed=1)
    proj = build_projector((64, 64, 64, 64), cfg)
    for conv in proj.ccm:
        w = conv.weight.squeeze(-1).squeeze(-1)
        eye = torch.eye(w.shape[0])
        assert torch.allclose(w.T @ w, eye, atol=1e-5)


def test_seeded_build_is_deterministic():
    cfg = ProjectionConfig(mode="ccm_csm", seed=9)
    a = build_projector(CHANNELS, cfg)
    b = build_projector(CHANNELS, cfg)
    c = build_projector(CHANNELS, ProjectionConfig(mode="ccm_csm", seed=10))
    assert projector_fingerprint(a) == projector_fingerprint(b)
    assert projector_fingerprint(a) != projector_fingerprint(c)


def test_mode_none_is_bitwise_identity():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="none", seed=0))
    pyr = make_pyramid()
    out = project(proj, pyr)
    for a, b in zip(out.levels, pyr.levels):
        assert torch.equal(a, b)


def test_feature_norm_standardizes_each_level():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="feature_norm", seed=0))
    pyr = make_pyramid(batch=4)
    out = project(proj, pyr)
    for level in out.levels:
        mean = level.mean(dim=(0, 2, 3))
        std = level.std(dim=(0, 2, 3))
        assert mean.abs().max().item() < 1e-5
        assert (std - 1).abs().max().item() < 1e-3


def test_ccm_shape_arithmetic():
    pyr = make_pyramid()
    for ratio, widths in ((1.0, CHANNELS), (2.0, tuple(2 * c for c in CHANNELS))):
        proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm", seed=0,
                                                          channel_ratio=ratio))
        out = project(proj, pyr)
        assert out.channels == widths
        assert out.resolutions == pyr.resolutions


def test_ccm_csm_keeps_resolutions_and_widths():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm_csm", seed=0))
    out = project(proj, make_pyramid())
    assert out.resolutions == (16, 8, 4, 2)
    assert out.channels == CHANNELS
    widths = (8, 8, 8, 8)
    proj = build_projector(
        CHANNELS, ProjectionConfig(mode="ccm_csm", seed=0, level_widths=widths)
    )
    assert project(proj, make_pyramid()).channels == widths


def test_mixing_matrices_have_full_rank():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm_csm", seed=4))
    for conv in proj.ccm:
        w = conv.weight.squeeze(-1).squeeze(-1).detach().numpy()
        sigma = np.linalg.svd(w, compute_uv=False)
        assert sigma.min() > 1e-6
        assert np.linalg.matrix_rank(w, tol=1e-6) == w.shape[1]


def test_ccm_projection_is_linear():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm", seed=2))
    x, y = make_pyramid(seed=1), make_pyramid(seed=2)
    a, b = 0.7, -1.3
    combo = FeaturePyramid(
        tuple(a * lx + b * ly for lx, ly in zip(x.levels, y.levels))
    )
    lhs = project(proj, combo)
    rx, ry = project(proj, x), project(proj, y)
    for l, px, py in zip(lhs.levels, rx.levels, ry.levels):
        rhs = a * px + b * py
        denom = rhs.abs().max().clamp(min=1e-6)
        assert ((l - rhs).abs().max() / denom).item() < 1e-5


def test_frozen_parameters_and_fingerprint_stability():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm_csm", seed=0))
    assert all(not p.requires_grad for p in proj.parameters())
    before = projector_fingerprint(proj)
    for _ in range(3):
        project(proj, make_pyramid())
    assert projector_fingerprint(proj) == before


def test_trainable_toggle_changes_fingerprint():
    proj = build_projector(
        CHANNELS, ProjectionConfig(mode="ccm", seed=0, trainable=True)
    )
    assert all(p.requires_grad for p in proj.parameters())
    before = projector_fingerprint(proj)
    opt = torch.optim.SGD(proj.parameters(), lr=0.1)
    out = project(proj, make_pyramid())
    loss = sum(l.square().mean() for l in out.levels)
    loss.backward()
    opt.step()
    assert projector_fingerprint(proj) != before


def test_gradient_flows_through_frozen_projector():
    channels = (2, 2, 2, 2)
    proj = build_projector(channels, ProjectionConfig(mode="ccm_csm", seed=0))
    g = torch.Generator().manual_seed(0)
    levels = [
        torch.randn(1, 2, r, r, generator=g, dtype=torch.float64)
        for r in (8, 4, 2, 1)
    ]
    proj = proj.double()
    weights = None

    def scalar(levels_in):
        out = project(proj, FeaturePyramid(tuple(levels_in)))
        nonlocal weights
        if weights is None:
            weights = [torch.randn(l.shape, generator=g, dtype=torch.float64)
                       for l in out.levels]
        return sum((w * l).sum() for w, l in zip(weights, out.levels))

    leaf = [l.clone().requires_grad_(True) for l in levels]
    grads = torch.autograd.grad(scalar(leaf), leaf)
    h = 1e-5
    for li, base in enumerate(levels):
        flat = base.flatten()
        for idx in range(0, flat.numel(), 7):
            plus = [l.clone() for l in levels]
            minus = [l.clone() for l in levels]
            plus[li].flatten()[idx] += h
            minus[li].flatten()[idx] -= h
            fd = (scalar(plus) - scalar(minus)) / (2 * h)
            an = grads[li].flatten()[idx]
            assert abs(an - fd) <= 1e-2 * max(abs(fd), abs(an), 1e-8)


def test_empty_batch_and_mismatch_errors():
    proj = build_projector(CHANNELS, ProjectionConfig(mode="ccm_csm", seed=0))
    empty = make_pyramid(batch=0)
    out = project(proj, empty)
    assert all(level.shape[0] == 0 for level in out.levels)
    with pytest.raises(ProjectorError, match="channels"):
        project(proj, make_pyramid(channels=(8, 16, 32, 64)))
