import copy

import numpy as np
import pytest
import torch

from maskboot.config import EncoderConfig
from maskboot.encoder import (
    build_models,
    ema_update,
    forward_stages,
    fuse_layers,
    fused_channels,
    project_predict,
)
from maskboot.errors import ConfigError, ContractError
from maskboot.rng import stream


def test_stage_spatial_sizes():
    cfg = EncoderConfig()
    online, _ = build_models(cfg, stream(0, "init"))
    taps = forward_stages(online.backbone, torch.randn(1, 3, 64, 64))
    assert tuple(taps["s2"].shape[-2:]) == (16, 16)
    assert tuple(taps["s2.b2"].shape[-2:]) == (16, 16)
    assert tuple(taps["s3"].shape[-2:]) == (8, 8)
    assert tuple(taps["s4"].shape[-2:]) == (4, 4)


def test_zero_params_zero_features(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(0, "init"))
    with torch.no_grad():
        for p in online.parameters():
            p.zero_()
    taps = forward_stages(online.backbone, torch.randn(2, 3, 64, 64, dtype=torch.float64))
    for fmap in taps.values():
        assert torch.all(fmap == 0)


def test_forward_deterministic(tiny_encoder_cfg):
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 3, 64, 64)))
    a, _ = build_models(tiny_encoder_cfg, stream(5, "init"))
    b, _ = build_models(tiny_encoder_cfg, stream(5, "init"))
    ta = forward_stages(a.backbone, x)
    tb = forward_stages(b.backbone, x)
    for name in ta:
        assert torch.equal(ta[name], tb[name])
    ta2 = forward_stages(a.backbone, x)
    for name in ta:
        assert torch.equal(ta[name], ta2[name])


def test_fuse_identity_resample(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(0, "init"))
    taps = forward_stages(online.backbone, torch.randn(1, 3, 64, 64, dtype=torch.float64))
    hw = tuple(taps["s3"].shape[-2:])
    fused = fuse_layers(taps, ("s3",), hw)
    assert torch.equal(fused, taps["s3"])


def test_fuse_channel_arithmetic():
    cfg = EncoderConfig()
    online, _ = build_models(cfg, stream(0, "init"))
    taps = forward_stages(online.backbone, torch.randn(1, 3, 64, 64))
    fused = fuse_layers(taps, ("s2", "s3", "s4"), (4, 4))
    assert fused.shape[1] == 32 + 64 + 128 == fused_channels(cfg)


def test_fuse_constant_maps():
    taps = {
        "s2": torch.full((1, 2, 16, 16), 3.0),
        "s3": torch.full((1, 3, 8, 8), -1.5),
    }
    fused = fuse_layers(taps, ("s2", "s3"), (4, 4))
    assert torch.allclose(fused[:, :2], torch.full((1, 2, 4, 4), 3.0))
    assert torch.allclose(fused[:, 2:], torch.full((1, 3, 4, 4), -1.5))


def test_fuse_unknown_stage():
    with pytest.raises(ConfigError):
        fuse_layers({"s2": torch.zeros(1, 2, 4, 4)}, ("s9",), (4, 4))


def test_fusion_linearity(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(0, "init"))
    taps = forward_stages(online.backbone, torch.randn(1, 3, 64, 64, dtype=torch.float64))
    fused = fuse_layers(taps, ("s2", "s3", "s4"), (4, 4))
    scaled = fuse_layers({k: 2.5 * v for k, v in taps.items()}, ("s2", "s3", "s4"), (4, 4))
    assert torch.allclose(scaled, 2.5 * fused)


def test_embedding_unit_norm(tiny_encoder_cfg):
    online, target = build_models(tiny_encoder_cfg, stream(0, "init"))
    pooled = torch.randn(5, fused_channels(tiny_encoder_cfg), dtype=torch.float64)
    for model, role in ((online, "online"), (target, "target")):
        emb = project_predict(model, pooled, role)
        assert torch.allclose(emb.norm(dim=1), torch.ones(5, dtype=torch.float64), atol=1e-6)


def test_target_ignores_predictor(tiny_encoder_cfg):
    online, target = build_models(tiny_encoder_cfg, stream(0, "init"))
    pooled = torch.randn(3, fused_channels(tiny_encoder_cfg), dtype=torch.float64)
    before = project_predict(target, pooled, "target")
    with torch.no_grad():
        for p in online.predictor.parameters():
            p.add_(1.0)
    after = project_predict(target, pooled, "target")
    assert torch.equal(before, after)


def test_online_vs_target_composition_oracle():
    # 4-dim toy: compose projector and predictor by hand in numpy
    cfg = EncoderConfig(
        channels=(4, 4, 4, 4), blocks=(2, 1, 1), proj_hidden=4, embed_dim=4,
        fusion_layers=("s4",), dtype="float64",
    )
    online, target = build_models(cfg, stream(9, "init"))
    x = torch.randn(2, 4, dtype=torch.float64)

    def mlp_by_hand(head, v):
        w1 = head.net[0].weight.detach().numpy()
        b1 = head.net[0].bias.detach().numpy()
        ln = head.net[1]
        w2 = head.net[3].weight.detach().numpy()
        b2 = head.net[3].bias.detach().numpy()
        h = v @ w1.T + b1
        mu = h.mean(axis=1, keepdims=True)
        var = h.var(axis=1, keepdims=True)
        h = (h - mu) / np.sqrt(var + ln.eps)
        h = h * ln.weight.detach().numpy() + ln.bias.detach().numpy()
        h = np.maximum(h, 0.0)
        return h @ w2.T + b2

    v = x.numpy()
    want_target = mlp_by_hand(target.projector, v)
    want_online = mlp_by_hand(online.predictor, mlp_by_hand(online.projector, v))
    got_target = project_predict(target, x, "target", normalize=False).detach().numpy()
    got_online = project_predict(online, x, "online", normalize=False).detach().numpy()
    assert np.allclose(got_target, want_target, atol=1e-12)
    assert np.allclose(got_online, want_online, atol=1e-12)
    # pre-normalization difference equals the predictor path effect
    assert np.allclose(
        got_online - got_target, want_online - want_target, atol=1e-12
    )


def test_ema_fixed_point_copy_and_blend(tiny_encoder_cfg):
    online, target = build_models(tiny_encoder_cfg, stream(0, "init"))
    with torch.no_grad():
        for p in online.parameters():
            p.fill_(2.0)
        for p in target.parameters():
            p.fill_(1.0)
    snapshot = copy.deepcopy(target.state_dict())
    ema_update(online, target, 1.0)
    for k, v in target.state_dict().items():
        assert torch.equal(v, snapshot[k])
    ema_update(online, target, 0.0)
    for p in target.parameters():
        assert torch.all(p == 2.0)
    with torch.no_grad():
        for p in target.parameters():
            p.fill_(1.0)
    ema_update(online, target, 0.9)
    for p in target.parameters():
        assert torch.allclose(p, torch.full_like(p, 1.1))


def test_ema_structure_mismatch(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(0, "init"))
    other_cfg = EncoderConfig(
        channels=(4, 4, 8, 16), blocks=(2, 1, 1), proj_hidden=16, embed_dim=8, dtype="float64"
    )
    _, target = build_models(other_cfg, stream(0, "init"))
    with pytest.raises(ContractError):
        ema_update(online, target, 0.5)


def test_forward_shape_contract(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(0, "init"))
    with pytest.raises(ContractError):
        forward_stages(online.backbone, torch.randn(3, 64, 64, dtype=torch.float64))
