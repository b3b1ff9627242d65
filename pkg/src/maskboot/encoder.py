"""Multi-stage convolutional encoder with online and EMA-target copies.

The backbone is a stem plus three residual stages (s2, s3, s4), each
halving spatial resolution; ``s2.b2`` taps the second block of stage s2.
Normalization is GroupNorm/LayerNorm throughout so parameters carry the
whole model state and EMA stays a pure elementwise average. Selected stage
maps fuse by bilinear resampling to a common grid followed by channel
concatenation, in the order given by the fusion layer tuple.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .errors import ConfigError, ContractError

STAGE_NAMES = ("s2", "s2.b2", "s3", "s4")


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride), _norm(cout))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


class Backbone(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c_stem, c2, c3, c4 = cfg.channels
        b2, b3, b4 = cfg.blocks
        self.stem = nn.Sequential(nn.Conv2d(3, c_stem, 3, 2, 1), _norm(c_stem), nn.ReLU())
        self.s2 = nn.ModuleList(
            [ResidualBlock(c_stem if i == 0 else c2, c2, 2 if i == 0 else 1) for i in range(b2)]
        )
        self.s3 = nn.ModuleList(
            [ResidualBlock(c2 if i == 0 else c3, c3, 2 if i == 0 else 1) for i in range(b3)]
        )
        self.s4 = nn.ModuleList(
            [ResidualBlock(c3 if i == 0 else c4, c4, 2 if i == 0 else 1) for i in range(b4)]
        )
        self.stage_channels = {"s2": c2, "s2.b2": c2, "s3": c3, "s4": c4}

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """One pass returning every stage tap."""
        out = self.stem(x)
        taps: dict[str, torch.Tensor] = {}
        for i, block in enumerate(self.s2):
            out = block(out)
            if i == 1:
                taps["s2.b2"] = out
        taps["s2"] = out
        for block in self.s3:
            out = block(out)
        taps["s3"] = out
        for block in self.s4:
            out = block(out)
        taps["s4"] = out
        return taps


class MLPHead(nn.Module):
    """Two-layer MLP with LayerNorm, batch-statistics free."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim_in, hidden),
            nn.LayerNorm(hidden),
            nn.ReLU(),
            nn.Linear(hidden, dim_out),
        )

    def forward(self, x):
        return self.net(x)


class OnlineModel(nn.Module):
    """Gradient-trained model: backbone + projector + predictor."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = Backbone(cfg)
        dim = fused_channels(cfg)
        self.projector = MLPHead(dim, cfg.proj_hidden, cfg.embed_dim)
        self.predictor = MLPHead(cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim)


class TargetModel(nn.Module):
    """EMA copy: backbone + projector only, never receives gradients."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.projector = MLPHead(fused_channels(cfg), cfg.proj_hidden, cfg.embed_dim)


def fused_channels(cfg: EncoderConfig) -> int:
    per = {"s2": cfg.channels[1], "s2.b2": cfg.channels[1], "s3": cfg.channels[2], "s4": cfg.channels[3]}
    return int(sum(per[name] for name in cfg.fusion_layers))


def init_params(model: nn.Module, rng: np.random.Generator) -> None:
    """Fan-in scaled uniform weights, zero biases, unit norm scales."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals).to(p.dtype))
            elif name.endswith("bias"):
                p.zero_()
            else:  # norm scale
                p.fill_(1.0)


def build_models(cfg: EncoderConfig, init_rng: np.random.Generator) -> tuple[OnlineModel, TargetModel]:
    """Initialized online model and its target copy (target starts equal)."""
    dtype = torch_dtype(cfg.dtype)
    online = OnlineModel(cfg).to(dtype)
    init_params(online, init_rng)
    target = TargetModel(cfg).to(dtype)
    target.load_state_dict(
        {k: v for k, v in online.state_dict().items() if not k.startswith("predictor.")}
    )
    for p in target.parameters():
        p.requires_grad_(False)
    return online, target


def forward_stages(backbone: Backbone, views: torch.Tensor) -> dict[str, torch.Tensor]:
    """Stage feature maps for a batch of views (B x 3 x H x W)."""
    if views.ndim != 4 or views.shape[1] != 3:
        raise ContractError(f"views must be B x 3 x H x W, got {tuple(views.shape)}")
    return backbone(views)


def fuse_layers(
    stage_features: dict[str, torch.Tensor],
    layers: tuple[str, ...],
    target_hw: tuple[int, int],
) -> torch.Tensor:
    """Bilinearly resample the selected maps to target_hw and concatenate."""
    parts = []
    for name in layers:
        if name not in stage_features:
            raise ConfigError(f"unknown stage name {name!r}; have {sorted(stage_features)}")
        fmap = stage_features[name]
        if tuple(fmap.shape[-2:]) != tuple(target_hw):
            fmap = F.interpolate(fmap, size=tuple(target_hw), mode="bilinear", align_corners=False)
        parts.append(fmap)
    return torch.cat(parts, dim=1)


def project_predict(
    model: OnlineModel | TargetModel,
    pooled: torch.Tensor,
    role: str,
    normalize: bool = True,
) -> torch.Tensor:
    """Embed pooled features: projector then predictor (online) or projector only (target)."""
    if role == "online":
        if not isinstance(model, OnlineModel):
            raise ContractError("online role requires an OnlineModel")
        out = model.predictor(model.projector(pooled))
    elif role == "target":
        out = model.projector(pooled)
    else:
        raise ContractError(f"role must be online or target, got {role!r}")
    if normalize:
        out = F.normalize(out, dim=-1)
    return out


def ema_update(online: OnlineModel, target: TargetModel, momentum: float) -> None:
    """In-place xi <- m*xi + (1-m)*theta over the shared parameter tree."""
    if not (0.0 <= momentum <= 1.0):
        raise ContractError(f"momentum must lie in [0, 1], got {momentum}")
    theta = dict(online.named_parameters())
    with torch.no_grad():
        for name, xi in target.named_parameters():
            if name not in theta:
                raise ContractError(f"target parameter {name!r} has no online counterpart")
            th = theta[name]
            if th.shape != xi.shape:
                raise ContractError(
                    f"shape mismatch for {name!r}: online {tuple(th.shape)} vs target {tuple(xi.shape)}"
                )
            xi.mul_(momentum).add_(th, alpha=1.0 - momentum)


def state_to_numpy(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_numpy_state(model: nn.Module, state: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in state.items()})
