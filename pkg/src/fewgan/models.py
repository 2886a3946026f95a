"""Conditional generator and projection discriminator with named parameter groups.

The generator grows a learnable constant tensor through residual blocks; each
block reads the class embedding, concatenates it with the latent code, and maps
that through a linear layer to per-channel scale/shift applied after the
block's second normalisation. The discriminator's conditional logit decomposes
as ``V[y] . phi(h) + psi(phi(h))`` with an auxiliary latent-prediction head.

Parameter groups ("backbone" / "linear" / "embed") are first-class so that the
dfm/gfm fine-tuning masks can freeze exactly the advertised sets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def to_tensor(arr) -> torch.Tensor:
    """torch.from_numpy with contiguity and writability guaranteed."""
    arr = np.ascontiguousarray(arr)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr)

GROUP_BACKBONE = "backbone"
GROUP_LINEAR = "linear"
GROUP_EMBED = "embed"

DFM_MODES = {
    "embed": frozenset({GROUP_EMBED}),
    "linear": frozenset({GROUP_EMBED, GROUP_LINEAR}),
    "all": frozenset({GROUP_EMBED, GROUP_LINEAR, GROUP_BACKBONE}),
}
GFM_MODES = {
    "embed": frozenset({GROUP_EMBED}),
    "linear": frozenset({GROUP_EMBED, GROUP_LINEAR}),
}


@dataclass(frozen=True)
class GanArch:
    """Shared architecture hyperparameters for the generator/discriminator pair."""

    class_budget: int
    image_size: int = 28
    image_channels: int = 1
    n_blocks: int = 3
    width: int = 64
    z_dim: int = 128
    embed_dim: int = 32
    feat_dim: int = 0  # 0 -> width

    def __post_init__(self):
        if self.class_budget < 1:
            raise ValueError("class_budget must be >= 1")
        if self.base_size * 2 ** (self.n_blocks - 1) != self.image_size:
            raise ValueError(
                f"image_size {self.image_size} not reachable from {self.n_blocks} blocks "
                f"(needs base * 2^{self.n_blocks - 1})"
            )

    @property
    def base_size(self) -> int:
        return self.image_size >> (self.n_blocks - 1)

    @property
    def projection_dim(self) -> int:
        return self.feat_dim or self.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanArch":
        return cls(**d)


@dataclass(frozen=True)
class TrainableMask:
    """Which parameter groups stay trainable during fine-tuning, per network."""

    dfm: str
    gfm: str
    d_groups: frozenset
    g_groups: frozenset


def expand_trainable_mask(dfm: str, gfm: str) -> TrainableMask:
    if dfm not in DFM_MODES:
        raise ValueError(f"dfm must be one of {sorted(DFM_MODES)}, got {dfm!r}")
    if gfm not in GFM_MODES:
        raise ValueError(f"gfm must be one of {sorted(GFM_MODES)}, got {gfm!r}")
    return TrainableMask(dfm=dfm, gfm=gfm, d_groups=DFM_MODES[dfm], g_groups=GFM_MODES[gfm])


def channel_norm(h: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel normalisation over spatial dims (batch independent)."""
    mu = h.mean(dim=(2, 3), keepdim=True)
    var = h.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re)initialise all parameters from one seeded generator.

    Conv/linear weights ~ N(0, 1/fan_in), biases zero, embedding rows ~ N(0, 1);
    loose tensors named ``h0`` ~ N(0, 1). Iteration follows registration order.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        if hasattr(module, "h0"):
            module.h0.normal_(0.0, 1.0, generator=g)
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, fan_in ** -0.5, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Embedding):
                m.weight.normal_(0.0, 1.0, generator=g)


class _GroupedModule(nn.Module):
    """Mixin: parameter-name -> group mapping plus group-based selection."""

    def param_group(self, name: str) -> str:
        raise NotImplementedError

    def param_groups(self) -> dict:
        return {name: self.param_group(name) for name, _ in self.named_parameters()}

    def group_parameters(self, groups) -> list:
        return [p for name, p in self.named_parameters() if self.param_group(name) in groups]

    def set_trainable_groups(self, groups) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(self.param_group(name) in groups)


class GenBlock(nn.Module):
    def __init__(self, channels: int, z_dim: int, embed_dim: int, class_budget: int,
                 upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.embed = nn.Embedding(class_budget, embed_dim)
        self.mod = nn.Linear(z_dim + embed_dim, 2 * channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h, z, y):
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        r = h
        t = F.relu(channel_norm(self.conv1(h)))
        t = channel_norm(self.conv2(t))
        scale, shift = self.mod(torch.cat([z, self.embed(y)], dim=1)).chunk(2, dim=1)
        t = t * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.relu(t) + r


class Generator(_GroupedModule):
    """Constant-input conditional generator; output in [-1, 1] via tanh."""

    def __init__(self, arch: GanArch, init_seed: int = 0):
        super().__init__()
        self.arch = arch
        base = arch.base_size
        self.h0 = nn.Parameter(torch.empty(arch.width, base, base))
        self.blocks = nn.ModuleList(
            GenBlock(arch.width, arch.z_dim, arch.embed_dim, arch.class_budget,
                     upsample=(i > 0))
            for i in range(arch.n_blocks)
        )
        self.out_conv = nn.Conv2d(arch.width, arch.image_channels, 3, padding=1)
        init_parameters(self, init_seed)

    def param_group(self, name: str) -> str:
        if ".embed." in name:
            return GROUP_EMBED
        if ".mod." in name:
            return GROUP_LINEAR
        return GROUP_BACKBONE

    def class_embedding_hosts(self):
        return [(blk, "embed") for blk in self.blocks]

    def forward(self, z, y):
        h = self.h0.unsqueeze(0).expand(z.shape[0], -1, -1, -1)
        for blk in self.blocks:
            h = blk(h, z, y)
        return torch.tanh(self.out_conv(h))


class DBlock(nn.Module):
    def __init__(self, channels: int, down: bool):
        super().__init__()
        self.down = down
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h):
        t = self.conv1(F.leaky_relu(h, 0.2))
        t = self.conv2(F.leaky_relu(t, 0.2))
        if self.down:
            t = F.avg_pool2d(t, 2)
            h = F.avg_pool2d(h, 2)
        return t + h


class Discriminator(_GroupedModule):
    """Projection discriminator: d(x, y) = V[y] . phi(h) + psi(phi(h)), plus a z head."""

    def __init__(self, arch: GanArch, init_seed: int = 0):
        super().__init__()
        self.arch = arch
        feat = arch.projection_dim
        self.conv_in = nn.Conv2d(arch.image_channels, arch.width, 3, padding=1)
        self.blocks = nn.ModuleList(
            DBlock(arch.width, down=(i < arch.n_blocks - 1)) for i in range(arch.n_blocks)
        )
        self.phi = nn.Linear(arch.width, feat)
        self.psi = nn.Linear(feat, 1)
        self.label_embed = nn.Embedding(arch.class_budget, feat)
        self.dz = nn.Linear(feat, arch.z_dim)
        init_parameters(self, init_seed)

    def param_group(self, name: str) -> str:
        if name.startswith(("label_embed.", "dz.")):
            return GROUP_EMBED
        if name.startswith(("phi.", "psi.")):
            return GROUP_LINEAR
        return GROUP_BACKBONE

    def class_embedding_hosts(self):
        return [(self, "label_embed")]

    def features(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        h = F.leaky_relu(h, 0.2)
        return self.phi(h.mean(dim=(2, 3)))

    def heads(self, feat, y):
        uncond = self.psi(feat).squeeze(1)
        cond = (self.label_embed(y) * feat).sum(dim=1) + uncond
        return cond, uncond, self.dz(feat)

    def forward(self, x, y):
        """Returns (conditional_logit, unconditional_logit, z_prediction)."""
        if x.shape[-2:] != (self.arch.image_size, self.arch.image_size):
            raise ValueError(
                f"expected {self.arch.image_size}x{self.arch.image_size} input, "
                f"got {tuple(x.shape[-2:])}"
            )
        return self.heads(self.features(x), y)


def extend_embeddings(net: _GroupedModule, n_new_classes: int, init_seed: int):
    """Append n_new_classes rows (N(0, 0.02^2)) to every class-embedding matrix.

    Existing rows are preserved bit-for-bit; the net's arch budget is updated.
    Returns the same module.
    """
    if n_new_classes < 0:
        raise ValueError("n_new_classes must be >= 0")
    if n_new_classes == 0:
        return net
    g = torch.Generator().manual_seed(init_seed)
    with torch.no_grad():
        for host, attr in net.class_embedding_hosts():
            old = getattr(host, attr)
            grown = nn.Embedding(old.num_embeddings + n_new_classes, old.embedding_dim,
                                 dtype=old.weight.dtype)
            grown.weight[: old.num_embeddings] = old.weight
            grown.weight[old.num_embeddings:].normal_(0.0, 0.02, generator=g)
            setattr(host, attr, grown)
    net.arch = dataclasses.replace(net.arch,
                                   class_budget=net.arch.class_budget + n_new_classes)
    return net


def ema_update(ema_net: nn.Module, net: nn.Module, decay: float):
    """ema <- decay * ema + (1 - decay) * params, elementwise over every group."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    ema_named = dict(ema_net.named_parameters())
    with torch.no_grad():
        for name, p in net.named_parameters():
            target = ema_named.get(name)
            if target is None or target.shape != p.shape:
                raise ValueError(f"parameter {name} missing or shape-mismatched in EMA copy")
            target.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema_net
