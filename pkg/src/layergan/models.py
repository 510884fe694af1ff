"""Toy-scale networks.

A small style-like generator (2-layer mapping network whose output modulates
per-block channel gains of a transposed-convolution stack), a convolutional
discriminator, and a compact UNet used as the post-hoc segmenter. Builders
initialize deterministically from an explicit seed without touching the
global torch RNG.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layerops import LayerTriplet

CHECKPOINT_FORMAT = "layergan-ckpt-1"

_UPSAMPLE_STEPS = {16: 2, 32: 3, 64: 4}


@dataclass(frozen=True)
class NetConfig:
    img_size: int = 32
    base_channels: int = 64
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 2

    def __post_init__(self):
        if self.img_size not in _UPSAMPLE_STEPS:
            raise ValueError(
                f"img_size must be one of {sorted(_UPSAMPLE_STEPS)}, got {self.img_size}"
            )
        for name in ("base_channels", "z_dim", "w_dim", "mapping_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class MappingNet(nn.Module):
    def __init__(self, z_dim: int, w_dim: int, n_layers: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = z_dim
        for _ in range(n_layers):
            layers += [nn.Linear(prev, w_dim), nn.LeakyReLU(0.2)]
            prev = w_dim
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class ModulatedUpBlock(nn.Module):
    """2x upsampling block whose channel gains are driven by the style vector."""

    def __init__(self, c_in: int, c_out: int, w_dim: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        self.gain = nn.Linear(w_dim, c_out)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        h = self.up(x)
        g = 1.0 + self.gain(w).unsqueeze(-1).unsqueeze(-1)
        return F.leaky_relu(h * g, 0.2)


def _channel_plan(base: int, n_up: int) -> list[int]:
    start = base * 4
    return [max(start >> (i + 1), base) for i in range(n_up)]


class LayerGenerator(nn.Module):
    """Latent batch -> [N, out_channels, img_size, img_size] raw (pre-activation)."""

    def __init__(self, cfg: NetConfig, out_channels: int):
        super().__init__()
        n_up = _UPSAMPLE_STEPS[cfg.img_size]
        chans = _channel_plan(cfg.base_channels, n_up)
        self.cfg = cfg
        self.out_channels = out_channels
        self.mapping = MappingNet(cfg.z_dim, cfg.w_dim, cfg.mapping_layers)
        self.const = nn.Parameter(torch.zeros(cfg.base_channels * 4, 4, 4))
        self.blocks = nn.ModuleList()
        prev = cfg.base_channels * 4
        for c in chans:
            self.blocks.append(ModulatedUpBlock(prev, c, cfg.w_dim))
            prev = c
        self.to_out = nn.Conv2d(prev, out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.z_dim:
            raise ValueError(
                f"latent batch must be [N, {self.cfg.z_dim}], got {tuple(z.shape)}"
            )
        w = self.mapping(z)
        x = self.const.unsqueeze(0).expand(z.shape[0], -1, -1, -1)
        for block in self.blocks:
            x = block(x, w)
        return self.to_out(x)


class FgMaskGenerator(nn.Module):
    """4-channel generator: tanh foreground (3ch) + sigmoid mask (1ch)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.backbone = LayerGenerator(cfg, out_channels=4)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        raw = self.backbone(z)
        return torch.cat([torch.tanh(raw[:, :3]), torch.sigmoid(raw[:, 3:4])], dim=1)


class BackgroundGenerator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.backbone = LayerGenerator(cfg, out_channels=3)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.backbone(z))


class GeneratorPair(NamedTuple):
    g_fm: FgMaskGenerator
    g_b: BackgroundGenerator


class Discriminator(nn.Module):
    """Convolutional classifier [N, 3, H, W] -> [N] logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        n_down = _UPSAMPLE_STEPS[cfg.img_size]
        chans = [min(cfg.base_channels << i, cfg.base_channels * 4) for i in range(n_down)]
        layers: list[nn.Module] = []
        prev = 3
        for c in chans:
            layers += [nn.Conv2d(prev, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev * 4 * 4, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.flatten(1)).squeeze(1)


class UNetSegmenter(nn.Module):
    """Small encoder-decoder with skip connections; outputs mask logits."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = nn.Sequential(
            nn.Conv2d(3, base, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.enc2 = nn.Sequential(
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, base * 2, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.enc3 = nn.Sequential(
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 4, base * 4, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 4, stride=2, padding=1)
        self.dec2 = nn.Sequential(
            nn.Conv2d(base * 4, base * 2, 3, padding=1), nn.LeakyReLU(0.2)
        )
        self.up1 = nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1)
        self.dec1 = nn.Sequential(
            nn.Conv2d(base * 2, base, 3, padding=1), nn.LeakyReLU(0.2)
        )
        self.head = nn.Conv2d(base, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h1 = self.enc1(x)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        d2 = self.dec2(torch.cat([self.up2(h3), h2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), h1], dim=1))
        return self.head(d1)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Mask probabilities in (0, 1)."""
        return torch.sigmoid(self.forward(x))


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1]
    if isinstance(module, nn.ConvTranspose2d):
        return w.shape[0] * w.shape[2] * w.shape[3]
    return w[0].numel()  # Conv2d


def seeded_init(module: nn.Module, generator: torch.Generator) -> None:
    """Reinitialize all parameters deterministically from the generator.

    Weights ~ N(0, 1/fan_in), biases zero, learned constants ~ N(0, 1).
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, 1.0 / math.sqrt(_fan_in(m)), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        for name, p in module.named_parameters():
            if name.endswith("const"):
                p.normal_(0.0, 1.0, generator=generator)


def build_generators(cfg: NetConfig, seed: int) -> GeneratorPair:
    """Foreground+mask and background generators with deterministic init."""
    g = torch.Generator().manual_seed(seed)
    g_fm = FgMaskGenerator(cfg)
    g_b = BackgroundGenerator(cfg)
    seeded_init(g_fm, g)
    seeded_init(g_b, g)
    return GeneratorPair(g_fm=g_fm, g_b=g_b)


def build_discriminator(cfg: NetConfig, seed: int) -> Discriminator:
    g = torch.Generator().manual_seed(seed)
    d = Discriminator(cfg)
    seeded_init(d, g)
    return d


def build_segmenter(cfg: NetConfig | None = None, seed: int = 0, base: int | None = None) -> UNetSegmenter:
    """Post-hoc UNet; width comes from ``base`` or cfg.base_channels."""
    if base is None:
        base = cfg.base_channels if cfg is not None else 16
    g = torch.Generator().manual_seed(seed)
    net = UNetSegmenter(base=base)
    seeded_init(net, g)
    return net


def synthesize(gp: GeneratorPair, z: torch.Tensor) -> LayerTriplet:
    """Run both generators on a shared latent batch and assemble the triplet."""
    out = gp.g_fm(z)
    b = gp.g_b(z)
    return LayerTriplet(f=out[:, :3], b=b, m=out[:, 3:4])


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> float:
    """Cheap order-sensitive digest of all parameters, for determinism checks."""
    total = 0.0
    for i, p in enumerate(module.parameters()):
        total += float((p.detach().double() * (i + 1)).sum())
    return total


def _canonical(obj):
    """Rebuild containers and intern strings so equal payloads pickle equally.

    Pickle emits back-references for repeated *objects*; whether two equal
    strings are one object or two depends on history (fresh run vs. values
    that went through an earlier load). Interning strings and rebuilding
    containers removes that history, which keeps checkpoint bytes stable
    across resume. Tensors pass through untouched.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_checkpoint(path: str | Path, payload: dict) -> Path:
    """Write a checkpoint archive (atomic: temp file then rename)."""
    path = Path(path)
    payload = dict(payload)
    payload.setdefault("format_version", CHECKPOINT_FORMAT)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(_canonical(payload), tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {version!r}")
    return payload
