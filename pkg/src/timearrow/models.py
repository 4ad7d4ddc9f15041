"""Dense feature extractor and time arrow prediction heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "timearrow-checkpoint/1"


@dataclass(frozen=True)
class ExtractorConfig:
    depth: int = 3
    base_channels: int = 32
    out_channels: int = 32
    leaky_slope: float = 0.01
    batch_norm: bool = True

    def __post_init__(self):
        if self.depth < 0 or self.base_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid extractor config {self}")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "equivariant"  # or "plain"
    hidden: tuple[int, ...] = (32, 32)
    batch_norm: bool = True
    leaky_slope: float = 0.01
    plain_width: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("equivariant", "plain"):
            raise ValueError(f"unknown head kind {self.kind!r}")


def _conv_block(c_in, c_out, cfg: ExtractorConfig):
    layers = []
    for i in range(2):
        layers.append(nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, padding=1, bias=not cfg.batch_norm))
        if cfg.batch_norm:
            layers.append(nn.BatchNorm2d(c_out))
        layers.append(nn.LeakyReLU(cfg.leaky_slope))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """2D U-Net mapping ``(B, C_in, H, W)`` to ``(B, out_channels, H, W)`` for any H, W."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig(), in_channels: int = 1):
        super().__init__()
        self.config = config
        widths = [config.base_channels * 2**i for i in range(config.depth + 1)]
        self.down = nn.ModuleList(
            _conv_block(in_channels if i == 0 else widths[i - 1], widths[i], config) for i in range(config.depth))
        self.bottom = _conv_block(in_channels if config.depth == 0 else widths[config.depth - 1],
                                  widths[config.depth], config)
        self.up = nn.ModuleList(
            _conv_block(widths[i + 1] + widths[i], widths[i], config) for i in reversed(range(config.depth)))
        self.out = nn.Conv2d(widths[0], config.out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        k = 2**self.config.depth
        ph, pw = (-h) % k, (-w) % k
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode=mode)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skips.pop()], dim=1))
        x = self.out(x)
        if ph or pw:
            x = x[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
        return x


class EquivariantLayer(nn.Module):
    """Pixelwise layer on ``(B, 2, C, *spatial)`` that commutes with swapping the two slots.

    Output slot t is ``act(norm(L z_t + G (z_1 + z_2) + b))``. Normalization
    statistics are pooled over both slots so the layer stays equivariant in
    training mode too.
    """

    def __init__(self, c_in: int, c_out: int, batch_norm: bool = False, activation: Optional[nn.Module] = None):
        super().__init__()
        self.L = nn.Parameter(torch.empty(c_out, c_in))
        self.G = nn.Parameter(torch.empty(c_out, c_in))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.norm = nn.BatchNorm1d(c_out) if batch_norm else None
        self.activation = activation
        bound = 1 / (2 * c_in) ** 0.5
        nn.init.uniform_(self.L, -bound, bound)
        nn.init.uniform_(self.G, -bound, bound)

    def forward(self, z):
        if z.shape[1] != 2 or z.shape[2] != self.L.shape[1]:
            raise ValueError(f"expected (B, 2, {self.L.shape[1]}, ...), got {tuple(z.shape)}")
        total = z[:, 0] + z[:, 1]
        local = torch.einsum("mn,btn...->btm...", self.L, z)
        pooled = torch.einsum("mn,bn...->bm...", self.G, total).unsqueeze(1)
        bias = self.bias.view(1, 1, -1, *([1] * (z.ndim - 3)))
        out = local + pooled + bias
        if self.norm is not None:
            b, _, c = out.shape[:3]
            flat = out.reshape(b * 2, c, -1)
            out = self.norm(flat).reshape(out.shape)
        if self.activation is not None:
            out = self.activation(out)
        return out


class EquivariantHead(nn.Module):
    """Hidden equivariant layers, spatial average pooling, then an equivariant layer to 1 channel."""

    def __init__(self, in_channels: int, config: HeadConfig = HeadConfig()):
        super().__init__()
        self.config = config
        layers = []
        c = in_channels
        for width in config.hidden:
            layers.append(EquivariantLayer(c, width, config.batch_norm, nn.LeakyReLU(config.leaky_slope)))
            c = width
        self.layers = nn.ModuleList(layers)
        self.final = EquivariantLayer(c, 1)

    def features(self, z):
        """Pixelwise hidden features ``(B, 2, C', H, W)`` before pooling."""
        for layer in self.layers:
            z = layer(z)
        return z

    def classify(self, pooled):
        """Logits ``(B, 2)`` from pooled features ``(B, 2, C')``."""
        return self.final(pooled)[:, :, 0]

    def forward(self, z):
        return self.classify(self.features(z).mean(dim=(-2, -1)))


class PlainHead(nn.Module):
    """Conventional CNN on channel-concatenated slots (no symmetry constraint)."""

    def __init__(self, in_channels: int, config: HeadConfig = HeadConfig(kind="plain")):
        super().__init__()
        self.config = config
        w = config.plain_width
        layers = []
        c = 2 * in_channels
        for _ in range(2):
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=not config.batch_norm)]
            if config.batch_norm:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.LeakyReLU(config.leaky_slope))
            c = w
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(w, 2)

    def forward(self, z):
        b, _, c, h, w = z.shape
        x = self.convs(z.reshape(b, 2 * c, h, w))
        return self.fc(x.mean(dim=(-2, -1)))


def build_head(in_channels: int, config: HeadConfig) -> nn.Module:
    if config.kind == "equivariant":
        return EquivariantHead(in_channels, config)
    return PlainHead(in_channels, config)


class TimeArrowNet(nn.Module):
    """Shared-weight extractor applied to both frames, followed by a head."""

    def __init__(self, extractor: ExtractorConfig = ExtractorConfig(), head: HeadConfig = HeadConfig()):
        super().__init__()
        self.extractor_config = extractor
        self.head_config = head
        self.extractor = UNet(extractor)
        self.head = build_head(extractor.out_channels, head)

    def embed(self, x):
        """``(B, H, W)`` or ``(B, 1, H, W)`` images to ``(B, c, H, W)`` features."""
        if x.ndim == 3:
            x = x[:, None]
        return self.extractor(x)

    def stacked(self, x):
        """``(B, 2, H, W)`` pairs to stacked representations ``(B, 2, c, H, W)``."""
        if not torch.all(torch.isfinite(x)):
            raise ValueError("non-finite input")
        b, t, h, w = x.shape
        if t != 2:
            raise ValueError(f"expected (B, 2, H, W) pairs, got {tuple(x.shape)}")
        z = self.extractor(x.reshape(b * 2, 1, h, w))
        return z.reshape(b, 2, -1, h, w)

    def forward(self, x):
        z = self.stacked(x)
        return self.head(z), z


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: TimeArrowNet, *, normalization=None, sampler=None, step: int = 0,
                    epoch: int = 0, optimizer_state=None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": model.state_dict(),
        "extractor": dataclasses.asdict(model.extractor_config),
        "head": dataclasses.asdict(model.head_config),
        "normalization": dataclasses.asdict(normalization) if normalization is not None else None,
        "sampler": dataclasses.asdict(sampler) if sampler is not None else None,
        "step": int(step),
        "epoch": int(epoch),
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[TimeArrowNet, dict]:
    """Rebuild the model from a checkpoint; returns ``(model in eval mode, raw payload)``."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a timearrow checkpoint")
    model = TimeArrowNet(ExtractorConfig(**payload["extractor"]), HeadConfig(**payload["head"]))
    dtype = next(iter(payload["state_dict"].values())).dtype
    if dtype.is_floating_point:
        model = model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
