"""Lightweight U-Net over polar power images: 4-level encoder/decoder with
skip connections, per-class sigmoid heads (supervision channels may overlap,
so this is multi-label, not softmax)."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class PolarUNet(nn.Module):
    """Input (B, 1, A, R) normalized power -> logits (B, 3, A, R)."""

    def __init__(self, base_channels: int = 16, levels: int = 4,
                 out_channels: int = 3):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.levels = levels
        widths = [base_channels * (2 ** i) for i in range(levels)]
        self.encoders = nn.ModuleList()
        c_prev = 1
        for w in widths:
            self.encoders.append(_block(c_prev, w))
            c_prev = w
        self.bottleneck = _block(widths[-1], widths[-1] * 2)
        self.up = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c_prev = widths[-1] * 2
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(c_prev, w, 2, stride=2))
            self.decoders.append(_block(2 * w, w))
            c_prev = w
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, r = x.shape[-2], x.shape[-1]
        factor = 2 ** self.levels
        pad_a = (-a) % factor
        pad_r = (-r) % factor
        if pad_a or pad_r:
            x = F.pad(x, (0, pad_r, 0, pad_a), mode="replicate")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)[..., :a, :r]


def normalize_power(power) -> torch.Tensor:
    """log-compress and standardize one power image to zero mean, unit std."""
    x = torch.log1p(torch.as_tensor(power, dtype=torch.float32))
    std = x.std()
    return (x - x.mean()) / (std if std > 1e-6 else 1.0)
