"""Reconstruction, perceptual and adversarial losses."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def reconstruction_loss(x_t: torch.Tensor, x_hat: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    if x_t.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(x_hat.shape)}")
    if kind == "l1":
        return (x_t - x_hat).abs().mean()
    if kind == "l2":
        return ((x_t - x_hat) ** 2).mean()
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def _frames_nchw(x: torch.Tensor) -> torch.Tensor:
    # (B, T, H, W, C) -> (B*T, C, H, W)
    b, t, h, w, c = x.shape
    return x.reshape(b * t, h, w, c).permute(0, 3, 1, 2)


class FeatureStack(nn.Module):
    """Frozen, seeded random conv stack; stands in for a pretrained feature net."""

    def __init__(self, channels: int = 3, widths=(16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = channels
        for i, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor):
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def perceptual_loss(x_t: torch.Tensor, x_hat: torch.Tensor, stack: FeatureStack) -> torch.Tensor:
    """Mean squared feature distance over the three depths of ``stack``."""
    fa = stack(_frames_nchw(x_t).to(stack.convs[0].weight.dtype))
    fb = stack(_frames_nchw(x_hat).to(stack.convs[0].weight.dtype))
    return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb)) / len(fa)


class PatchDiscriminator(nn.Module):
    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, 1, 3, 1, 1))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(_frames_nchw(frames))


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * (F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean())


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def adversarial_losses(x_t: torch.Tensor, x_hat: torch.Tensor, disc: nn.Module):
    """(g_loss, d_loss) for a hinge GAN; d_loss sees a detached reconstruction."""
    g_loss = hinge_g_loss(disc(x_hat))
    d_loss = hinge_d_loss(disc(x_t.detach()), disc(x_hat.detach()))
    return g_loss, d_loss
