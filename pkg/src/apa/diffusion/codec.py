"""Encoder/decoder between pixel images and diffusion latents."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from apa.errors import InvalidArgumentError

MODES = ("identity", "tiny_autoencoder")


class Codec(nn.Module):
    """``identity`` diffuses directly in pixel space; ``tiny_autoencoder`` halves
    the resolution into a 4-channel latent."""

    def __init__(self, mode="identity", latent_channels=4, hidden=16):
        super().__init__()
        if mode not in MODES:
            raise InvalidArgumentError(f"unknown codec mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.config = dict(mode=mode, latent_channels=latent_channels, hidden=hidden)
        if mode == "tiny_autoencoder":
            self.latent_channels = latent_channels
            self.enc1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
            self.enc2 = nn.Conv2d(hidden, latent_channels, 3, padding=1)
            self.dec1 = nn.Conv2d(latent_channels, hidden, 3, padding=1)
            self.dec2 = nn.Conv2d(hidden, 3, 3, padding=1)

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        if self.mode == "identity":
            return (c, h, w)
        return (self.latent_channels, h // 2, w // 2)

    def encode(self, x):
        if self.mode == "identity":
            return x
        return self.enc2(F.silu(self.enc1(x)))

    def decode(self, z):
        if self.mode == "identity":
            return z
        h = F.silu(self.dec1(z))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.dec2(h)


def train_autoencoder(codec, images, epochs=30, lr=2e-3, batch_size=64, seed=0):
    """Fit the tiny autoencoder by pixel MSE. No-op for the identity codec."""
    if codec.mode == "identity":
        return codec
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    n = images.shape[0]
    for _ in range(epochs):
        order = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            xb = images[order[i:i + batch_size]]
            loss = F.mse_loss(codec.decode(codec.encode(xb)), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
    codec.requires_grad_(False)
    return codec
