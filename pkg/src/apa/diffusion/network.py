"""Small U-Net noise predictor with per-layer low-rank adapter slots.

Every convolution and linear layer is an adaptable layer: it accepts an optional
``(A, B)`` pair and adds ``scale * B @ A`` to its weight on the fly. Adapters
carry a leading "adapter batch" dimension ``n``: either ``n == 1`` (one adapter
shared by the whole input batch) or ``n == batch`` (one adapter per sample),
which lets per-image adapters run in a single batched forward pass.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from apa.errors import InvalidArgumentError


class LoRAConv2d(nn.Conv2d):
    def forward(self, x, delta=None, scale=1.0):
        out = super().forward(x)
        if delta is None:
            return out
        A, B = delta
        n, r = A.shape[0], A.shape[1]
        kh, kw = self.kernel_size
        cin = self.in_channels
        if n == 1:
            h = F.conv2d(x, A[0].reshape(r, cin, kh, kw), None, self.stride, self.padding)
            return out + scale * torch.einsum("or,brhw->bohw", B[0], h)
        b = x.shape[0]
        if n != b:
            raise InvalidArgumentError(f"adapter batch {n} does not match input batch {b}")
        h = F.conv2d(
            x.reshape(1, b * cin, *x.shape[2:]),
            A.reshape(n * r, cin, kh, kw),
            None,
            self.stride,
            self.padding,
            groups=n,
        )
        h = h.reshape(n, r, *h.shape[2:])
        return out + scale * torch.einsum("nor,nrhw->nohw", B, h)

    @property
    def lora_dims(self):
        kh, kw = self.kernel_size
        return self.in_channels * kh * kw, self.out_channels


class LoRALinear(nn.Linear):
    def forward(self, x, delta=None, scale=1.0):
        out = super().forward(x)
        if delta is None:
            return out
        A, B = delta
        n = A.shape[0]
        if n == 1:
            return out + scale * (x @ A[0].T) @ B[0].T
        if n != x.shape[0]:
            raise InvalidArgumentError(f"adapter batch {n} does not match input batch {x.shape[0]}")
        h = torch.einsum("bi,bri->br", x, A)
        return out + scale * torch.einsum("bor,br->bo", B, h)

    @property
    def lora_dims(self):
        return self.in_features, self.out_features


ADAPTABLE = (LoRAConv2d, LoRALinear)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of training-process timesteps ``t`` (shape ``[b]``)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class _Ctx:
    """Per-forward lookup of adapter deltas by layer name."""

    __slots__ = ("deltas", "scale")

    def __init__(self, deltas, scale):
        self.deltas = deltas or {}
        self.scale = scale

    def __call__(self, layer, x):
        return layer(x, self.deltas.get(layer.lora_name), self.scale)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = LoRAConv2d(cin, cout, 3, padding=1)
        self.emb = LoRALinear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = LoRAConv2d(cout, cout, 3, padding=1)
        self.skip = LoRAConv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb, ctx):
        h = ctx(self.conv1, F.silu(self.norm1(x)))
        h = h + ctx(self.emb, emb)[:, :, None, None]
        h = ctx(self.conv2, F.silu(self.norm2(h)))
        return h + (x if self.skip is None else ctx(self.skip, x))


class Denoiser(nn.Module):
    """Noise predictor ``eps(z, t, c)`` on ``channels x size x size`` latents.

    Two down blocks, a middle block and two up blocks with skip connections.
    Conditioning is a real vector added (after projection) to the timestep
    embedding; ``cond_table`` holds one row per class plus a final null row.
    """

    def __init__(self, channels=3, size=32, base=32, cond_dim=16, num_classes=4, train_steps=1000):
        super().__init__()
        self.config = dict(
            channels=channels, size=size, base=base, cond_dim=cond_dim,
            num_classes=num_classes, train_steps=train_steps,
        )
        self.channels, self.size = channels, size
        self.cond_dim, self.num_classes = cond_dim, num_classes
        self.train_steps = train_steps
        c1, c2 = base, 2 * base
        emb = 4 * base
        self.temb_dim = 2 * base

        self.time1 = LoRALinear(self.temb_dim, emb)
        self.time2 = LoRALinear(emb, emb)
        self.cond_proj = LoRALinear(cond_dim, emb)
        self.cond_table = nn.Embedding(num_classes + 1, cond_dim)

        self.conv_in = LoRAConv2d(channels, c1, 3, padding=1)
        self.down0 = ResBlock(c1, c1, emb)
        self.pool0 = LoRAConv2d(c1, c2, 3, stride=2, padding=1)
        self.down1 = ResBlock(c2, c2, emb)
        self.pool1 = LoRAConv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, emb)
        self.up1 = ResBlock(2 * c2, c2, emb)
        self.up0 = ResBlock(c2 + c1, c1, emb)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = LoRAConv2d(c1, channels, 3, padding=1)

        for name, mod in self.named_modules():
            if isinstance(mod, ADAPTABLE):
                mod.lora_name = name

    def adaptable_layers(self):
        return {name: mod for name, mod in self.named_modules() if isinstance(mod, ADAPTABLE)}

    def null_embedding(self):
        return self.cond_table.weight[self.num_classes].detach()

    def class_embedding(self, labels):
        return self.cond_table(labels).detach()

    def forward(self, z, t, cond, adapter=None):
        """Predict the noise in ``z``.

        ``t`` is a training-process timestep (int or ``[b]`` tensor); ``cond`` is
        a ``[b, cond_dim]`` or ``[cond_dim]`` embedding; ``adapter`` is a
        ``LoRAAdapter`` (or None).
        """
        b = z.shape[0]
        if z.shape[1:] != (self.channels, self.size, self.size):
            raise InvalidArgumentError(
                f"latent shape {tuple(z.shape[1:])} != {(self.channels, self.size, self.size)}"
            )
        if not isinstance(t, torch.Tensor):
            t = torch.full((b,), int(t))
        elif t.ndim == 0:
            t = t.expand(b)
        if cond.ndim == 1:
            cond = cond.expand(b, -1)
        ctx = _Ctx(None if adapter is None else adapter.layers, 1.0 if adapter is None else adapter.scale)

        temb = timestep_embedding(t, self.temb_dim).to(z.dtype)
        emb = ctx(self.time2, F.silu(ctx(self.time1, temb)))
        emb = F.silu(emb + ctx(self.cond_proj, cond))

        h0 = self.down0(ctx(self.conv_in, z), emb, ctx)
        h1 = self.down1(ctx(self.pool0, h0), emb, ctx)
        h = self.mid(ctx(self.pool1, h1), emb, ctx)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], dim=1), emb, ctx)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up0(torch.cat([h, h0], dim=1), emb, ctx)
        return ctx(self.conv_out, F.silu(self.norm_out(h)))


class ConstantDenoiser(nn.Module):
    """Returns a fixed tensor regardless of input; used to pin down the step algebra."""

    def __init__(self, value=0.0, cond_dim=1):
        super().__init__()
        self.value = value
        self.cond_dim = cond_dim

    def null_embedding(self):
        return torch.zeros(self.cond_dim)

    def forward(self, z, t, cond, adapter=None):
        v = self.value
        if isinstance(v, torch.Tensor):
            return v.to(z.dtype).expand_as(z).clone()
        return torch.full_like(z, float(v))
