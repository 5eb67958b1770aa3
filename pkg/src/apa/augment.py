"""Differentiable pad-resize-brightness augmentation.

Order is fixed: zero-pad by a random border, bilinearly resize back to the
input size, then scale brightness. All random parameters are drawn from
``(seed, invocation)`` alone, and one draw is shared by every image in the
batch passed to a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch.nn.functional as F

from apa.errors import InvalidArgumentError


@dataclass(frozen=True)
class AugmentSpec:
    pad_max: int = 4
    brightness_range: tuple = (0.9, 1.1)
    resize_interp: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.brightness_range
        object.__setattr__(self, "brightness_range", (float(lo), float(hi)))
        if self.pad_max < 0:
            raise InvalidArgumentError("pad_max must be >= 0")
        if not 0 < lo <= 1 <= hi:
            raise InvalidArgumentError(f"brightness_range must satisfy 0 < lo <= 1 <= hi, got {(lo, hi)}")
        if self.resize_interp != "bilinear":
            raise InvalidArgumentError("only bilinear resizing is supported")

    @classmethod
    def identity(cls, seed=0):
        return cls(pad_max=0, brightness_range=(1.0, 1.0), seed=seed)

    @property
    def is_identity(self):
        return self.pad_max == 0 and self.brightness_range == (1.0, 1.0)


def sample_params(spec: AugmentSpec, invocation: int):
    """``(pad, left, top, brightness)`` for this invocation.

    ``pad`` extra rows and columns are split between the two sides of each axis
    at ``left``/``top``.
    """
    rng = np.random.default_rng([spec.seed, int(invocation)])
    pad = int(rng.integers(0, spec.pad_max + 1))
    left = int(rng.integers(0, pad + 1))
    top = int(rng.integers(0, pad + 1))
    lo, hi = spec.brightness_range
    bright = float(rng.uniform(lo, hi)) if hi > lo else lo
    return pad, left, top, bright


def apply(spec: AugmentSpec, x, invocation: int):
    """Augment a ``[b, c, h, w]`` batch; output has the input's shape."""
    h, w = x.shape[-2:]
    if spec.pad_max >= min(h, w) / 2:
        raise InvalidArgumentError(f"pad_max {spec.pad_max} too large for {h}x{w} images")
    pad, left, top, bright = sample_params(spec, invocation)
    if pad:
        x = F.pad(x, (left, pad - left, top, pad - top), value=0.0)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if bright != 1.0:
        x = x * bright
    return x
