"""Noise schedule and the closed-form DDIM step algebra.

Step indices ``t`` run over ``0..T``. ``alpha_bar[0]`` is exactly one (the
clean latent); ``alpha_bar[T]`` is the noisiest level. Each index also maps to
a timestep of the underlying 1000-step training process, which is what the
denoiser network is conditioned on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from apa.errors import InvalidArgumentError, StepRangeError

TRAIN_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02


def linear_beta_alpha_bar(train_steps=TRAIN_STEPS, beta_start=None, beta_end=None):
    """Cumulative products of ``1 - beta`` for the linear DDPM beta schedule.

    Entry ``k`` is the signal level after ``k`` training steps (entry 0 is 1).
    """
    beta_start = BETA_START if beta_start is None else beta_start
    beta_end = BETA_END if beta_end is None else beta_end
    betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    timesteps: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise InvalidArgumentError("alpha_bar must be a non-empty 1-D array")
        if a[0] != 1.0:
            raise InvalidArgumentError(f"alpha_bar[0] must be exactly 1, got {a[0]!r}")
        if not np.all(a > 0) or not np.all(np.isfinite(a)):
            raise InvalidArgumentError("alpha_bar entries must be finite and strictly positive")
        if np.any(np.diff(a) >= 0):
            raise InvalidArgumentError("alpha_bar must be strictly decreasing in t")
        object.__setattr__(self, "alpha_bar", a)
        ts = self.timesteps
        if ts is None:
            ts = np.arange(a.size)
        ts = np.asarray(ts, dtype=np.int64)
        if ts.shape != a.shape:
            raise InvalidArgumentError("timesteps must have the same length as alpha_bar")
        object.__setattr__(self, "timesteps", ts)

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def linear(cls, T, train_steps=TRAIN_STEPS, beta_start=None, beta_end=None):
        """Subsample the linear-beta training schedule to ``T`` evenly spaced steps."""
        if T < 0 or T > train_steps:
            raise InvalidArgumentError(f"T must lie in [0, {train_steps}], got {T}")
        full = linear_beta_alpha_bar(train_steps, beta_start, beta_end)
        idx = np.array([round(k * train_steps / T) for k in range(T + 1)] if T else [0])
        return cls(alpha_bar=full[idx], timesteps=idx)

    def ab(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise StepRangeError(f"step {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])

    def check_step(self, t: int):
        if not 1 <= t <= self.total_steps:
            raise StepRangeError(f"step {t} outside [1, {self.total_steps}]")

    def net_time(self, t: int) -> int:
        """Training-process timestep fed to the network for step ``t``."""
        return int(self.timesteps[t])

    def to_dict(self):
        return {"alpha_bar": self.alpha_bar.tolist(), "timesteps": self.timesteps.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(alpha_bar=np.asarray(d["alpha_bar"]), timesteps=np.asarray(d["timesteps"]))


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def ddim_transfer(z, eps, ab_from: float, ab_to: float):
    """Move ``z`` from noise level ``ab_from`` to ``ab_to`` along a fixed noise estimate.

    Denoising and inversion are both instances of this map with the two levels
    swapped, which is why they invert each other exactly for a fixed ``eps``.
    """
    z0 = (z - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * z0 + math.sqrt(1.0 - ab_to) * eps


def forward_diffuse(z0, t, eps, sched: NoiseSchedule):
    sched.check_step(t)
    _same_shape(z0, eps, "forward_diffuse eps")
    a = sched.ab(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def denoise_step(z_t, t, eps_pred, sched: NoiseSchedule):
    sched.check_step(t)
    _same_shape(z_t, eps_pred, "denoise_step eps_pred")
    return ddim_transfer(z_t, eps_pred, sched.ab(t), sched.ab(t - 1))


def invert_step(z_prev, t, eps_pred, sched: NoiseSchedule):
    sched.check_step(t)
    _same_shape(z_prev, eps_pred, "invert_step eps_pred")
    return ddim_transfer(z_prev, eps_pred, sched.ab(t - 1), sched.ab(t))


def predict_z0(z_t, t, eps_pred, sched: NoiseSchedule):
    sched.check_step(t)
    _same_shape(z_t, eps_pred, "predict_z0 eps_pred")
    a = sched.ab(t)
    return (z_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def interpolate_z0(z0_ref, z0_pred, ab: float):
    """Blend the reference latent with the step's clean estimate.

    The reference weight is the noise scale ``sqrt(1 - ab)``, so noisy steps lean
    on the clean input and late steps on the model's own estimate.
    """
    w = math.sqrt(1.0 - ab)
    return w * z0_ref + (1.0 - w) * z0_pred
