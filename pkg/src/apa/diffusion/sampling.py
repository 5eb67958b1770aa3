"""Deterministic DDIM inversion and denoising loops over a whole trajectory."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch.utils.checkpoint import checkpoint as _checkpoint

from apa.diffusion.schedule import NoiseSchedule, denoise_step, invert_step, predict_z0
from apa.errors import HookError, NumericalFailureError


@dataclass
class StepHook:
    """Callback run after the noise prediction at step ``t``.

    ``fn(z_t, t, eps_pred)`` returns a replacement noise prediction, or None to
    keep it. With ``max_step`` set the hook only fires for ``t <= max_step``.
    """

    fn: Callable
    max_step: Optional[int] = None

    def active(self, t):
        return self.max_step is None or t <= self.max_step


@dataclass
class DenoiseResult:
    x: torch.Tensor
    z0: torch.Tensor
    z0_steps: dict = field(default_factory=dict)  # t -> clean-latent estimate at step t
    hook_calls: int = 0


def _embedding(cond):
    return getattr(cond, "embedding", cond)


def predict_eps(denoiser, z, t, cond, sched, adapter=None):
    return denoiser(z, sched.net_time(t), _embedding(cond), adapter)


def _check_finite(z, step, what):
    if not torch.isfinite(z).all():
        raise NumericalFailureError(f"non-finite latent during {what} at step {step}", step=step)


def full_inversion(x, denoiser, cond, sched: NoiseSchedule, codec, adapter=None):
    """Map an image to its terminal latent by ``T`` inversion steps.

    Returns ``(z_T, trajectory)`` where ``trajectory[t]`` is the latent at step t.
    """
    with torch.no_grad():
        z = codec.encode(x)
        traj = [z]
        for t in range(1, sched.total_steps + 1):
            eps = predict_eps(denoiser, z, t, cond, sched, adapter)
            z = invert_step(z, t, eps, sched)
            _check_finite(z, t, "inversion")
            traj.append(z)
    return z, traj


def full_denoise(
    z_T,
    denoiser,
    cond,
    sched: NoiseSchedule,
    codec,
    hooks=(),
    adapter=None,
    use_checkpoint=False,
):
    """Run ``T`` DDIM steps from ``z_T`` and decode the result.

    Gradients flow according to the caller's autograd mode. With
    ``use_checkpoint`` each network evaluation is recomputed during backward
    instead of keeping its activations, so memory grows with the number of
    latents rather than with network depth times ``T``. Hooks run outside the
    checkpointed segment so they are never replayed.
    """
    z = z_T
    steps = {}
    calls = 0
    emb = _embedding(cond)
    for t in range(sched.total_steps, 0, -1):
        if use_checkpoint and torch.is_grad_enabled():
            eps = _checkpoint(denoiser, z, sched.net_time(t), emb, adapter, use_reentrant=False)
        else:
            eps = denoiser(z, sched.net_time(t), emb, adapter)
        for hook in hooks:
            if not hook.active(t):
                continue
            calls += 1
            try:
                out = hook.fn(z, t, eps)
            except Exception as exc:
                raise HookError(f"hook {hook.fn!r} failed at step {t}: {exc}", step=t) from exc
            if out is not None:
                eps = out
        steps[t] = predict_z0(z, t, eps, sched)
        z = denoise_step(z, t, eps, sched)
        _check_finite(z, t, "denoising")
    return DenoiseResult(x=codec.decode(z), z0=z, z0_steps=steps, hook_calls=calls)
