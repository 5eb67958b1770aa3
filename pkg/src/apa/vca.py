"""Stage 1: fit a per-image low-rank adapter so the denoiser retains the input.

The reward is the negative noise-prediction error on the single input image,
maximised by stochastic gradient ascent on the adapter factors while the base
network stays frozen. ``optimizer="sgd"`` applies the raw update
``delta += lr * grad``; the default ``"adam"`` rescales it per coordinate,
which the summed squared-error reward needs to make progress at a stable
step size on the toy denoiser.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from apa.diffusion.sampling import full_denoise, full_inversion, predict_eps
from apa.diffusion.schedule import NoiseSchedule, forward_diffuse
from apa.errors import InvalidArgumentError, NumericalFailureError

log = logging.getLogger(__name__)

SAMPLING_OFFSET = 1 << 32


@dataclass
class LoRAAdapter:
    """Low-rank deltas for every adaptable layer of a denoiser.

    ``layers[name] = (A, B)`` with ``A: [n, r, in_dim]`` and ``B: [n, out_dim, r]``;
    ``n`` is the adapter batch (1 = shared, otherwise one adapter per image).
    """

    layers: dict
    rank: int
    scale: float = 1.0

    @classmethod
    def init(cls, denoiser, seeds=(0,), rank=4, scale=1.0, dtype=torch.float32):
        layers = {}
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        for name, layer in denoiser.adaptable_layers().items():
            din, dout = layer.lora_dims
            r = min(rank, din, dout)
            bound = 1.0 / math.sqrt(din)
            A = torch.stack([(torch.rand(r, din, generator=g, dtype=torch.float64) * 2 - 1) * bound for g in gens])
            B = torch.zeros(len(gens), dout, r, dtype=torch.float64)
            layers[name] = (A.to(dtype), B.to(dtype))
        return cls(layers=layers, rank=rank, scale=scale)

    @property
    def n(self):
        return next(iter(self.layers.values()))[0].shape[0]

    def tensors(self):
        return [t for pair in self.layers.values() for t in pair]

    def requires_grad_(self, flag=True):
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def detach(self):
        return LoRAAdapter({k: (a.detach().clone(), b.detach().clone()) for k, (a, b) in self.layers.items()},
                           self.rank, self.scale)

    def to(self, dtype):
        return LoRAAdapter({k: (a.to(dtype), b.to(dtype)) for k, (a, b) in self.layers.items()}, self.rank, self.scale)

    def select(self, idx):
        """Sub-adapter for images ``idx`` (int, list or slice)."""
        if isinstance(idx, int):
            idx = [idx]
        return LoRAAdapter({k: (a[idx], b[idx]) for k, (a, b) in self.layers.items()}, self.rank, self.scale)

    @classmethod
    def stack(cls, adapters):
        first = adapters[0]
        layers = {
            k: (torch.cat([ad.layers[k][0] for ad in adapters]), torch.cat([ad.layers[k][1] for ad in adapters]))
            for k in first.layers
        }
        return cls(layers, first.rank, first.scale)

    def delta(self, name):
        """Effective weight delta ``scale * B @ A`` per adapter, ``[n, out, in]``."""
        A, B = self.layers[name]
        return self.scale * B @ A

    def is_zero(self):
        return all(bool((b == 0).all()) for _, b in self.layers.values())

    def to_arrays(self):
        out = {}
        for k, (a, b) in self.layers.items():
            out[f"{k}.A"] = a
            out[f"{k}.B"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays, rank, scale=1.0):
        names = list(dict.fromkeys(k.rsplit(".", 1)[0] for k in arrays))
        layers = {n: (torch.as_tensor(arrays[f"{n}.A"]), torch.as_tensor(arrays[f"{n}.B"])) for n in names}
        return cls(layers, rank, scale)


@dataclass
class VcaConfig:
    learning_rate: float = 1e-3
    steps: int = 200
    timestep_sampling: str = "uniform"
    seed: int = 0
    rank: int = 4
    scale: float = 1.0
    T: int = 50
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.steps < 0:
            raise InvalidArgumentError("steps must be >= 0")
        if self.timestep_sampling != "uniform":
            raise InvalidArgumentError("only uniform timestep sampling is supported")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError("optimizer must be 'sgd' or 'adam'")


def vca_reward(denoiser, adapter, z0, t, eps, cond, sched: NoiseSchedule):
    """Per-sample reward ``-||eps - eps_hat(z_t, t, c)||^2`` (sum of squares, <= 0).

    ``t`` is a step index (int) or a ``[b]`` tensor of step indices.
    """
    if isinstance(t, int):
        z_t = forward_diffuse(z0, t, eps, sched)
        pred = predict_eps(denoiser, z_t, t, cond, sched, adapter)
    else:
        ab = torch.as_tensor(sched.alpha_bar, dtype=z0.dtype)[t].reshape(-1, *([1] * (z0.ndim - 1)))
        z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
        net_t = torch.as_tensor(sched.timesteps)[t]
        pred = denoiser(z_t, net_t, getattr(cond, "embedding", cond), adapter)
    return -((eps - pred) ** 2).flatten(1).sum(1)


def probe_reward(denoiser, adapter, z0, cond, sched, n_probe=64, seed=999):
    """Mean reward per image over a fixed set of ``n_probe`` (t, eps) pairs."""
    g = torch.Generator().manual_seed(seed)
    b = z0.shape[0]
    ts = torch.randint(1, sched.total_steps + 1, (n_probe,), generator=g)
    eps = torch.randn((n_probe, *z0.shape[1:]), generator=g, dtype=torch.float64).to(z0.dtype)
    total = torch.zeros(b, dtype=z0.dtype)
    with torch.no_grad():
        for k in range(n_probe):
            tk = torch.full((b,), int(ts[k]))
            total += vca_reward(denoiser, adapter, z0, tk, eps[k].expand_as(z0), cond, sched)
    return total / n_probe


def vca_finetune(denoiser, x, cfg: VcaConfig, sched: NoiseSchedule, codec, cond=None, seeds=None,
                 adapter=None, monitor_every=0):
    """Fit one adapter per image in ``x`` by stochastic gradient ascent.

    Each step draws a fresh ``(t, eps)`` per image. Images are independent: the
    batched objective is a sum, so each adapter only sees its own image's
    gradient. Returns ``(adapter, history)``; ``history`` holds probe-set mean
    rewards every ``monitor_every`` steps when that is positive.
    """
    b = x.shape[0]
    if seeds is None:
        seeds = [cfg.seed * 100003 + i for i in range(b)]
    if len(seeds) != b:
        raise InvalidArgumentError(f"need one seed per image, got {len(seeds)} for {b} images")
    if adapter is None:
        adapter = LoRAAdapter.init(denoiser, seeds=seeds, rank=cfg.rank, scale=cfg.scale, dtype=x.dtype)
    adapter = adapter.detach().requires_grad_(True)
    if cond is None:
        cond = denoiser.null_embedding().to(x.dtype)
    with torch.no_grad():
        z0 = codec.encode(x)
    # one sampling stream per image, so an image's adapter does not depend on
    # which other images share its batch
    gens = [torch.Generator().manual_seed(int(s) + SAMPLING_OFFSET) for s in seeds]
    params = adapter.tensors()
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, maximize=True) if cfg.optimizer == "adam" else None
    history = []
    for step in range(cfg.steps):
        if monitor_every and step % monitor_every == 0:
            history.append(probe_reward(denoiser, adapter, z0, cond, sched))
        t = torch.cat([torch.randint(1, sched.total_steps + 1, (1,), generator=g) for g in gens])
        eps = torch.stack([torch.randn(z0.shape[1:], generator=g, dtype=torch.float64) for g in gens]).to(z0.dtype)
        reward = vca_reward(denoiser, adapter, z0, t, eps, cond, sched).sum()
        grads = torch.autograd.grad(reward, params)
        if not all(torch.isfinite(gr).all() for gr in grads):
            raise NumericalFailureError(f"non-finite adapter gradient at step {step}", step=step)
        if opt is None:
            with torch.no_grad():
                for p, gr in zip(params, grads):
                    p.add_(cfg.learning_rate * gr)
        else:
            for p, gr in zip(params, grads):
                p.grad = gr
            opt.step()
    if monitor_every:
        history.append(probe_reward(denoiser, adapter, z0, cond, sched))
    return adapter.detach(), history


def reconstruction_robustness(denoiser, adapter, x, sigma, n_trials, seed, sched, codec, cond=None):
    """Pixel error of inversion -> perturbed ``z_T`` -> denoising.

    Returns ``{"mean": float, "per_image": [b], "per_trial": [n_trials, b]}``
    with mean absolute pixel errors against ``x``.
    """
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    if cond is None:
        cond = denoiser.null_embedding().to(x.dtype)
    zT, _ = full_inversion(x, denoiser, cond, sched, codec, adapter)
    g = torch.Generator().manual_seed(seed)
    errs = []
    with torch.no_grad():
        for _ in range(n_trials):
            noise = torch.randn(zT.shape, generator=g, dtype=torch.float64).to(zT.dtype)
            out = full_denoise(zT + sigma * noise, denoiser, cond, sched, codec, adapter=adapter)
            errs.append((out.x - x).abs().flatten(1).mean(1))
    per_trial = torch.stack(errs)
    per_image = per_trial.mean(0)
    return {"mean": float(per_image.mean()), "per_image": per_image, "per_trial": per_trial}
