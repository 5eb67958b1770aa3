"""Stage 2: optimise the inverted latent (or the conditioning vector) against a
substitute classifier.

One attack iteration denoises the current variable into an image, scores it
with the substitute's cross-entropy, and takes a momentum sign step projected
back into an L-infinity ball around the starting point. Two optional
ingredients shape the trajectory:

* step-level guidance: during the last ``T_a`` steps the noise prediction is
  pushed along the sign of an accumulated per-step reward gradient, computed on
  a blend of the clean input latent and the step's clean estimate;
* diffusion augmentation: the clean estimates of those steps are mixed with the
  final output, randomly augmented and averaged into the trajectory reward.

The trajectory gradient is either approximated at the final latent (``SG``,
skip gradient) or computed exactly through every step with per-step
recomputation (``GC``, gradient checkpointing).

All tensors carry a leading image batch; images never interact, so every norm,
momentum and reward below is per image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from apa import augment
from apa.diffusion.sampling import StepHook, full_denoise, full_inversion
from apa.diffusion.schedule import NoiseSchedule, interpolate_z0, predict_z0
from apa.errors import APAError, DegenerateConfigError, InvalidArgumentError, NumericalFailureError

log = logging.getLogger(__name__)

MODES = ("SG", "GC")
TARGETS = ("latent", "conditioning")


@dataclass
class AttackConfig:
    T: Optional[int] = None
    T_a: int = 10
    N: int = 10
    eps_a: float = 0.4
    mu: float = 0.04
    mode: str = "GC"
    target: str = "latent"
    rho: float = 1.0
    seed: int = 0
    dual_path: bool = True
    diffusion_aug: bool = True

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target == "prompt":
            self.target = "conditioning"
        if self.target not in TARGETS:
            raise InvalidArgumentError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.T is None:
            self.T = 50 if self.mode == "SG" else 10
        if not 0 <= self.T_a <= self.T:
            raise InvalidArgumentError(f"need 0 <= T_a <= T, got T_a={self.T_a}, T={self.T}")
        if self.N < 0:
            raise InvalidArgumentError("N must be >= 0")
        if not (self.eps_a > 0 and self.mu > 0 and self.rho > 0):
            raise InvalidArgumentError("eps_a, mu and rho must be positive")
        if self.target == "conditioning" and self.mode == "SG":
            raise InvalidArgumentError("skip gradient only applies to the latent target; use mode GC")

    def to_dict(self):
        return asdict(self)


@dataclass
class MomentumState:
    m_tr: torch.Tensor
    m_st: Optional[torch.Tensor] = None
    iteration: int = 0


@dataclass
class AttackState:
    """``current = anchor + delta`` with ``|delta| <= eps_a`` elementwise."""

    anchor: torch.Tensor
    delta: torch.Tensor
    momentum: MomentumState
    best_x: Optional[torch.Tensor] = None
    best_reward: Optional[torch.Tensor] = None
    best_iteration: Optional[torch.Tensor] = None
    warnings: list = field(default_factory=list)

    @classmethod
    def start(cls, anchor):
        anchor = anchor.detach()
        return cls(anchor=anchor, delta=torch.zeros_like(anchor), momentum=MomentumState(torch.zeros_like(anchor)))

    @property
    def current(self):
        return self.anchor + self.delta


class RewardModel:
    """Cross-entropy of a substitute classifier against the true labels."""

    def __init__(self, classifier, labels):
        labels = torch.as_tensor(labels).long().reshape(-1)
        k = getattr(classifier, "num_classes", None)
        if k is not None and ((labels < 0) | (labels >= k)).any():
            raise InvalidArgumentError(f"labels {labels.tolist()} outside class range [0, {k})")
        self.classifier = classifier
        self.labels = labels

    def __call__(self, x):
        """Per-image reward ``[b]`` for images in [0, 1]."""
        return F.cross_entropy(self.classifier(x), self.labels, reduction="none")


def attack_reward(model: RewardModel, x):
    return model(x)


def to_image(x):
    return x.clamp(0.0, 1.0)


def _bview(v, like):
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def _l1(g):
    return g.abs().flatten(1).sum(1)


class GuidanceHook:
    """Step-level guidance on the noise prediction.

    Holds the per-trajectory momentum ``m_st``; call ``reset`` at the start of
    every trajectory.
    """

    def __init__(self, reward_model, sched: NoiseSchedule, codec, z0_ref):
        self.reward_model = reward_model
        self.sched = sched
        self.codec = codec
        self.z0_ref = z0_ref.detach()
        self.m_st = None
        self.skipped = 0

    def reset(self):
        self.m_st = None

    def step_gradient(self, z_t, t, eps_pred):
        """Gradient of the reward at the blended clean estimate w.r.t. ``z_t``
        (the noise prediction is held fixed)."""
        with torch.enable_grad():
            z = z_t.detach().requires_grad_(True)
            z0_t = predict_z0(z, t, eps_pred.detach(), self.sched)
            z_in = interpolate_z0(self.z0_ref, z0_t, self.sched.ab(t))
            r = self.reward_model(to_image(self.codec.decode(z_in))).sum()
            (g,) = torch.autograd.grad(r, z)
        return g

    def __call__(self, z_t, t, eps_pred):
        g = self.step_gradient(z_t, t, eps_pred)
        if not torch.isfinite(g).all():
            raise NumericalFailureError(f"non-finite step gradient at step {t}", step=t)
        norm = _l1(g)
        ok = norm > 0
        if self.m_st is None:
            self.m_st = torch.zeros_like(g)
        self.m_st = self.m_st + torch.where(_bview(ok, g), g / _bview(norm.clamp_min(1e-300), g), 0.0)
        self.skipped += int((~ok).sum())
        coef = math.sqrt(1.0 - self.sched.ab(t))
        step = coef * torch.sign(self.m_st).detach()
        return eps_pred - torch.where(_bview(ok, step), step, 0.0)


def guided_denoise_hook(z_t, t, eps_pred, state_hook: GuidanceHook):
    """Functional form of ``GuidanceHook.__call__``."""
    return state_hook(z_t, t, eps_pred)


@dataclass
class Setup:
    """Everything fixed during one attack run."""

    denoiser: object
    codec: object
    sched: NoiseSchedule
    reward_model: RewardModel
    cfg: AttackConfig
    augmenter: augment.AugmentSpec
    z0_ref: torch.Tensor
    cond: torch.Tensor
    adapter: object = None
    penalty: float = 0.0
    fixed_zT: Optional[torch.Tensor] = None


def run_trajectory(setup: Setup, var, guide: Optional[GuidanceHook], grad=False, use_checkpoint=True):
    """Denoise from the optimisation variable; returns the ``DenoiseResult``."""
    cfg = setup.cfg
    if cfg.target == "latent":
        zT, cond = var, setup.cond
    else:
        zT, cond = setup.fixed_zT, var
    hooks = []
    if guide is not None:
        guide.reset()
        hooks.append(StepHook(guide, max_step=cfg.T_a))
    with torch.set_grad_enabled(grad):
        return full_denoise(zT, setup.denoiser, cond, setup.sched, setup.codec, hooks=hooks,
                            adapter=setup.adapter, use_checkpoint=use_checkpoint)


def trajectory_terms(setup: Setup, z0_bar, z0_steps, iteration, detach_steps=False):
    """Images scored by the trajectory reward.

    Without augmentation this is just the decoded output. With it, each clean
    estimate of the last ``T_a`` steps is averaged with the output, plus the
    output on its own, and every term gets its own augmentation draw.
    """
    cfg = setup.cfg
    x_bar = to_image(setup.codec.decode(z0_bar))
    if not cfg.diffusion_aug:
        return [x_bar]
    steps = [t for t in range(cfg.T_a, 0, -1)]
    if not steps:
        raise DegenerateConfigError("diffusion augmentation needs T_a >= 1 guided steps")
    terms = []
    base = iteration * (len(steps) + 1)
    for j, t in enumerate(steps):
        z = z0_steps[t].detach() if detach_steps else z0_steps[t]
        mixed = (to_image(setup.codec.decode(z)) + x_bar) / 2
        terms.append(augment.apply(setup.augmenter, mixed, base + j))
    terms.append(augment.apply(setup.augmenter, x_bar, base + len(steps)))
    return terms


def trajectory_reward(setup: Setup, z0_bar, z0_steps, iteration, detach_steps=False):
    """Per-image mean reward over the trajectory terms, minus the optional
    one-stage consistency penalty."""
    terms = trajectory_terms(setup, z0_bar, z0_steps, iteration, detach_steps)
    r = torch.stack([setup.reward_model(x) for x in terms]).mean(0)
    if setup.penalty:
        r = r - setup.penalty * (setup.z0_ref - z0_bar).flatten(1).norm(dim=1)
    return r


def augmented_trajectory_reward(setup: Setup, var, guide=None, iteration=0):
    """``(per-image reward, z0_bar, {t: z0_t})`` for the trajectory from ``var``."""
    res = run_trajectory(setup, var, guide, grad=False)
    with torch.no_grad():
        r = trajectory_reward(setup, res.z0, res.z0_steps, iteration)
    return r, res.z0, {t: res.z0_steps[t] for t in range(setup.cfg.T_a, 0, -1)}


def trajectory_gradient(setup: Setup, var, guide=None, iteration=0, use_checkpoint=True):
    """``(g_tr, per-image reward, DenoiseResult)`` for the current variable.

    SG: one no-grad trajectory, then ``rho`` times the reward gradient at the
    final clean latent, used directly as the update direction for ``z_T``.
    GC: exact gradient through every step; ``use_checkpoint=False`` keeps the
    whole graph instead (reference path for small ``T``).
    """
    cfg = setup.cfg
    if cfg.mode == "SG":
        res = run_trajectory(setup, var, guide, grad=False)
        with torch.enable_grad():
            z0_bar = res.z0.detach().requires_grad_(True)
            r = trajectory_reward(setup, z0_bar, res.z0_steps, iteration, detach_steps=True)
            (g,) = torch.autograd.grad(r.sum(), z0_bar)
        g = cfg.rho * g
    else:
        with torch.enable_grad():
            v = var.detach().requires_grad_(True)
            res = run_trajectory(setup, v, guide, grad=True, use_checkpoint=use_checkpoint)
            r = trajectory_reward(setup, res.z0, res.z0_steps, iteration)
            (g,) = torch.autograd.grad(r.sum(), v)
    if not (torch.isfinite(g).all() and torch.isfinite(r).all()):
        raise NumericalFailureError(f"non-finite trajectory reward or gradient at iteration {iteration}")
    return g.detach(), r.detach(), res


def trajectory_update(state: AttackState, g_tr, cfg: AttackConfig):
    """Momentum sign step, projected onto the L-infinity ball around the anchor.

    Images whose gradient is identically zero keep their momentum and variable;
    a warning is recorded for them.
    """
    if g_tr.shape != state.anchor.shape:
        raise InvalidArgumentError(f"gradient shape {tuple(g_tr.shape)} != variable shape {tuple(state.anchor.shape)}")
    norm = _l1(g_tr)
    ok = _bview(norm > 0, g_tr)
    m = state.momentum.m_tr + torch.where(ok, g_tr / _bview(norm.clamp_min(1e-300), g_tr), 0.0)
    step = torch.where(ok, cfg.mu * torch.sign(m), 0.0)
    state.delta = torch.clamp(state.delta + step, -cfg.eps_a, cfg.eps_a)
    state.momentum.m_tr = m
    dead = (norm == 0).nonzero().flatten().tolist()
    if dead:
        state.warnings.append(f"iteration {state.momentum.iteration}: zero gradient for images {dead}")
    state.momentum.iteration += 1
    return state


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    rewards: torch.Tensor  # [N + 1, b] reward of the trajectory evaluated at each iteration
    best_iteration: torch.Tensor
    white_box: torch.Tensor  # substitute prediction != label
    variable: torch.Tensor
    anchor: torch.Tensor
    z0_bar: torch.Tensor
    warnings: list = field(default_factory=list)
    error: Optional[str] = None

    def select(self, i):
        return {
            "rewards": self.rewards[:, i].tolist(),
            "best_iteration": int(self.best_iteration[i]),
            "white_box": bool(self.white_box[i]),
        }


def _track_best(state, x, reward, iteration):
    if state.best_reward is None:
        state.best_x, state.best_reward = x.detach().clone(), reward.detach().clone()
        state.best_iteration = torch.full_like(reward, iteration, dtype=torch.long)
        return
    better = reward > state.best_reward
    state.best_x = torch.where(_bview(better, x), x.detach(), state.best_x)
    state.best_reward = torch.where(better, reward.detach(), state.best_reward)
    state.best_iteration = torch.where(better, torch.full_like(state.best_iteration, iteration), state.best_iteration)


def prepare(x, y, denoiser, adapter, reward_classifier, cfg: AttackConfig, codec, augmenter=None,
            cond=None, penalty=0.0, sched=None):
    """Build the fixed context of an attack and invert ``x``."""
    sched = sched or NoiseSchedule.linear(cfg.T)
    if sched.total_steps != cfg.T:
        raise InvalidArgumentError(f"schedule has {sched.total_steps} steps but config T={cfg.T}")
    if cond is None:
        cond = denoiser.null_embedding().to(x.dtype).expand(x.shape[0], -1).clone()
    reward_model = reward_classifier if isinstance(reward_classifier, RewardModel) else RewardModel(reward_classifier, y)
    with torch.no_grad():
        z0_ref = codec.encode(x)
    setup = Setup(
        denoiser=denoiser, codec=codec, sched=sched, reward_model=reward_model, cfg=cfg,
        augmenter=augmenter or augment.AugmentSpec(seed=cfg.seed), z0_ref=z0_ref, cond=cond,
        adapter=adapter, penalty=float(penalty),
    )
    setup.fixed_zT, _ = full_inversion(x, denoiser, cond, sched, codec, adapter)
    return setup


def run_attack(x, y, denoiser, adapter, reward_classifier, cfg: AttackConfig, codec, augmenter=None,
               cond=None, penalty=0.0, sched=None, progress=None):
    """Full stage-2 loop over a batch of images.

    Evaluates ``N + 1`` trajectories (the last without a following update) and
    returns, per image, the evaluated output with the highest reward. With
    ``N = 0`` nothing is optimised and the output is the plain reconstruction.
    """
    setup = prepare(x, y, denoiser, adapter, reward_classifier, cfg, codec, augmenter, cond, penalty, sched)
    anchor = setup.fixed_zT if cfg.target == "latent" else setup.cond
    state = AttackState.start(anchor)
    guide = GuidanceHook(setup.reward_model, setup.sched, codec, setup.z0_ref) if (cfg.dual_path and cfg.N) else None
    rewards = []
    error = None
    last = None
    try:
        for i in range(cfg.N):
            g, _, res = trajectory_gradient(setup, state.current, guide, iteration=i)
            with torch.no_grad():
                r_plain = _plain_reward(setup, res.z0)
            rewards.append(r_plain)
            _track_best(state, to_image(codec.decode(res.z0.detach())), r_plain, i)
            trajectory_update(state, g, cfg)
            if progress is not None:
                progress(i, r_plain)
        res = run_trajectory(setup, state.current, guide, grad=False)
        with torch.no_grad():
            r_plain = _plain_reward(setup, res.z0)
        rewards.append(r_plain)
        _track_best(state, to_image(codec.decode(res.z0)), r_plain, cfg.N)
        last = res.z0
    except APAError as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.warning("attack stopped early: %s", error)
        if state.best_x is None:
            raise
    with torch.no_grad():
        pred = setup.reward_model.classifier(state.best_x).argmax(1)
    if guide is not None and guide.skipped:
        state.warnings.append(f"step guidance skipped {guide.skipped} zero-gradient updates")
    return AttackResult(
        x_adv=state.best_x,
        rewards=torch.stack(rewards),
        best_iteration=state.best_iteration,
        white_box=pred != setup.reward_model.labels,
        variable=state.current.detach(),
        anchor=state.anchor,
        z0_bar=last if last is not None else state.best_x,
        warnings=state.warnings,
        error=error,
    )


def _plain_reward(setup, z0_bar):
    """Objective value of an evaluated trajectory: the substitute reward of the
    un-augmented output (with the one-stage penalty, when active)."""
    r = setup.reward_model(to_image(setup.codec.decode(z0_bar)))
    if setup.penalty:
        r = r - setup.penalty * (setup.z0_ref - z0_bar).flatten(1).norm(dim=1)
    return r


def one_stage_baseline(x, y, denoiser, reward_classifier, cfg: AttackConfig, codec, lam, augmenter=None,
                       cond=None, sched=None, progress=None):
    """Joint optimisation without stage 1: no adapter, consistency folded into
    the reward as ``R_a - lam * ||z_0 - z0_bar||_2``."""
    if lam < 0:
        raise InvalidArgumentError("lambda must be >= 0")
    return run_attack(x, y, denoiser, None, reward_classifier, cfg, codec, augmenter, cond,
                      penalty=lam, sched=sched, progress=progress)
