import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from apa import augment
from apa.attack import (
    AttackConfig,
    AttackState,
    GuidanceHook,
    RewardModel,
    attack_reward,
    augmented_trajectory_reward,
    one_stage_baseline,
    prepare,
    run_attack,
    run_trajectory,
    to_image,
    trajectory_gradient,
    trajectory_reward,
    trajectory_update,
)
from apa.diffusion.codec import Codec
from apa.diffusion.network import Denoiser
from apa.diffusion.sampling import full_denoise, full_inversion
from apa.diffusion.schedule import NoiseSchedule, interpolate_z0, predict_z0
from apa.errors import DegenerateConfigError, InvalidArgumentError, NumericalFailureError
from apa.models import build

NEARLY_ONE = NoiseSchedule(alpha_bar=np.array([1.0, 1.0 - 1e-12]), timesteps=np.array([0, 1]))


class ToyDenoiser(nn.Module):
    """eps = tanh(W z + c t) on flattened latents; smooth and cheap."""

    def __init__(self, n, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.W = nn.Parameter(0.3 * torch.randn(n, n, generator=g, dtype=torch.float64), requires_grad=False)
        self.c = 1e-3

    def null_embedding(self):
        return torch.zeros(1, dtype=torch.float64)

    def forward(self, z, t, cond, adapter=None):
        flat = z.flatten(1)
        emb = cond.reshape(cond.shape[0] if cond.ndim > 1 else 1, -1).sum(1, keepdim=True)
        return torch.tanh(flat @ self.W.T + self.c * float(t) + emb).reshape(z.shape)


class Linear(nn.Module):
    def __init__(self, n, k=3, seed=1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.M = nn.Parameter(torch.randn(n, k, generator=g, dtype=torch.float64), requires_grad=False)
        self.num_classes = k

    def forward(self, x):
        return x.flatten(1) @ self.M


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float64)
        self.num_classes = self.logits.shape[-1]

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def toy_setup(cfg, b=1, pixels=2, seed=0):
    den = ToyDenoiser(pixels, seed)
    clf = Linear(pixels)
    g = torch.Generator().manual_seed(seed + 10)
    x = 0.3 + 0.4 * torch.rand(b, 1, 1, pixels, generator=g, dtype=torch.float64)
    y = torch.zeros(b, dtype=torch.long)
    setup = prepare(x, y, den, None, clf, cfg, Codec(), augmenter=augment.AugmentSpec.identity())
    return setup, x, y, den, clf


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    den = Denoiser(base=8, cond_dim=4).double().eval().requires_grad_(False)
    torch.manual_seed(1)
    clf = build("small_cnn_b").double().eval().requires_grad_(False)
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    return den, clf, x, torch.tensor([0, 3])


# reward ---------------------------------------------------------------------


def test_uniform_logits_reward_is_log_k():
    r = attack_reward(RewardModel(FixedLogits([[0.0, 0.0, 0.0, 0.0]]), [2]), torch.zeros(1, 3))
    assert float(r) == pytest.approx(math.log(4), abs=1e-12)


def test_confident_correct_reward_is_zero():
    r = attack_reward(RewardModel(FixedLogits([[0.0, 1000.0, 0.0, 0.0]]), [1]), torch.zeros(1, 3))
    assert float(r) == 0.0


def test_reward_matches_hand_softmax_nll():
    clf = Linear(2, k=3, seed=4)
    x = torch.tensor([[[[0.2, 0.7]]]], dtype=torch.float64)
    logits = [sum(x.flatten()[i].item() * clf.M[i, k].item() for i in range(2)) for k in range(3)]
    nll = -(logits[2] - math.log(sum(math.exp(v) for v in logits)))
    assert float(attack_reward(RewardModel(clf, [2]), x)) == pytest.approx(nll, abs=1e-12)


def test_reward_is_nonnegative_and_rejects_bad_labels():
    clf = Linear(2)
    x = torch.rand(16, 1, 1, 2, dtype=torch.float64)
    assert (RewardModel(clf, torch.arange(16) % 3)(x) >= 0).all()
    with pytest.raises(InvalidArgumentError):
        RewardModel(clf, [3])
    with pytest.raises(InvalidArgumentError):
        RewardModel(clf, [-1])


# config ---------------------------------------------------------------------


def test_config_defaults_and_validation():
    sg, gc = AttackConfig(mode="SG"), AttackConfig()
    assert (sg.T, gc.T) == (50, 10)
    assert (gc.T_a, gc.N, gc.eps_a, gc.mu) == (10, 10, 0.4, 0.04)
    assert AttackConfig(target="prompt").target == "conditioning"
    for bad in (dict(T=5, T_a=6), dict(eps_a=0), dict(mu=-1), dict(N=-1), dict(mode="xx"),
                dict(target="pixels"), dict(mode="SG", target="conditioning")):
        with pytest.raises(InvalidArgumentError):
            AttackConfig(**bad)


# guidance -------------------------------------------------------------------


def test_interpolation_examples():
    z0, z0t = torch.tensor([0.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64)
    assert float(interpolate_z0(z0, z0t, 0.75)) == pytest.approx(1.0, abs=1e-12)
    assert float(interpolate_z0(z0, z0t, 1.0)) == 2.0
    assert float(interpolate_z0(z0, z0t, 1e-300)) == pytest.approx(0.0, abs=1e-12)


def test_guidance_vanishes_as_alpha_bar_goes_to_one():
    clf = Linear(2)
    hook = GuidanceHook(RewardModel(clf, [0]), NEARLY_ONE, Codec(), torch.full((1, 1, 1, 2), 0.5, dtype=torch.float64))
    eps = torch.tensor([[[[0.3, -0.2]]]], dtype=torch.float64)
    out = hook(torch.full_like(eps, 0.4), 1, eps)
    assert torch.allclose(out, eps, atol=1e-5)
    assert not torch.equal(out, eps)


def test_guidance_step_is_sign_of_accumulated_momentum():
    sch = NoiseSchedule.linear(10)
    clf = Linear(2)
    z0 = torch.full((1, 1, 1, 2), 0.5, dtype=torch.float64)
    hook = GuidanceHook(RewardModel(clf, [0]), sch, Codec(), z0)
    eps = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    zt = torch.full_like(eps, 0.4)
    out = hook(zt, 3, eps)
    g = hook.step_gradient(zt, 3, eps)
    assert torch.allclose(hook.m_st, g / g.abs().sum())
    assert torch.allclose(out, -math.sqrt(1 - sch.ab(3)) * torch.sign(g))
    hook.reset()
    assert hook.m_st is None


def test_step_gradient_matches_chain_rule():
    """Linear classifier and identity codec: d R / d z_t follows from the
    blend weight and predict_z0's 1/sqrt(ab) factor."""
    sch = NoiseSchedule.linear(10)
    clf = Linear(2)
    z0 = torch.full((1, 1, 1, 2), 0.5, dtype=torch.float64)
    hook = GuidanceHook(RewardModel(clf, [1]), sch, Codec(), z0)
    eps = torch.tensor([[[[0.1, -0.1]]]], dtype=torch.float64)
    zt = torch.tensor([[[[0.45, 0.55]]]], dtype=torch.float64)
    t = 4
    g = hook.step_gradient(zt, t, eps)
    a = sch.ab(t)
    x = interpolate_z0(z0, predict_z0(zt, t, eps, sch), a).flatten()
    logits = x @ clf.M
    p = torch.softmax(logits, 0)
    dr_dx = clf.M @ (p - torch.nn.functional.one_hot(torch.tensor(1), 3).double())
    expect = dr_dx * (1 - math.sqrt(1 - a)) / math.sqrt(a)
    assert torch.allclose(g.flatten(), expect, atol=1e-12)


def test_zero_step_gradient_leaves_eps_unchanged():
    sch = NoiseSchedule.linear(10)
    # the blended estimate lies far outside [0, 1], so the pixel clamp kills the gradient
    hook = GuidanceHook(RewardModel(Linear(2), [0]), sch, Codec(), torch.full((1, 1, 1, 2), 5.0, dtype=torch.float64))
    eps = torch.zeros(1, 1, 1, 2, dtype=torch.float64)
    out = hook(torch.full_like(eps, 5.0), 5, eps)
    assert torch.equal(out, eps)
    assert hook.skipped == 1


def test_step_momentum_is_reset_every_trajectory():
    setup, *_ = toy_setup(AttackConfig(T=3, T_a=2, N=1))
    guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)
    run_trajectory(setup, setup.fixed_zT, guide)
    first = guide.m_st.clone()
    run_trajectory(setup, setup.fixed_zT, guide)
    assert torch.equal(guide.m_st, first)


# augmented trajectory reward --------------------------------------------------


def test_augmented_reward_idempotent_mix():
    """All clean estimates equal the output: every term is the output itself."""
    setup, *_ = toy_setup(AttackConfig(T=3, T_a=3))
    z = torch.full((1, 1, 1, 2), 0.6, dtype=torch.float64)
    r = trajectory_reward(setup, z, {1: z, 2: z, 3: z}, 0)
    assert torch.allclose(r, setup.reward_model(z), atol=1e-15)


def test_mixed_term_is_arithmetic_mean():
    from apa.attack import trajectory_terms

    setup, *_ = toy_setup(AttackConfig(T=2, T_a=1))
    a = torch.full((1, 1, 1, 2), 0.2, dtype=torch.float64)
    b = torch.full((1, 1, 1, 2), 0.6, dtype=torch.float64)
    terms = trajectory_terms(setup, b, {1: a}, 0)
    assert len(terms) == 2
    assert torch.allclose(terms[0], torch.full_like(a, 0.4), atol=1e-15)
    assert torch.equal(terms[1], b)


def test_augmented_reward_replay():
    """Recompute the mean from independently saved per-step images."""
    den = ToyDenoiser(4 * 4 * 3, seed=3)
    clf = Linear(4 * 4 * 3, k=4, seed=5)
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
    cfg = AttackConfig(T=4, T_a=3)
    spec = augment.AugmentSpec(pad_max=1, brightness_range=(0.8, 1.2), seed=11)
    setup = prepare(x, torch.tensor([1, 2]), den, None, clf, cfg, Codec(), augmenter=spec)
    guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)
    r, z0_bar, steps = augmented_trajectory_reward(setup, setup.fixed_zT, guide, iteration=2)

    saved = {}

    def keep(z_t, t, eps):
        saved[t] = predict_z0(z_t, t, eps, setup.sched).clone()

    from apa.diffusion.sampling import StepHook

    guide2 = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)

    def guided_then_keep(z_t, t, eps):
        eps = guide2(z_t, t, eps)
        keep(z_t, t, eps)
        return eps

    res = full_denoise(setup.fixed_zT, den, setup.cond, setup.sched, Codec(), hooks=[StepHook(guided_then_keep, max_step=3)])
    assert torch.equal(res.z0, z0_bar)
    xbar = res.z0.clamp(0, 1)
    images = [augment.apply(spec, ((saved[t].clamp(0, 1) + xbar) / 2), 2 * 4 + j) for j, t in enumerate((3, 2, 1))]
    images.append(augment.apply(spec, xbar, 2 * 4 + 3))
    expect = torch.stack([setup.reward_model(im) for im in images]).mean(0)
    assert torch.allclose(r, expect, atol=1e-12)
    assert sorted(steps) == [1, 2, 3]


def test_augmentation_needs_guided_steps():
    setup, *_ = toy_setup(AttackConfig(T=3, T_a=0))
    with pytest.raises(DegenerateConfigError):
        augmented_trajectory_reward(setup, setup.fixed_zT)


# trajectory gradient ---------------------------------------------------------


def test_gc_matches_full_graph_gradient(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2)
    setup = prepare(x, y, den, None, clf, cfg, Codec())
    guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)
    g_ck, r_ck, _ = trajectory_gradient(setup, setup.fixed_zT, guide, use_checkpoint=True)
    g_full, r_full, _ = trajectory_gradient(setup, setup.fixed_zT, guide, use_checkpoint=False)
    assert torch.equal(r_ck, r_full)
    assert ((g_ck - g_full).abs() <= 1e-5 * g_full.abs().max()).all()


@pytest.mark.parametrize("dual,aug", [(False, False), (True, True)])
def test_gc_gradient_matches_finite_differences(dual, aug):
    cfg = AttackConfig(T=2, T_a=2, dual_path=dual, diffusion_aug=aug)
    setup, *_ = toy_setup(cfg, pixels=2, seed=2)
    guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref) if dual else None
    g, _, _ = trajectory_gradient(setup, setup.fixed_zT, guide)

    def f(v):
        res = run_trajectory(setup, v, guide)
        return float(trajectory_reward(setup, res.z0, res.z0_steps, 0).sum())

    h = 1e-6
    for i in range(2):
        e = torch.zeros_like(setup.fixed_zT)
        e.view(-1)[i] = h
        fd = (f(setup.fixed_zT + e) - f(setup.fixed_zT - e)) / (2 * h)
        assert abs(fd - g.view(-1)[i].item()) <= 1e-3 * abs(fd)


def test_conditioning_gradient_matches_finite_differences():
    cfg = AttackConfig(T=2, T_a=2, target="conditioning")
    setup, *_ = toy_setup(cfg, seed=4)
    guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)
    g, _, _ = trajectory_gradient(setup, setup.cond, guide)
    assert g.shape == setup.cond.shape

    def f(v):
        res = run_trajectory(setup, v, guide)
        return float(trajectory_reward(setup, res.z0, res.z0_steps, 0).sum())

    h = 1e-6
    fd = (f(setup.cond + h) - f(setup.cond - h)) / (2 * h)
    assert abs(fd - g.sum().item()) <= 1e-3 * abs(fd)


def test_sg_direction_is_rho_invariant():
    signs = []
    for rho in (1.0, 2.0, 37.5):
        setup, *_ = toy_setup(AttackConfig(mode="SG", T=5, T_a=3, rho=rho), b=3, pixels=4)
        guide = GuidanceHook(setup.reward_model, setup.sched, setup.codec, setup.z0_ref)
        g, _, _ = trajectory_gradient(setup, setup.fixed_zT, guide)
        state = trajectory_update(AttackState.start(setup.fixed_zT), g, setup.cfg)
        signs.append((torch.sign(state.momentum.m_tr), state.delta))
    for s, d in signs[1:]:
        assert torch.equal(s, signs[0][0]) and torch.equal(d, signs[0][1])


def test_sg_gradient_is_scaled_output_gradient():
    cfg = AttackConfig(mode="SG", T=3, T_a=2, rho=2.0, dual_path=False, diffusion_aug=False)
    setup, *_ = toy_setup(cfg, pixels=2)
    g, _, res = trajectory_gradient(setup, setup.fixed_zT)
    z = res.z0.detach().requires_grad_(True)
    (ref,) = torch.autograd.grad(setup.reward_model(to_image(z)).sum(), z)
    assert torch.allclose(g, 2.0 * ref, atol=1e-15)


def test_non_finite_gradient_raises():
    class Bad(Linear):
        def forward(self, x):
            return super().forward(x) * torch.tensor(float("nan"))

    setup = prepare(torch.full((1, 1, 1, 2), 0.5, dtype=torch.float64), torch.tensor([0]), ToyDenoiser(2), None,
                    Bad(2), AttackConfig(T=2, T_a=1, dual_path=False), Codec(),
                    augmenter=augment.AugmentSpec.identity())
    with pytest.raises(NumericalFailureError):
        trajectory_gradient(setup, setup.fixed_zT)


# update ---------------------------------------------------------------------


def test_update_hand_example():
    cfg = AttackConfig()
    state = AttackState.start(torch.zeros(1, 2, dtype=torch.float64))
    trajectory_update(state, torch.tensor([[2.0, -2.0]], dtype=torch.float64), cfg)
    assert state.momentum.m_tr.tolist() == [[0.5, -0.5]]
    assert torch.allclose(state.current, torch.tensor([[0.04, -0.04]], dtype=torch.float64), atol=1e-15)
    assert state.momentum.iteration == 1


def test_update_clamps_to_ball():
    cfg = AttackConfig(eps_a=0.4, mu=0.5)
    state = AttackState.start(torch.zeros(1, 1))
    trajectory_update(state, torch.ones(1, 1), cfg)
    assert float(state.current) == pytest.approx(0.4)


def test_zero_gradient_leaves_state_unchanged():
    cfg = AttackConfig()
    state = AttackState.start(torch.ones(2, 3))
    trajectory_update(state, torch.tensor([[1.0, 0, 0], [0, 0, 0]]), cfg)
    m, d = state.momentum.m_tr.clone(), state.delta.clone()
    trajectory_update(state, torch.zeros(2, 3), cfg)
    assert torch.equal(state.momentum.m_tr, m) and torch.equal(state.delta, d)
    assert len(state.warnings) == 2 and "[1]" in state.warnings[0] and "[0, 1]" in state.warnings[1]


def test_update_rejects_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        trajectory_update(AttackState.start(torch.zeros(1, 2)), torch.zeros(1, 3), AttackConfig())


def test_randomized_updates_respect_projection_and_step_size():
    rng = np.random.default_rng(0)
    violations = 0
    for trial in range(1000):
        eps_a = float(rng.uniform(0.05, 1.0))
        mu = float(rng.uniform(0.01, 0.3))
        cfg = AttackConfig(eps_a=eps_a, mu=mu)
        anchor = torch.from_numpy(rng.normal(size=(2, 5)))
        state = AttackState.start(anchor)
        if trial % 2:
            state.delta = torch.from_numpy(rng.uniform(-eps_a, eps_a, size=(2, 5)))
        before = state.current.clone()
        g = torch.from_numpy(rng.normal(size=(2, 5)) * (rng.random((2, 5)) < 0.8))
        trajectory_update(state, g, cfg)
        step = state.current - before
        proposed = before - anchor + mu * torch.sign(state.momentum.m_tr)
        inside = proposed.abs() <= eps_a
        ok_step = torch.isclose(step.abs(), torch.tensor(mu, dtype=step.dtype), atol=1e-12) | (step.abs() <= 1e-12)
        violations += int(((state.current - anchor).abs() > eps_a + 1e-9).sum())
        violations += int((~ok_step & inside).sum())
    assert violations == 0


# full loop ------------------------------------------------------------------


def test_zero_iterations_returns_reconstruction(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=0)
    out = run_attack(x, y, den, None, clf, cfg, Codec())
    sch = NoiseSchedule.linear(4)
    cond = den.null_embedding().double().expand(2, -1)
    zT, _ = full_inversion(x, den, cond, sch, Codec())
    rec = full_denoise(zT, den, cond, sch, Codec()).x.clamp(0, 1)
    assert torch.allclose(out.x_adv, rec, atol=1e-12)
    assert out.rewards.shape == (1, 2)


def test_run_attack_is_deterministic_and_bounded(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=3, seed=5)
    spec = augment.AugmentSpec(seed=5)
    a = run_attack(x, y, den, None, clf, cfg, Codec(), augmenter=spec)
    b = run_attack(x, y, den, None, clf, cfg, Codec(), augmenter=spec)
    assert torch.equal(a.x_adv, b.x_adv) and torch.equal(a.rewards, b.rewards)
    assert a.rewards.shape == (4, 2)
    assert ((a.variable - a.anchor).abs() <= cfg.eps_a + 1e-9).all()
    best = a.rewards.max(0)
    assert torch.equal(a.best_iteration, best.indices)


def test_images_in_a_batch_are_independent(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=2)
    both = run_attack(x, y, den, None, clf, cfg, Codec())
    one = run_attack(x[1:], y[1:], den, None, clf, cfg, Codec())
    assert torch.allclose(both.x_adv[1:], one.x_adv, atol=1e-10)


def test_conditioning_target_keeps_latent_fixed(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=2, target="conditioning")
    out = run_attack(x, y, den, None, clf, cfg, Codec())
    assert out.variable.shape == (2, den.null_embedding().numel())
    assert ((out.variable - out.anchor).abs() <= cfg.eps_a + 1e-9).all()


def test_one_stage_lambda_zero_equals_adapterless_attack(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=2)
    a = one_stage_baseline(x, y, den, clf, cfg, Codec(), 0.0)
    b = run_attack(x, y, den, None, clf, cfg, Codec())
    assert torch.equal(a.x_adv, b.x_adv)
    with pytest.raises(InvalidArgumentError):
        one_stage_baseline(x, y, den, clf, cfg, Codec(), -1.0)


def test_large_penalty_keeps_output_near_input(small):
    den, clf, x, y = small
    cfg = AttackConfig(T=4, T_a=2, N=3)
    free = one_stage_baseline(x, y, den, clf, cfg, Codec(), 0.0)
    tight = one_stage_baseline(x, y, den, clf, cfg, Codec(), 1e6)
    dist = lambda r: (x - r.z0_bar).flatten(1).norm(dim=1)  # noqa: E731
    assert (dist(tight) <= dist(free) + 1e-12).all()
    assert dist(tight).sum() < dist(free).sum()
