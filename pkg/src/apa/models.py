"""Desk-scale classifier zoo: one white-box substitute plus black-box targets."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from apa.errors import InvalidArgumentError, TrainingFailureError

log = logging.getLogger(__name__)

ARCHS = ("small_cnn_a", "small_cnn_b", "small_mlp", "tiny_attention")

DEFAULT_RECIPES = {
    "small_cnn_a": dict(epochs=60, lr=3e-3),
    "small_cnn_b": dict(epochs=40, lr=2e-3),
    "small_mlp": dict(epochs=300, lr=1e-3),
    "tiny_attention": dict(epochs=300, lr=2e-3),
}


@dataclass
class ClassifierSpec:
    arch: str
    num_classes: int = 4
    seed: int = 0
    epochs: Optional[int] = None
    lr: Optional[float] = None
    accuracy: Optional[float] = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise InvalidArgumentError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        recipe = DEFAULT_RECIPES[self.arch]
        if self.epochs is None:
            self.epochs = recipe["epochs"]
        if self.lr is None:
            self.lr = recipe["lr"]

    def to_dict(self):
        return asdict(self)


class Classifier(nn.Module):
    """Images in [0, 1] -> logits. ``features`` exposes the penultimate layer."""

    def __init__(self, body, feat_dim, num_classes):
        super().__init__()
        self.body = body
        self.head = nn.Linear(feat_dim, num_classes)
        self.num_classes = num_classes

    def features(self, x):
        return self.body((x - 0.5) / 0.25)

    def forward(self, x):
        return self.head(self.features(x))


class _Attention(nn.Module):
    def __init__(self, dim=64, depth=2, heads=4, patch=4, size=32):
        super().__init__()
        self.embed = nn.Conv2d(3, dim, patch + 2, stride=patch, padding=1)
        self.pos = nn.Parameter(torch.zeros(1, (size // patch) ** 2, dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=0.0, batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        tok = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.blocks(tok)).mean(1)


def build(arch, num_classes=4):
    if arch == "small_cnn_a":
        body = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        feat = 64
    elif arch == "small_cnn_b":
        body = nn.Sequential(
            nn.Conv2d(3, 24, 5, padding=2), nn.ELU(), nn.AvgPool2d(2),
            nn.Conv2d(24, 48, 5, padding=2), nn.ELU(), nn.AvgPool2d(2),
            nn.Conv2d(48, 48, 3, padding=1), nn.ELU(),
            nn.AdaptiveMaxPool2d(2), nn.Flatten(),
            nn.Linear(192, 64), nn.ELU(),
        )
        feat = 64
    elif arch == "small_mlp":
        body = nn.Sequential(nn.Flatten(), nn.Linear(3 * 32 * 32, 256), nn.ReLU(), nn.Linear(256, 128), nn.ReLU())
        feat = 128
    elif arch == "tiny_attention":
        body = _Attention()
        feat = 64
    else:
        raise InvalidArgumentError(f"unknown arch {arch!r}")
    return Classifier(body, feat, num_classes)


def signature(model):
    """(parameter count, sorted layer-type names); differs across the zoo."""
    n = sum(p.numel() for p in model.parameters())
    kinds = sorted({type(m).__name__ for m in model.modules() if not list(m.children())})
    return n, tuple(kinds)


def _augment_batch(x, g):
    """Label-preserving symmetries of the shape corpus: flips, channel
    permutations and translations of up to two pixels."""
    if torch.rand(1, generator=g) < 0.5:
        x = x.flip(3)
    if torch.rand(1, generator=g) < 0.5:
        x = x.flip(2)
    x = x[:, torch.randperm(3, generator=g)]
    dx, dy = (int(v) for v in torch.randint(-2, 3, (2,), generator=g))
    x = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
    return x


def accuracy(model, x, y, batch_size=256):
    with torch.no_grad():
        pred = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, x.shape[0], batch_size)])
    return float((pred == y).float().mean())


def train_classifier(spec: ClassifierSpec, dataset, epochs=None, lr=None, batch_size=64, gate=0.9):
    """Train from a seeded init on ``dataset["train"]``; records eval accuracy in ``spec``.

    Raises ``TrainingFailureError`` when eval accuracy is below ``gate``
    (pass ``gate=None`` to skip the check).
    """
    epochs = spec.epochs if epochs is None else epochs
    lr = spec.lr if lr is None else lr
    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        model = build(spec.arch, spec.num_classes)
    x, y = dataset["train"]
    g = torch.Generator().manual_seed(spec.seed + 7)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = max(1, epochs * ((x.shape[0] + batch_size - 1) // batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps) if epochs else None
    model.train()
    for _ in range(epochs):
        order = torch.randperm(x.shape[0], generator=g)
        for i in range(0, x.shape[0], batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(model(_augment_batch(x[idx], g)), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    model.eval()
    model.requires_grad_(False)
    acc = accuracy(model, *dataset["eval"])
    spec.accuracy = acc
    log.info("%s (seed %d): eval accuracy %.4f", spec.arch, spec.seed, acc)
    if gate is not None and acc < gate:
        raise TrainingFailureError(
            f"{spec.arch} reached eval accuracy {acc:.3f} < {gate}; train for more epochs"
        )
    return model, spec


def predict(model, x):
    """Logits ``[b, K]`` for images ``[b, 3, 32, 32]`` (a single image is batched)."""
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
        raise InvalidArgumentError(f"expected images of shape [b, 3, 32, 32], got {tuple(x.shape)}")
    return model(x)


@dataclass
class Zoo:
    substitute: Classifier
    targets: dict  # name -> Classifier
    specs: dict = field(default_factory=dict)  # name -> ClassifierSpec

    def __post_init__(self):
        sub = signature(self.substitute)
        for name, m in self.targets.items():
            if signature(m) == sub:
                raise InvalidArgumentError(f"target {name} is architecturally identical to the substitute")

    @property
    def all_models(self):
        return {"substitute": self.substitute, **self.targets}


DEFAULT_ZOO = {
    "substitute": ClassifierSpec("small_cnn_a", seed=0),
    "cnn_b": ClassifierSpec("small_cnn_b", seed=1),
    "mlp": ClassifierSpec("small_mlp", seed=2),
    "attention": ClassifierSpec("tiny_attention", seed=3),
}
