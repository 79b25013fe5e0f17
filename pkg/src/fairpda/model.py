"""Three-branch adversarial network: backbone + task head + domain and gender adversaries."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError

N_CLASSES = 3


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lambd * grad_output, None


def grl(x: torch.Tensor, lambd: float) -> torch.Tensor:
    """Identity forward; gradient multiplied by ``-lambd`` on the way back."""
    if lambd < 0:
        raise ValueError("GRL coefficient must be non-negative")
    return _GradReverse.apply(x, float(lambd))


def multilinear_map(f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Row-major flattened outer product: ``h[:, i*K + j] = f[:, i] * p[:, j]``."""
    if f.dim() == 1:
        f, p = f.unsqueeze(0), p.unsqueeze(0)
        squeeze = True
    else:
        squeeze = False
    if f.dim() != 2 or p.dim() != 2 or f.shape[0] != p.shape[0]:
        raise ValidationError(f"multilinear_map shape mismatch: {tuple(f.shape)} vs {tuple(p.shape)}")
    h = torch.bmm(f.unsqueeze(2), p.unsqueeze(1)).reshape(f.shape[0], -1)
    return h[0] if squeeze else h


def mixstyle(
    x: torch.Tensor,
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    lam: Optional[torch.Tensor] = None,
    perm: Optional[torch.Tensor] = None,
    eps: float = 1e-6,
) -> torch.Tensor:
    """Mix per-sample, per-channel mean/std with a batch partner.

    ``lam`` (shape ``(B,)``) and ``perm`` may be given explicitly; otherwise
    they are drawn from ``rng`` (Beta(alpha, alpha) and a random permutation).
    Statistics use the population variance and are detached, so only the
    content path carries gradient.
    """
    b = x.shape[0]
    if b < 2:
        return x
    if lam is None or perm is None:
        if rng is None:
            raise ValueError("mixstyle needs rng when lam/perm are not given")
        if lam is None:
            lam = torch.from_numpy(rng.beta(alpha, alpha, size=b)).to(x.dtype)
        if perm is None:
            perm = torch.from_numpy(rng.permutation(b))
    lam = torch.as_tensor(lam, dtype=x.dtype).reshape(b, 1, 1, 1)
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    sig = (var + eps).sqrt()
    mu, sig = mu.detach(), sig.detach()
    normed = (x - mu) / sig
    mu_mix = lam * mu + (1 - lam) * mu[perm]
    sig_mix = lam * sig + (1 - lam) * sig[perm]
    return normed * sig_mix + mu_mix


def cross_domain_permutation(domains: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Partner for each sample drawn from a different domain when one exists."""
    domains = np.asarray(domains)
    perm = rng.permutation(len(domains))
    for i, d in enumerate(domains):
        others = np.flatnonzero(domains != d)
        if len(others):
            perm[i] = others[rng.integers(len(others))]
    return perm


@dataclass
class MixStyleConfig:
    active: bool = True
    alpha: float = 0.1
    p_apply: float = 0.5
    cross_domain: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("mixstyle alpha must be > 0")
        if not 0 <= self.p_apply <= 1:
            raise ConfigError("mixstyle p_apply must be in [0, 1]")


@dataclass
class ModelConfig:
    variant: str = "tiny"
    feature_dim: int = 64
    input_shape: tuple = (64, 198)
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    domain_input: str = "h"  # "h" = f (x) p, "f" = features only (DANN)
    domain_hidden: tuple = (256, 256)
    gender_hidden: tuple = (256, 64)

    def __post_init__(self):
        if isinstance(self.mixstyle, dict):
            self.mixstyle = MixStyleConfig(**self.mixstyle)
        self.input_shape = tuple(self.input_shape)
        self.domain_hidden = tuple(self.domain_hidden)
        self.gender_hidden = tuple(self.gender_hidden)
        if self.variant not in ("tiny", "resnet18"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if self.variant == "resnet18" and self.feature_dim != 512:
            raise ConfigError("resnet18 backbone has feature_dim 512")
        if self.variant == "tiny" and not 0 < self.feature_dim <= 128:
            raise ConfigError("tiny backbone requires 0 < feature_dim <= 128")
        if self.domain_input not in ("h", "f"):
            raise ConfigError("domain_input must be 'h' or 'f'")
        if len(self.gender_hidden) != 2:
            raise ConfigError("gender discriminator is a 3-layer MLP: give exactly two hidden widths")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_bn(c_in, c_out, kernel=3, stride=1):
    pad = kernel // 2 if stride == 1 else 0
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, pad, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four conv blocks; block 1 is a 4x4 patchifying conv to keep CPU cost low."""

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                _conv_bn(1, 16, kernel=4, stride=4),
                nn.Sequential(_conv_bn(16, 32), nn.MaxPool2d(2, ceil_mode=True)),
                nn.Sequential(_conv_bn(32, 64), nn.MaxPool2d(2, ceil_mode=True)),
                _conv_bn(64, feature_dim),
            ]
        )

    def stages(self):
        return list(self.blocks)


class ResNet18Backbone(nn.Module):
    """torchvision ResNet-18 trunk with a single-channel stem and no classifier."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.layer2, self.layer3, self.layer4 = net.layer2, net.layer3, net.layer4

    def stages(self):
        return [self.stem, self.layer2, self.layer3, self.layer4]


@dataclass
class ForwardOutput:
    f: torch.Tensor
    logits: torch.Tensor
    p: torch.Tensor
    domain_logit: torch.Tensor
    gender_logits: torch.Tensor


class FairPDAModel(nn.Module):
    """Spectrogram backbone, linear task head, domain adversary and gender adversary.

    Both adversaries sit behind their own GRL. The class probabilities that
    condition the domain adversary are detached, so the adversary shapes the
    representation only through ``f``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # construction order is fixed: backbone and task head draw from the
        # RNG before the adversaries, so baselines built from the same seed
        # start from identical weights
        self.backbone = TinyBackbone(cfg.feature_dim) if cfg.variant == "tiny" else ResNet18Backbone()
        self.classifier = nn.Linear(cfg.feature_dim, N_CLASSES)
        d_in = cfg.feature_dim * N_CLASSES if cfg.domain_input == "h" else cfg.feature_dim
        layers, width = [], d_in
        for hidden in cfg.domain_hidden:
            layers += [nn.Linear(width, hidden), nn.ReLU(inplace=True)]
            width = hidden
        self.domain_disc = nn.Sequential(*layers, nn.Linear(width, 1))
        g1, g2 = cfg.gender_hidden
        self.gender_disc = nn.Sequential(
            nn.Linear(cfg.feature_dim, g1),
            nn.ReLU(inplace=True),
            nn.Linear(g1, g2),
            nn.ReLU(inplace=True),
            nn.Linear(g2, 2),
        )
        self.register_buffer("input_mean", torch.zeros(()))
        self.register_buffer("input_std", torch.ones(()))

    def set_input_stats(self, mean: float, std: float) -> None:
        self.input_mean.fill_(float(mean))
        self.input_std.fill_(float(std) if std > 0 else 1.0)

    def features(self, x, training: bool = False, rng=None, domains=None) -> torch.Tensor:
        ms = self.cfg.mixstyle
        h = (x - self.input_mean) / self.input_std
        mixing = training and ms.active and rng is not None and x.shape[0] >= 2
        for i, stage in enumerate(self.backbone.stages()):
            h = stage(h)
            # placements: after blocks 1 and 2, one coin flip each
            if mixing and i < 2 and rng.random() < ms.p_apply:
                if ms.cross_domain and domains is not None:
                    perm = cross_domain_permutation(domains, rng)
                else:
                    perm = rng.permutation(x.shape[0])
                lam = rng.beta(ms.alpha, ms.alpha, size=x.shape[0])
                h = mixstyle(h, lam=torch.from_numpy(lam), perm=torch.from_numpy(perm))
        return torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(self.cfg.input_shape):
            raise ValidationError(f"expected input (B, 1, {self.cfg.input_shape}), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValidationError("non-finite values in input batch")
        return x

    def forward(self, x, lambda_d: float = 0.0, lambda_fair: float = 0.0, training: bool = False, rng=None, domains=None):
        x = self.check_input(x)
        self.train(training)
        f = self.features(x, training=training, rng=rng, domains=domains)
        logits = self.classifier(f)
        p = torch.softmax(logits, dim=1)
        f_d = grl(f, lambda_d)
        d_in = multilinear_map(f_d, p.detach()) if self.cfg.domain_input == "h" else f_d
        domain_logit = self.domain_disc(d_in).squeeze(1)
        gender_logits = self.gender_disc(grl(f, lambda_fair))
        return ForwardOutput(f, logits, p, domain_logit, gender_logits)
