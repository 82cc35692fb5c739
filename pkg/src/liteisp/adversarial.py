"""Discriminators and the relativistic loss with zero-centred R1/R2 penalties.

Discriminators score *features*, not pixels: the colour critic sees ViT
tokens of a blurred image, the texture critics see LPIPS ``lin0``/``lin3``
maps of its grayscale version. Gradient penalties are taken with respect to
those features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .features import ALEXNET_CHANNELS, LPIPS_LAYERS, Extractors, to_grayscale3
from .losses import GaussianKernel, gaussian_blur

COMPARISONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "softplus": F.softplus,
}


@dataclass(frozen=True)
class GanPenaltyConfig:
    gamma: float = 1.0
    f: str = "softplus"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.f not in COMPARISONS:
            raise ValueError(f"unknown comparison function {self.f!r}; choose from {sorted(COMPARISONS)}")

    @property
    def fn(self):
        return COMPARISONS[self.f]


def _he_init(module: nn.Module, slope: float):
    # Variance-preserving init with zero biases; the default fan-in uniform
    # init shrinks the (small, unit-normalised) feature inputs layer by
    # layer until the critic is nearly constant.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=slope, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


class ColorDiscriminator(nn.Module):
    """Per-token three-layer MLP, mean-pooled over tokens to one score per image."""

    def __init__(self, embed_dim: int, hidden: tuple[int, int] = (512, 256)):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, hidden[0]),
            nn.ReLU(),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(),
            nn.Linear(hidden[1], 1),
        )
        _he_init(self, 0.0)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.embed_dim:
            raise ValueError(f"expected tokens (N, T, {self.embed_dim}), got {tuple(tokens.shape)}")
        return self.mlp(tokens).squeeze(-1).mean(dim=1)


class TextureDiscriminator(nn.Module):
    """Five LeakyReLU convs (stride 2 on the first four), then two FC layers."""

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, ...] = (48, 96, 192, 192, 96),
        fc_width: int = 1024,
        slope: float = 0.2,
    ):
        super().__init__()
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        cin = in_channels
        for i, cout in enumerate(widths):
            layers += [nn.Conv2d(cin, cout, 3, stride=2 if i < 4 else 1, padding=1), nn.LeakyReLU(slope)]
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(cin, fc_width), nn.LeakyReLU(slope), nn.Linear(fc_width, 1))
        _he_init(self, slope)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.ndim != 4 or feats.shape[1] != self.in_channels:
            raise ValueError(
                f"texture discriminator expects (N, {self.in_channels}, h, w) features, got {tuple(feats.shape)}"
            )
        h = self.convs(feats).mean(dim=(2, 3))
        return self.head(h).squeeze(-1)


def texture_discriminator_for(layer: str, **kwargs) -> TextureDiscriminator:
    if layer not in LPIPS_LAYERS:
        raise ValueError(f"unknown LPIPS layer {layer!r}")
    return TextureDiscriminator(ALEXNET_CHANNELS[LPIPS_LAYERS.index(layer)], **kwargs)


class DLoss(NamedTuple):
    total: torch.Tensor
    relativistic: torch.Tensor
    r1: torch.Tensor
    r2: torch.Tensor


def _check_batches(real: torch.Tensor, fake: torch.Tensor):
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    if real.shape[0] != fake.shape[0]:
        raise ValueError(f"real/fake batch sizes differ: {real.shape[0]} vs {fake.shape[0]}")


def _penalty(D: nn.Module, x: torch.Tensor, gamma: float) -> tuple[torch.Tensor, torch.Tensor]:
    scores = D(x)
    if gamma == 0:
        return scores, scores.new_zeros(())
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True)
    sq = grad.pow(2).flatten(1).sum(dim=1)
    return scores, 0.5 * gamma * sq.mean()


def d_loss(D: nn.Module, real: torch.Tensor, fake: torch.Tensor, cfg: GanPenaltyConfig | None = None) -> DLoss:
    """Relativistic critic loss plus R1 (real) and R2 (fake) penalties.

    Both inputs are detached from any upstream graph; position ``i`` of the
    real batch is compared with position ``i`` of the fake batch.
    """
    cfg = cfg or GanPenaltyConfig()
    _check_batches(real, fake)
    real = real.detach().requires_grad_(cfg.gamma > 0)
    fake = fake.detach().requires_grad_(cfg.gamma > 0)
    d_real, r1 = _penalty(D, real, cfg.gamma)
    d_fake, r2 = _penalty(D, fake, cfg.gamma)
    rel = cfg.fn(-(d_real - d_fake)).mean()
    return DLoss(rel + r1 + r2, rel, r1, r2)


def g_loss(D: nn.Module, real: torch.Tensor, fake: torch.Tensor, cfg: GanPenaltyConfig | None = None) -> torch.Tensor:
    """Generator side: ``E f(-(D(fake) - D(real)))`` with real scores detached."""
    cfg = cfg or GanPenaltyConfig()
    _check_batches(real, fake)
    d_real = D(real.detach()).detach()
    return cfg.fn(-(D(fake) - d_real)).mean()


def color_features(img: torch.Tensor, ext: Extractors, kernel: GaussianKernel | None = None) -> torch.Tensor:
    """ViT tokens of the blurred image; ``kernel=None`` skips the blur."""
    if kernel is not None:
        img = gaussian_blur(img, kernel)
    return ext.vit(img)


def texture_features(img: torch.Tensor, layer: str, ext: Extractors) -> torch.Tensor:
    return ext.lpips.layer_features(to_grayscale3(img), layer)


def color_realism(
    D: ColorDiscriminator, img: torch.Tensor, ext: Extractors, kernel: GaussianKernel | None = GaussianKernel()
) -> torch.Tensor:
    return D(color_features(img, ext, kernel))


def texture_realism(D: TextureDiscriminator, img: torch.Tensor, layer: str, ext: Extractors) -> torch.Tensor:
    return D(texture_features(img, layer, ext))
