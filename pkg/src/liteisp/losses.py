"""Non-adversarial loss terms on channels-last RGB batches ``(N, H, W, C)``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .features import Extractors, perceptual_scores
from .raw_pipeline import luminance_replicate

CONTENT_MODES = ("paired", "unpaired")


@dataclass(frozen=True)
class GaussianKernel:
    """Sampled 2-D Gaussian ``A exp(-(m-mu_x)^2/2sx^2 - (n-mu_y)^2/2sy^2)``.

    ``amplitude`` is fixed by normalization so the taps sum to one.
    """

    size: int = 21
    sigma_x: float = 3.0
    sigma_y: float = 3.0
    mu_x: float = 0.0
    mu_y: float = 0.0

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("kernel sigmas must be positive")

    def _unnormalized(self) -> torch.Tensor:
        r = torch.arange(self.size, dtype=torch.float64) - self.size // 2
        m, n = torch.meshgrid(r, r, indexing="ij")
        return torch.exp(
            -((m - self.mu_x) ** 2) / (2 * self.sigma_x**2) - (n - self.mu_y) ** 2 / (2 * self.sigma_y**2)
        )

    @property
    def amplitude(self) -> float:
        return float(1.0 / self._unnormalized().sum())

    def weights(self, dtype=torch.float32) -> torch.Tensor:
        return (self._unnormalized() * self.amplitude).to(dtype)


def gaussian_blur(img: torch.Tensor, kernel: GaussianKernel) -> torch.Tensor:
    """Depthwise blur with reflection padding; keeps constant images fixed."""
    n, h, w, c = img.shape
    pad = kernel.size // 2
    if pad >= h or pad >= w:
        raise ValueError(f"blur kernel of size {kernel.size} needs an image larger than {pad}px, got {h}x{w}")
    x = img.permute(0, 3, 1, 2)
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    weight = kernel.weights(img.dtype).to(img.device).expand(c, 1, kernel.size, kernel.size)
    return F.conv2d(x, weight, groups=c).permute(0, 2, 3, 1)


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def content_loss(gen: torch.Tensor, ref: torch.Tensor, ext: Extractors, mode: str = "paired") -> torch.Tensor:
    """MSE between VGG relu5_4 maps, averaged over C*H*W and the batch.

    In ``unpaired`` mode both images are first reduced to replicated LAB
    lightness, so only structure is compared, not colour.
    """
    _check_same(gen, ref)
    if mode not in CONTENT_MODES:
        raise ValueError(f"content mode must be one of {CONTENT_MODES}, got {mode!r}")
    if mode == "unpaired":
        gen, ref = luminance_replicate(gen), luminance_replicate(ref)
    return F.mse_loss(ext.vgg(gen), ext.vgg(ref))


def color_loss(a: torch.Tensor, b: torch.Tensor, kernel: GaussianKernel | None = None) -> torch.Tensor:
    _check_same(a, b)
    kernel = kernel or GaussianKernel()
    return F.mse_loss(gaussian_blur(a, kernel), gaussian_blur(b, kernel))


def tv_loss(img: torch.Tensor) -> torch.Tensor:
    """Squared total variation; each direction divided by its own difference count."""
    if img.ndim != 4:
        raise ValueError(f"expected (N, H, W, C), got {tuple(img.shape)}")
    n, h, w, c = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"tv_loss needs H, W >= 2, got {h}x{w}")
    dv = ((img[:, 1:] - img[:, :-1]) ** 2).sum()
    dh = ((img[:, :, 1:] - img[:, :, :-1]) ** 2).sum()
    return (dv / ((h - 1) * w * c) + dh / (h * (w - 1) * c)) / n


def texture_losses(gen: torch.Tensor, gt: torch.Tensor, ext: Extractors) -> dict[str, torch.Tensor]:
    scores = perceptual_scores(gen, gt, ext)
    return {"lpips_plus": scores["lpips_plus"], "dists": scores["dists"]}


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return F.mse_loss(a, b)


def psnr_from_mse(mse: float) -> float:
    return 100.0 if mse < 1e-10 else -10.0 * math.log10(mse)
