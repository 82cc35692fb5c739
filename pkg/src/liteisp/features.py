"""Frozen feature extractors behind the perceptual losses and discriminators.

Every extractor takes channels-last RGB batches ``(N, H, W, 3)`` in [0, 1],
applies its own input normalization, and never trains. Two flavours exist
for each one:

* ``pretrained`` -- the published architecture with weights read from a
  local cache populated by :func:`fetch_weights`;
* ``stub`` -- a small fixed random network with the same output contract,
  pinned by a seed, so the whole pipeline runs offline.
"""

from __future__ import annotations

import logging
import os
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

CACHE_ENV = "LITEISP_CACHE"
DEFAULT_CACHE = Path.home() / ".cache" / "liteisp"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

LPIPS_LAYERS = ("lin0", "lin1", "lin2", "lin3", "lin4")
ALEXNET_CHANNELS = (64, 192, 384, 256, 256)
# Reference-feature layer that weights spatial pooling in LPIPS+.
SEMANTIC_LAYER = 2

WEIGHT_FILES = {
    "vgg19": "vgg19.pth",
    "vgg16": "vgg16.pth",
    "alexnet": "alexnet.pth",
    "lpips_lin": "lpips_alex_v0.1.pth",
    "dists": "dists_alpha_beta.pt",
    "vit": "vit-base-patch16-224",
}
LPIPS_LIN_URL = "https://github.com/richzhang/PerceptualSimilarity/raw/master/lpips/weights/v0.1/alex.pth"
DISTS_URL = "https://github.com/dingkeyan93/DISTS/raw/master/DISTS_pytorch/weights.pt"
VIT_HUB_ID = "google/vit-base-patch16-224"


def cache_dir(path=None) -> Path:
    if path:
        return Path(path)
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE))


def to_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.ndim != 4 or img.shape[-1] != 3:
        raise ValueError(f"expected an RGB batch (N, H, W, 3), got {tuple(img.shape)}")
    return img.permute(0, 3, 1, 2)


def to_grayscale3(img):
    """BT.601 luma replicated over three channels (torch or numpy, channels-last)."""
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3 trailing channels, got shape {tuple(img.shape)}")
    y = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    if isinstance(img, torch.Tensor):
        return y.unsqueeze(-1).expand(*y.shape, 3).contiguous()
    import numpy as np

    return np.repeat(y[..., None], 3, axis=-1)


class FrozenExtractor(nn.Module):
    """Base: parameters never require grad and the module stays in eval mode."""

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        return self

    def train(self, mode: bool = True):
        return self

    def checksum(self) -> float:
        return float(sum(p.double().sum() for p in self.parameters()))


def _seeded_init(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = (6.0 / fan_in) ** 0.5
                m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.copy_((torch.rand(m.bias.shape, generator=gen) * 2 - 1) * 0.1)


def _load_state(path: Path, what: str):
    if not path.exists():
        raise FileNotFoundError(
            f"{what} weights not found at {path}; run `liteisp fetch-weights` or use extractors=stub"
        )
    return torch.load(path, map_location="cpu", weights_only=False)


class VggContent(FrozenExtractor):
    """VGG-19 relu5_4 activations (512 channels, stride 16)."""

    min_side = 16

    def __init__(self, mode: str = "stub", cache=None, seed: int = 0):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if mode in ("pretrained", "random"):
            from torchvision.models import vgg19

            net = vgg19(weights=None)
            if mode == "pretrained":
                net.load_state_dict(_load_state(cache_dir(cache) / WEIGHT_FILES["vgg19"], "VGG-19"))
            # features[35] is the ReLU after conv5_4.
            self.body = net.features[:36]
        elif mode == "stub":
            widths = (3, 16, 32, 64, 128)
            layers: list[nn.Module] = []
            for cin, cout in zip(widths, widths[1:]):
                layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            layers += [nn.Conv2d(widths[-1], 512, 3, padding=1), nn.ReLU()]
            self.body = nn.Sequential(*layers)
            _seeded_init(self.body, seed)
        else:
            raise ValueError(f"unknown extractor mode {mode!r}")
        self.freeze()

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = to_nchw(img)
        if min(x.shape[-2:]) < 2:
            raise ValueError(f"image {tuple(x.shape[-2:])} too small for VGG features")
        if min(x.shape[-2:]) < self.min_side:
            scale = self.min_side / min(x.shape[-2:])
            x = F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)
        return self.body((x - self.mean) / self.std)


class _StubTokenMixer(nn.Module):
    def __init__(self, dim: int, tokens: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.mix = nn.Linear(tokens, tokens)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        x = x + self.mix(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.mlp(self.norm2(x))


class VitTokens(FrozenExtractor):
    """Last-hidden-state patch tokens of ViT-B/16 at 224x224, CLS dropped."""

    resolution = 224
    patch = 16

    def __init__(self, mode: str = "stub", cache=None, seed: int = 0, stub_dim: int = 64):
        super().__init__()
        self.register_buffer("mean", torch.full((1, 3, 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, 3, 1, 1), 0.5))
        self.mode = mode
        tokens = (self.resolution // self.patch) ** 2
        if mode == "pretrained":
            from transformers import ViTModel

            path = cache_dir(cache) / WEIGHT_FILES["vit"]
            if not path.exists():
                raise FileNotFoundError(f"ViT weights not found at {path}; run `liteisp fetch-weights`")
            self.vit = ViTModel.from_pretrained(str(path), add_pooling_layer=False)
            self.embed_dim = self.vit.config.hidden_size
        elif mode == "stub":
            self.embed = nn.Conv2d(3, stub_dim, self.patch, stride=self.patch)
            self.pos = nn.Parameter(torch.zeros(1, tokens, stub_dim))
            self.blocks = nn.Sequential(_StubTokenMixer(stub_dim, tokens), _StubTokenMixer(stub_dim, tokens))
            self.norm = nn.LayerNorm(stub_dim)
            _seeded_init(self, seed)
            with torch.no_grad():
                self.pos.copy_(torch.randn(self.pos.shape, generator=torch.Generator().manual_seed(seed)) * 0.02)
            self.embed_dim = stub_dim
        else:
            raise ValueError(f"unknown extractor mode {mode!r}")
        self.freeze()

    @classmethod
    def from_config(cls, config) -> "VitTokens":
        """Real ViT architecture with random weights (no download), for shape checks."""
        from transformers import ViTModel

        obj = cls.__new__(cls)
        FrozenExtractor.__init__(obj)
        obj.register_buffer("mean", torch.full((1, 3, 1, 1), 0.5))
        obj.register_buffer("std", torch.full((1, 3, 1, 1), 0.5))
        obj.mode = "pretrained"
        obj.vit = ViTModel(config, add_pooling_layer=False)
        obj.embed_dim = config.hidden_size
        return obj.freeze()

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = to_nchw(img)
        if tuple(x.shape[-2:]) != (self.resolution, self.resolution):
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        x = (x - self.mean) / self.std
        if self.mode == "pretrained":
            hidden = self.vit(pixel_values=x).last_hidden_state
            return hidden[:, 1:]
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.blocks(tokens))


class LpipsNet(FrozenExtractor):
    """AlexNet-backed LPIPS with per-layer channel weights (``lin0``..``lin4``).

    ``distance`` is plain LPIPS; ``distance(..., semantic=True)`` is LPIPS+,
    which replaces the spatial mean of each layer's distance map by a mean
    weighted with the reference image's layer-2 activation energy.
    """

    def __init__(self, mode: str = "stub", cache=None, seed: int = 0):
        super().__init__()
        from torchvision.models import alexnet

        # LPIPS input scaling, applied after mapping [0, 1] to [-1, 1].
        self.register_buffer("shift", torch.tensor([-0.030, -0.088, -0.188]).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor([0.458, 0.448, 0.450]).view(1, 3, 1, 1))
        net = alexnet(weights=None)
        lins = [torch.ones(c) for c in ALEXNET_CHANNELS]
        if mode == "pretrained":
            root = cache_dir(cache)
            net.load_state_dict(_load_state(root / WEIGHT_FILES["alexnet"], "AlexNet"))
            lin_state = _load_state(root / WEIGHT_FILES["lpips_lin"], "LPIPS lin")
            lins = [lin_state[f"lin{i}.model.1.weight"].flatten() for i in range(5)]
        elif mode == "stub":
            _seeded_init(net.features, seed)
            gen = torch.Generator().manual_seed(seed + 1)
            lins = [torch.rand(c, generator=gen) / c * 2 for c in ALEXNET_CHANNELS]
        elif mode != "random":
            raise ValueError(f"unknown extractor mode {mode!r}")
        feats = net.features
        self.slices = nn.ModuleList([feats[0:2], feats[2:5], feats[5:8], feats[8:10], feats[10:12]])
        for i, w in enumerate(lins):
            self.register_buffer(f"lin{i}", w.clone().float())
        self.freeze()

    def lin_weight(self, layer: int) -> torch.Tensor:
        return getattr(self, f"lin{layer}").view(1, -1, 1, 1)

    def backbone(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = to_nchw(img) * 2 - 1
        x = (x - self.shift) / self.scale
        outs = []
        for sl in self.slices:
            x = sl(x)
            outs.append(x)
        return outs

    @staticmethod
    def _unit(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
        return feat / torch.sqrt((feat**2).sum(dim=1, keepdim=True) + eps)

    def layer_features(self, img: torch.Tensor, layer: str) -> torch.Tensor:
        """Unit-normalized backbone activations scaled by the ``lin`` weights."""
        return self.lin_features(img, [layer])[layer]

    def lin_features(self, img: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        """:meth:`layer_features` for several layers from one backbone pass."""
        for layer in layers:
            if layer not in LPIPS_LAYERS:
                raise ValueError(f"unknown LPIPS layer {layer!r}; expected one of {LPIPS_LAYERS}")
        depth = max(LPIPS_LAYERS.index(layer) for layer in layers)
        x = to_nchw(img) * 2 - 1
        x = (x - self.shift) / self.scale
        out = {}
        for idx, sl in enumerate(self.slices[: depth + 1]):
            x = sl(x)
            name = LPIPS_LAYERS[idx]
            if name in layers:
                out[name] = self._unit(x) * self.lin_weight(idx)
        return out

    def distance(self, a: torch.Tensor, ref: torch.Tensor, semantic: bool = False) -> torch.Tensor:
        """Per-image distance, shape ``(N,)``."""
        if a.shape != ref.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(ref.shape)}")
        fa, fr = self.backbone(a), self.backbone(ref)
        sw = fr[SEMANTIC_LAYER].mean(dim=1, keepdim=True) if semantic else None
        total = 0
        for i, (xa, xr) in enumerate(zip(fa, fr)):
            d = ((self._unit(xa) - self._unit(xr)) ** 2 * self.lin_weight(i)).sum(dim=1, keepdim=True)
            if sw is None:
                total = total + d.mean(dim=(1, 2, 3))
            else:
                w = F.interpolate(sw, size=d.shape[-2:], mode="bilinear", align_corners=False) + 1e-8
                total = total + (d * w).sum(dim=(1, 2, 3)) / w.sum(dim=(1, 2, 3))
        return total


class _L2Pool(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        a = torch.tensor([0.5, 1.0, 0.5])
        g = a[:, None] * a[None, :]
        g = g / g.sum()
        self.register_buffer("filter", g.view(1, 1, 3, 3).repeat(channels, 1, 1, 1))
        self.channels = channels

    def forward(self, x):
        out = F.conv2d(x**2, self.filter, stride=2, padding=1, groups=self.channels)
        return torch.sqrt(out + 1e-12)


def _vgg_stage_bounds():
    # torchvision vgg16.features index ranges for relu1_2 .. relu5_3
    return ((0, 4), (5, 9), (10, 16), (17, 23), (24, 30))


class Dists(FrozenExtractor):
    """DISTS: structure/texture similarity over VGG-16 stages with L2 pooling."""

    c1 = 1e-6
    c2 = 1e-6

    def __init__(self, mode: str = "stub", cache=None, seed: int = 0):
        super().__init__()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if mode in ("pretrained", "random"):
            from torchvision.models import vgg16

            net = vgg16(weights=None)
            if mode == "pretrained":
                net.load_state_dict(_load_state(cache_dir(cache) / WEIGHT_FILES["vgg16"], "VGG-16"))
            feats = net.features
            stages = []
            for k, (lo, hi) in enumerate(_vgg_stage_bounds()):
                mods = [] if k == 0 else [_L2Pool(feats[lo - 3].out_channels)]
                mods += list(feats[lo:hi])
                stages.append(nn.Sequential(*mods))
            self.channels = (3, 64, 128, 256, 512, 512)
        elif mode == "stub":
            widths = (3, 8, 16, 32, 32, 32)
            stages = []
            for k, (cin, cout) in enumerate(zip(widths, widths[1:])):
                mods = [] if k == 0 else [_L2Pool(cin)]
                mods += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
                stages.append(nn.Sequential(*mods))
            self.channels = widths
            _seeded_init(nn.ModuleList(stages), seed)
        else:
            raise ValueError(f"unknown extractor mode {mode!r}")
        self.stages = nn.ModuleList(stages)
        total = sum(self.channels)
        alpha = torch.full((total,), 0.1)
        beta = torch.full((total,), 0.1)
        if mode == "pretrained":
            ab = _load_state(cache_dir(cache) / WEIGHT_FILES["dists"], "DISTS alpha/beta")
            alpha, beta = ab["alpha"].flatten(), ab["beta"].flatten()
        self.register_buffer("alpha", alpha.float())
        self.register_buffer("beta", beta.float())
        self.freeze()

    def distance(self, a: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if a.shape != ref.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(ref.shape)}")
        fa, fr = self._stage_features(a), self._stage_features(ref)
        w_sum = self.alpha.sum() + self.beta.sum()
        alphas = torch.split(self.alpha / w_sum, list(self.channels))
        betas = torch.split(self.beta / w_sum, list(self.channels))
        dist1 = 0
        dist2 = 0
        for xa, xr, al, be in zip(fa, fr, alphas, betas):
            ma, mr = xa.mean(dim=(2, 3), keepdim=True), xr.mean(dim=(2, 3), keepdim=True)
            s1 = (2 * ma * mr + self.c1) / (ma**2 + mr**2 + self.c1)
            dist1 = dist1 + (al.view(1, -1, 1, 1) * s1).sum(dim=1, keepdim=True)
            va = ((xa - ma) ** 2).mean(dim=(2, 3), keepdim=True)
            vr = ((xr - mr) ** 2).mean(dim=(2, 3), keepdim=True)
            cov = (xa * xr).mean(dim=(2, 3), keepdim=True) - ma * mr
            s2 = (2 * cov + self.c2) / (va + vr + self.c2)
            dist2 = dist2 + (be.view(1, -1, 1, 1) * s2).sum(dim=1, keepdim=True)
        return (1 - (dist1 + dist2)).flatten()

    def _stage_features(self, img):
        # Stage 0 of DISTS is the raw image itself, followed by the five VGG stages.
        x = (to_nchw(img) - self.mean) / self.std
        feats = [to_nchw(img)]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


@dataclass
class Extractors:
    """The frozen networks a training run needs, built in one place."""

    vgg: VggContent
    vit: VitTokens
    lpips: LpipsNet
    dists: Dists
    mode: str = "stub"

    def modules(self) -> list[FrozenExtractor]:
        return [self.vgg, self.vit, self.lpips, self.dists]

    def checksum(self) -> float:
        return sum(m.checksum() for m in self.modules())

    def to(self, dtype=None):
        for m in self.modules():
            m.to(dtype=dtype)
        return self


def build_extractors(mode: str = "stub", cache=None, seed: int = 0) -> Extractors:
    if mode not in ("stub", "pretrained"):
        raise ValueError(f"extractors must be 'stub' or 'pretrained', got {mode!r}")
    return Extractors(
        vgg=VggContent(mode, cache, seed),
        vit=VitTokens(mode, cache, seed + 1),
        lpips=LpipsNet(mode, cache, seed + 2),
        dists=Dists(mode, cache, seed + 3),
        mode=mode,
    )


def vgg_content_features(img: torch.Tensor, ext: Extractors) -> torch.Tensor:
    return ext.vgg(img)


def vit_tokens(img: torch.Tensor, ext: Extractors) -> torch.Tensor:
    return ext.vit(img)


def lpips_layer_features(img_gray3: torch.Tensor, layer: str, ext: Extractors) -> torch.Tensor:
    return ext.lpips.layer_features(img_gray3, layer)


def perceptual_scores(a: torch.Tensor, b: torch.Tensor, ext: Extractors) -> dict[str, torch.Tensor]:
    """Batch-mean LPIPS+, DISTS and LPIPS of ``a`` against reference ``b``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return {
        "lpips_plus": ext.lpips.distance(a, b, semantic=True).mean(),
        "dists": ext.dists.distance(a, b).mean(),
        "lpips": ext.lpips.distance(a, b).mean(),
    }


def fetch_weights(cache=None) -> Path:
    """Download every pretrained weight file into the cache directory."""
    root = cache_dir(cache)
    root.mkdir(parents=True, exist_ok=True)
    from torchvision.models import AlexNet_Weights, VGG16_Weights, VGG19_Weights

    for key, enum in (
        ("vgg19", VGG19_Weights.IMAGENET1K_V1),
        ("vgg16", VGG16_Weights.IMAGENET1K_V1),
        ("alexnet", AlexNet_Weights.IMAGENET1K_V1),
    ):
        target = root / WEIGHT_FILES[key]
        if not target.exists():
            log.info("fetching %s", key)
            torch.save(enum.get_state_dict(progress=False), target)
    for key, url in (("lpips_lin", LPIPS_LIN_URL), ("dists", DISTS_URL)):
        target = root / WEIGHT_FILES[key]
        if not target.exists():
            log.info("fetching %s from %s", key, url)
            urllib.request.urlretrieve(url, target)
    vit_dir = root / WEIGHT_FILES["vit"]
    if not vit_dir.exists():
        from transformers import ViTModel

        ViTModel.from_pretrained(VIT_HUB_ID, add_pooling_layer=False).save_pretrained(vit_dir)
    return root
