"""Three-layer convolutional ISP generators and their checkpoint format."""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .raw_pipeline import PLANE_ORDER

ARCHS = {
    "efficient": (12, 12, 12),
    "robust": (16, 4, 12),
}
UPSCALE = 2
IN_CHANNELS = 4
KERNEL = 3
CHECKPOINT_VERSION = 1


class IspModel(nn.Module):
    """conv -> tanh -> conv -> relu -> conv -> depth-to-space(2).

    Inputs and outputs are channels-last: ``(N, h, w, 4)`` packed RAW in,
    ``(N, 2h, 2w, 3)`` RGB out. In the depth-to-space step output channel
    ``c`` of the last conv lands at offset ``((c // 2) % 2, c % 2)`` inside
    each 2x2 block and belongs to colour ``c // 4``.
    """

    def __init__(self, arch: str = "efficient", seed: int = 0):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f"unknown arch {arch!r}; expected one of {sorted(ARCHS)}")
        self.arch = arch
        self.channel_plan = list(ARCHS[arch])
        self.seed = seed
        widths = [IN_CHANNELS] + self.channel_plan
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, KERNEL, padding=KERNEL // 2) for cin, cout in zip(widths, widths[1:])
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        """Kaiming-style uniform fan-in init, reproducible from ``seed``."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * KERNEL * KERNEL
                bound = 1.0 / math.sqrt(fan_in)
                w_bound = math.sqrt(3.0 / fan_in)
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * w_bound - w_bound)
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen) * 2 * bound - bound)
        self.seed = seed

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != IN_CHANNELS:
            raise ValueError(f"expected packed RAW batch (N, h, w, 4), got {tuple(x.shape)}")
        h = x.permute(0, 3, 1, 2)
        h = torch.tanh(self.convs[0](h))
        h = F.relu(self.convs[1](h))
        h = self.convs[2](h)
        h = F.pixel_shuffle(h, UPSCALE)
        return h.permute(0, 2, 3, 1)

    @torch.no_grad()
    def infer(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass clamped to [0, 1], for evaluation and export."""
        return self(x).clamp(0.0, 1.0)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def expected_param_count(arch: str) -> int:
    widths = [IN_CHANNELS] + list(ARCHS[arch])
    return sum(cin * cout * KERNEL * KERNEL + cout for cin, cout in zip(widths, widths[1:]))


def checkpoint_meta(model: IspModel) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "channel_plan": list(model.channel_plan),
        "packing": list(PLANE_ORDER),
        "upscale": UPSCALE,
        "init": "kaiming_uniform_fan_in",
        "init_seed": model.seed,
    }


def save(model: IspModel, path, extra: dict | None = None) -> Path:
    """Write ``{"meta": ..., "tensors": state_dict}`` (plus optional extras)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": checkpoint_meta(model), "tensors": model.state_dict()}
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def load(path, arch: str | None = None) -> IspModel:
    """Rebuild a model from a checkpoint; ``arch`` guards against mix-ups."""
    payload = read_checkpoint(path)
    meta = payload["meta"]
    if arch is not None and meta["arch"] != arch:
        raise ValueError(f"checkpoint {path} holds a {meta['arch']!r} model, expected {arch!r}")
    if list(meta.get("packing", PLANE_ORDER)) != list(PLANE_ORDER):
        raise ValueError(f"checkpoint {path} uses packing {meta['packing']}, expected {list(PLANE_ORDER)}")
    model = IspModel(meta["arch"], seed=meta.get("init_seed", 0))
    model.load_state_dict(payload["tensors"])
    return model
