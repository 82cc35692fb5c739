"""Bayer mosaic handling: packing to network input, demosaicing, luminance.

All images here are channels-last. A packed RAW patch is an ``(H/2, W/2, 4)``
float array with planes in canonical ``(R, Gr, Gb, B)`` order, whatever the
sensor's Bayer pattern: ``Gr`` is the green sample sharing a row with red,
``Gb`` the one sharing a row with blue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
PLANE_ORDER = ("R", "Gr", "Gb", "B")

# (row, col) offset of each canonical plane inside the 2x2 Bayer cell.
_PLANE_OFFSETS = {
    "RGGB": {"R": (0, 0), "Gr": (0, 1), "Gb": (1, 0), "B": (1, 1)},
    "BGGR": {"B": (0, 0), "Gb": (0, 1), "Gr": (1, 0), "R": (1, 1)},
    "GRBG": {"Gr": (0, 0), "R": (0, 1), "B": (1, 0), "Gb": (1, 1)},
    "GBRG": {"Gb": (0, 0), "B": (0, 1), "R": (1, 0), "Gr": (1, 1)},
}


def plane_offsets(pattern: str) -> list[tuple[int, int]]:
    """Offsets of the (R, Gr, Gb, B) planes within a 2x2 cell of ``pattern``."""
    try:
        table = _PLANE_OFFSETS[pattern.upper()]
    except KeyError:
        raise ValueError(f"unknown Bayer pattern {pattern!r}; expected one of {PATTERNS}") from None
    return [table[name] for name in PLANE_ORDER]


@dataclass
class RawPatch:
    """A single-channel sensor mosaic with its Bayer layout and levels."""

    mosaic: np.ndarray
    pattern: str = "RGGB"
    black_level: float = 0.0
    white_level: float = 1023.0

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic)
        if self.mosaic.ndim != 2:
            raise ValueError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise ValueError(f"mosaic dimensions must be even, got {h}x{w}")
        if not 0 <= self.black_level < self.white_level:
            raise ValueError(
                f"need 0 <= black_level < white_level, got {self.black_level}, {self.white_level}"
            )
        plane_offsets(self.pattern)
        self.pattern = self.pattern.upper()

    def normalized(self) -> np.ndarray:
        """Mosaic mapped to [0, 1] by black/white level, clamped."""
        span = float(self.white_level) - float(self.black_level)
        out = (self.mosaic.astype(np.float64) - self.black_level) / span
        return np.clip(out, 0.0, 1.0)


def pack(raw: RawPatch) -> np.ndarray:
    """Pack a mosaic into the 4-plane network input, shape ``(H/2, W/2, 4)``, float32."""
    norm = raw.normalized()
    planes = [norm[dy::2, dx::2] for dy, dx in plane_offsets(raw.pattern)]
    return np.stack(planes, axis=-1).astype(np.float32)


def unpack(packed: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Inverse of :func:`pack`: rebuild the normalized mosaic."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[-1] != 4:
        raise ValueError(f"packed RAW must be (h, w, 4), got {packed.shape}")
    h, w, _ = packed.shape
    mosaic = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    for plane, (dy, dx) in enumerate(plane_offsets(pattern)):
        mosaic[dy::2, dx::2] = packed[..., plane]
    return mosaic


def cfa_masks(shape: tuple[int, int], pattern: str) -> np.ndarray:
    """Boolean ``(H, W, 3)`` masks marking where each of R, G, B was sampled."""
    h, w = shape
    masks = np.zeros((h, w, 3), dtype=bool)
    channel_of = {"R": 0, "Gr": 1, "Gb": 1, "B": 2}
    for name, (dy, dx) in zip(PLANE_ORDER, plane_offsets(pattern)):
        masks[dy::2, dx::2, channel_of[name]] = True
    return masks


def mosaic_rgb(img: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Sample an ``(H, W, 3)`` image through a Bayer filter (inverse of demosaicing)."""
    img = np.asarray(img)
    masks = cfa_masks(img.shape[:2], pattern)
    return (img * masks).sum(axis=-1)


_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def _demosaic_bilinear(mosaic: np.ndarray, pattern: str) -> np.ndarray:
    # Normalized convolution: zero padding plus division by the convolved mask
    # keeps sampled values exact and constants fixed at the borders.
    masks = cfa_masks(mosaic.shape, pattern).astype(np.float64)
    out = np.empty(mosaic.shape + (3,), dtype=np.float64)
    for c, kernel in enumerate((_RB_KERNEL, _G_KERNEL, _RB_KERNEL)):
        num = ndimage.convolve(mosaic * masks[..., c], kernel, mode="constant")
        den = ndimage.convolve(masks[..., c], kernel, mode="constant")
        out[..., c] = num / den
    return out


def _demosaic_menon(mosaic: np.ndarray, pattern: str) -> np.ndarray:
    try:
        from colour_demosaicing import demosaicing_CFA_Bayer_Menon2007
    except ImportError as exc:
        raise RuntimeError(
            "menon demosaicing needs the optional 'colour-demosaicing' package "
            "(pip install colour-demosaicing)"
        ) from exc
    return np.asarray(demosaicing_CFA_Bayer_Menon2007(mosaic, pattern), dtype=np.float64)


DEMOSAIC_ALGORITHMS: dict[str, Callable[[np.ndarray, str], np.ndarray]] = {
    "bilinear": _demosaic_bilinear,
    "menon": _demosaic_menon,
}


def demosaic(raw: RawPatch, algo: str = "bilinear") -> np.ndarray:
    """Full-resolution ``(H, W, 3)`` RGB in [0, 1] from a mosaic."""
    try:
        fn = DEMOSAIC_ALGORITHMS[algo]
    except KeyError:
        raise ValueError(
            f"unknown demosaic algorithm {algo!r}; available: {sorted(DEMOSAIC_ALGORITHMS)}"
        ) from None
    rgb = fn(raw.normalized(), raw.pattern)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


# sRGB (D65) -> CIE Y row of the linear-RGB-to-XYZ matrix.
_SRGB_TO_Y = (0.2126729, 0.7151522, 0.0721750)
_LAB_EPS = (6.0 / 29.0) ** 3


def srgb_to_linear(x: torch.Tensor) -> torch.Tensor:
    x = x.clamp(0.0, 1.0)
    return torch.where(
        x <= 0.04045, x / 12.92, ((x.clamp_min(0.04045) + 0.055) / 1.055) ** 2.4
    )


def lab_lightness(img: torch.Tensor) -> torch.Tensor:
    """CIE L* / 100 of a channels-last sRGB tensor; shape ``img.shape[:-1]``.

    Input is clamped to [0, 1] first, so out-of-range generator outputs get
    zero gradient instead of NaNs.
    """
    lin = srgb_to_linear(img)
    y = lin[..., 0] * _SRGB_TO_Y[0] + lin[..., 1] * _SRGB_TO_Y[1] + lin[..., 2] * _SRGB_TO_Y[2]
    f = torch.where(
        y > _LAB_EPS,
        y.clamp_min(_LAB_EPS) ** (1.0 / 3.0),
        y / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0,
    )
    return (116.0 * f - 16.0) / 100.0


def linear_to_srgb(x: torch.Tensor) -> torch.Tensor:
    x = x.clamp(0.0, 1.0)
    return torch.where(
        x <= 0.0031308, 12.92 * x, 1.055 * x.clamp_min(0.0031308) ** (1.0 / 2.4) - 0.055
    )


def lightness_to_gray(light: torch.Tensor) -> torch.Tensor:
    """sRGB value of the neutral gray whose L*/100 is ``light`` (monotone, 0->0, 1->1)."""
    f = (100.0 * light + 16.0) / 116.0
    y = torch.where(f > 6.0 / 29.0, f.clamp_min(6.0 / 29.0) ** 3, 3 * (6.0 / 29.0) ** 2 * (f - 4.0 / 29.0))
    return linear_to_srgb(y)


def luminance_replicate(img):
    """Keep only LAB lightness, as a gray image replicated over three channels.

    The lightness is rescaled to [0, 1] by mapping it to the sRGB level of
    the neutral gray with that L* (LAB with a = b = 0, back to sRGB), so gray
    inputs pass through unchanged and the map is idempotent. Accepts a numpy
    array or a differentiable torch tensor with a trailing channel axis of 3.
    """
    if isinstance(img, torch.Tensor):
        if img.shape[-1] != 3:
            raise ValueError(f"expected 3 trailing channels, got shape {tuple(img.shape)}")
        gray = lightness_to_gray(lab_lightness(img))
        return gray.unsqueeze(-1).expand(*gray.shape, 3).contiguous()
    arr = np.asarray(img)
    out = luminance_replicate(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)))
    return out.numpy().astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
