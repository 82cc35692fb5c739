"""Fidelity/perceptual metrics and per-image reports.

Metrics take channels-last float images in [0, 1] (values are clamped
first) and compare full patches without border cropping or 8-bit
quantization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataio import DatasetManifest, decode_entry

METRICS = ("psnr", "ssim", "ms_ssim", "lpips")
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE = 160


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[-1] == 3:
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # Separable 'valid' correlation; axes shorter than the window are left unfiltered.
    for axis in (0, 1):
        if x.shape[axis] >= len(win):
            x = np.lib.stride_tricks.sliding_window_view(x, len(win), axis=axis) @ win
    return x


def _ssim_maps(x: np.ndarray, y: np.ndarray, win: np.ndarray):
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx**2
    syy = _filter_valid(y * y, win) - my**2
    sxy = _filter_valid(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    return lum * cs, cs


def ssim(a, b) -> float:
    """Mean SSIM of the BT.601 luma of two images (11x11 Gaussian, sigma 1.5)."""
    a, b = _pair(a, b)
    x, y = luma(a), luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    smap, _ = _ssim_maps(x, y, gaussian_window())
    return float(smap.mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    a, b = _pair(a, b)
    x, y = luma(a), luma(b)
    min_side = (SSIM_WINDOW - 1) * 2 ** (len(weights) - 1)
    if min(x.shape) < min_side:
        raise ValueError(f"MS-SSIM with {len(weights)} scales needs min side >= {min_side}, got {x.shape}")
    win = gaussian_window()
    vals = []
    for level in range(len(weights)):
        smap, cs = _ssim_maps(x, y, win)
        if level == len(weights) - 1:
            vals.append(max(float(smap.mean()), 0.0))
        else:
            vals.append(max(float(cs.mean()), 0.0))
            x, y = _downsample2(x), _downsample2(y)
    return float(np.prod([v**w for v, w in zip(vals, weights)]))


def lpips_score(a, b, ext) -> float:
    a, b = _pair(a, b)
    ta = torch.from_numpy(a[None]).float()
    tb = torch.from_numpy(b[None]).float()
    with torch.no_grad():
        return float(ext.lpips.distance(ta, tb).item())


def compute_metrics(pred, target, metrics: Sequence[str] = METRICS, ext=None) -> dict[str, float]:
    out = {}
    for name in metrics:
        if name == "psnr":
            out[name] = psnr(pred, target)
        elif name == "ssim":
            out[name] = ssim(pred, target)
        elif name == "ms_ssim":
            out[name] = ms_ssim(pred, target)
        elif name == "lpips":
            if ext is None:
                raise ValueError("lpips metric needs feature extractors")
            out[name] = lpips_score(pred, target, ext)
        else:
            raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")
    return out


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    metrics: tuple[str, ...] = METRICS
    model_tag: str = ""
    dataset_tag: str = ""
    split_tag: str = ""

    @property
    def aggregate(self) -> dict[str, float]:
        return {m: float(np.mean([r[m] for r in self.rows])) for m in self.metrics if self.rows}

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", *self.metrics])
            for r in self.rows:
                writer.writerow([r["image_id"], *(repr(r[m]) for m in self.metrics)])
        return path

    def to_markdown(self) -> str:
        arrows = {"psnr": "PSNR ↑", "ssim": "SSIM ↑", "ms_ssim": "MS-SSIM ↑", "lpips": "LPIPS ↓"}
        head = ["Model", "Dataset", "Split", *(arrows[m] for m in self.metrics)]
        agg = self.aggregate
        fmt = {"psnr": "{:.3f}", "ssim": "{:.3f}", "ms_ssim": "{:.3f}", "lpips": "{:.3f}"}
        row = [self.model_tag, self.dataset_tag, self.split_tag, *(fmt[m].format(agg[m]) for m in self.metrics)]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(row) + " |"]
        return "\n".join(lines) + "\n"


Predictor = Callable[[np.ndarray, int], np.ndarray]


def model_predictor(model) -> Predictor:
    def predict(packed: np.ndarray, index: int) -> np.ndarray:
        x = torch.from_numpy(packed[None]).to(next(model.parameters()).dtype)
        return model.infer(x)[0].double().numpy()

    return predict


def evaluate(
    model,
    manifest: DatasetManifest,
    metrics: Sequence[str] = METRICS,
    ext=None,
    out_dir=None,
    model_tag: str = "",
    dataset_tag: str = "",
    split_tag: str = "test",
    demosaic_algo: str = "bilinear",
) -> MetricReport:
    """Run inference over a paired manifest and score every patch.

    ``model`` is an :class:`~liteisp.backbone.IspModel` or any callable
    ``(packed, index) -> rgb``.
    """
    if manifest.pairing_mode != "paired":
        raise ValueError("evaluation needs a paired manifest; RGB targets are missing for: "
                         + ", ".join(manifest.stems[:10]))
    predict = model if not isinstance(model, torch.nn.Module) else model_predictor(model)
    report = MetricReport(metrics=tuple(metrics), model_tag=model_tag, dataset_tag=dataset_tag, split_tag=split_tag)
    for i, entry in enumerate(manifest.entries):
        packed, _, target = decode_entry(manifest, i, demosaic_algo)
        pred = predict(packed, i)
        row = {"image_id": entry.stem, **compute_metrics(pred, target, metrics, ext)}
        report.rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        report.to_csv(out / "metrics.csv")
        (out / "metrics.md").write_text(report.to_markdown())
    return report
