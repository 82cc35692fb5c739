"""Training stages: demosaic pretraining, paired (with/without GAN), unpaired.

Every generator step uses Dynamic Loss Adaptation: each active loss term is
rescaled so that its gradient with respect to the generator parameters has
unit norm, and the rescaled gradients are summed.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import backbone
from .adversarial import (
    ColorDiscriminator,
    GanPenaltyConfig,
    color_features,
    d_loss,
    g_loss,
    texture_discriminator_for,
)
from .backbone import IspModel
from .config import TrainConfig
from .dataio import DatasetManifest, PatchArrays, load_patches, load_rgb_pool
from .evaluation import MS_SSIM_MIN_SIDE, compute_metrics
from .features import Extractors, build_extractors, to_grayscale3
from .losses import GaussianKernel, color_loss, content_loss, mse_loss, texture_losses, tv_loss

log = logging.getLogger(__name__)

ADV_TERMS = {"adv_color": "color", "adv_lin0": "lin0", "adv_lin3": "lin3"}


class NonFiniteGradient(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"non-finite gradient from loss term {term!r}{': ' + detail if detail else ''}")
        self.term = term


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TermRecord:
    raw_value: float
    grad_norm: float
    weight: float


@dataclass
class LossBundle:
    terms: dict[str, TermRecord]
    total: float
    step: int = 0
    disc_updated: bool = False
    disc_losses: dict[str, float] = field(default_factory=dict)

    def names(self) -> set[str]:
        return set(self.terms)


def grad_norm(grads) -> torch.Tensor:
    return torch.sqrt(sum((g.double() ** 2).sum() for g in grads if g is not None))


def dynamic_weights(loss_terms: dict[str, torch.Tensor], params, eps: float = 1e-8, accumulate: bool = True) -> LossBundle:
    """Weight each term by ``1 / max(||grad_theta L_i||, eps)``.

    One backward pass per term. With ``accumulate`` the weighted gradients
    are summed into ``p.grad``, which equals the gradient of
    ``sum_i lambda_i L_i`` with the lambdas held constant.
    """
    params = [p for p in params if p.requires_grad]
    records: dict[str, TermRecord] = {}
    summed = [torch.zeros_like(p) for p in params]
    total = 0.0
    names = list(loss_terms)
    for k, name in enumerate(names):
        loss = loss_terms[name]
        if not torch.isfinite(loss):
            raise NonFiniteGradient(name, f"loss value is {float(loss.detach())}")
        grads = torch.autograd.grad(loss, params, retain_graph=k < len(names) - 1, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
        norm = float(grad_norm(grads))
        if not math.isfinite(norm):
            raise NonFiniteGradient(name)
        weight = 1.0 / max(norm, eps)
        for acc, g in zip(summed, grads):
            acc.add_(g, alpha=weight)
        records[name] = TermRecord(float(loss.detach()), norm, weight)
        total += weight * float(loss.detach())
    if accumulate:
        for p, g in zip(params, summed):
            p.grad = g
    return LossBundle(records, total)


class Trainer:
    """Owns the generator, discriminators, optimizers and the sampling RNG."""

    def __init__(self, config: TrainConfig, model: IspModel | None = None, ext: Extractors | None = None):
        self.config = config
        torch.set_num_threads(max(1, config.threads))
        self.terms = config.active_terms()
        self.period = config.disc_period()
        self.rng = torch.Generator().manual_seed(config.seed)
        if model is None:
            if config.init_checkpoint:
                model = backbone.load(config.init_checkpoint, arch=config.arch)
            else:
                model = IspModel(config.arch, seed=config.seed)
        self.model = model
        self.ext = ext or build_extractors(config.extractors, config.cache_dir or None, seed=config.seed)
        self.kernel = GaussianKernel(config.kernel_size, config.kernel_sigma, config.kernel_sigma)
        self.gan = GanPenaltyConfig(config.gan_gamma, config.gan_f)
        self.discs = self._build_discriminators()
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.gen_lr, betas=betas)
        self.opt_d = {
            name: torch.optim.Adam(d.parameters(), lr=config.disc_lr, betas=betas) for name, d in self.discs.items()
        }
        self.step = 0

    def _build_discriminators(self) -> dict[str, torch.nn.Module]:
        discs: dict[str, torch.nn.Module] = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed + 7919)
            for term in self.terms:
                if term == "adv_color":
                    hidden = self.config.int_list("color_hidden")
                    discs[term] = ColorDiscriminator(self.ext.vit.embed_dim, hidden)
                elif term in ("adv_lin0", "adv_lin3"):
                    discs[term] = texture_discriminator_for(
                        ADV_TERMS[term],
                        widths=self.config.int_list("texture_widths"),
                        fc_width=self.config.texture_fc,
                    )
        return discs

    # -- features ---------------------------------------------------------

    def _adv_features(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = {}
        if "adv_color" in self.discs:
            feats["adv_color"] = color_features(img, self.ext, self.kernel if self.config.color_blur else None)
        layers = [ADV_TERMS[t] for t in ("adv_lin0", "adv_lin3") if t in self.discs]
        if layers:
            maps = self.ext.lpips.lin_features(to_grayscale3(img), layers)
            for layer in layers:
                feats[f"adv_{layer}"] = maps[layer]
        return feats

    # -- steps ------------------------------------------------------------

    def _generator_update(self, losses: dict[str, torch.Tensor]) -> LossBundle:
        self.opt_g.zero_grad(set_to_none=True)
        bundle = dynamic_weights(losses, self.model.parameters(), self.config.eps)
        self.opt_g.step()
        bundle.step = self.step
        return bundle

    def _disc_update(self, bundle: LossBundle, real: dict, fake: dict):
        if not self.discs or self.step % self.period:
            return
        for name, D in self.discs.items():
            opt = self.opt_d[name]
            opt.zero_grad(set_to_none=True)
            out = d_loss(D, real[name], fake[name].detach(), self.gan)
            out.total.backward()
            opt.step()
            bundle.disc_losses[name] = float(out.total.detach())
        bundle.disc_updated = True

    def pretrain_step(self, packed: torch.Tensor, demosaiced: torch.Tensor) -> LossBundle:
        self.step += 1
        gen = self.model(packed)
        losses = {}
        if "content" in self.terms:
            mode = "paired" if self.config.pretrain_content == "rgb" else "unpaired"
            losses["content"] = content_loss(gen, demosaiced, self.ext, mode)
        if "mse" in self.terms:
            losses["mse"] = mse_loss(gen, demosaiced)
        if "tv" in self.terms:
            losses["tv"] = tv_loss(gen)
        return self._generator_update(losses)

    def train_step_paired(self, packed: torch.Tensor, gt: torch.Tensor | None) -> LossBundle:
        if gt is None:
            raise ValueError("paired training step needs ground-truth RGB")
        self.step += 1
        gen = self.model(packed)
        losses = {}
        if "content" in self.terms:
            losses["content"] = content_loss(gen, gt, self.ext, "paired")
        if "lpips_plus" in self.terms or "dists" in self.terms:
            tex = texture_losses(gen, gt, self.ext)
            for name in ("lpips_plus", "dists"):
                if name in self.terms:
                    losses[name] = tex[name]
        if "tv" in self.terms:
            losses["tv"] = tv_loss(gen)
        if "color" in self.terms:
            losses["color"] = color_loss(gen, gt, self.kernel)
        real, fake = self._adversarial_terms(gen, gt, losses)
        bundle = self._generator_update(losses)
        self._disc_update(bundle, real, fake)
        return bundle

    def train_step_unpaired(self, packed: torch.Tensor, demosaiced: torch.Tensor, target: torch.Tensor) -> LossBundle:
        if target is None or target.shape[0] == 0:
            raise ValueError("unpaired training step needs a non-empty target RGB pool")
        self.step += 1
        gen = self.model(packed)
        losses = {}
        if "content" in self.terms:
            losses["content"] = content_loss(gen, demosaiced, self.ext, "unpaired")
        real, fake = self._adversarial_terms(gen, target, losses)
        if "tv" in self.terms:
            losses["tv"] = tv_loss(gen)
        bundle = self._generator_update(losses)
        self._disc_update(bundle, real, fake)
        return bundle

    def _adversarial_terms(self, gen, real_img, losses):
        if not self.discs:
            return {}, {}
        with torch.no_grad():
            real = self._adv_features(real_img)
        fake = self._adv_features(gen)
        for name, D in self.discs.items():
            losses[name] = g_loss(D, real[name], fake[name], self.gan)
        return real, fake

    # -- state ------------------------------------------------------------

    def state(self) -> dict:
        return {
            "step": self.step,
            "rng": self.rng.get_state(),
            "model": self.model.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "discs": {k: d.state_dict() for k, d in self.discs.items()},
            "opt_d": {k: o.state_dict() for k, o in self.opt_d.items()},
        }

    def load_state(self, state: dict):
        self.step = state["step"]
        self.rng.set_state(state["rng"])
        self.model.load_state_dict(state["model"])
        self.opt_g.load_state_dict(state["opt_g"])
        for k, d in self.discs.items():
            d.load_state_dict(state["discs"][k])
            self.opt_d[k].load_state_dict(state["opt_d"][k])

    def save_checkpoint(self, path, extra: dict | None = None) -> Path:
        payload = {"trainer": self.state(), "config": self.config.to_flat()}
        payload.update(extra or {})
        return backbone.save(self.model, path, payload)


# -- stage runner ----------------------------------------------------------


class _TensorData:
    def __init__(self, arrays: PatchArrays, dtype=torch.float32):
        self.packed = torch.from_numpy(arrays.packed).to(dtype)
        self.demosaiced = torch.from_numpy(arrays.demosaiced).to(dtype)
        self.rgb = None if arrays.rgb is None else torch.from_numpy(arrays.rgb).to(dtype)

    def __len__(self):
        return len(self.packed)


def _sample(n: int, batch: int, rng: torch.Generator) -> torch.Tensor:
    return torch.randint(0, n, (batch,), generator=rng)


def validate(model: IspModel, arrays: PatchArrays, metrics, ext) -> dict[str, float]:
    """Mean metrics of clamped model output against ``arrays.rgb``."""
    if arrays.rgb is None:
        raise ValueError("validation data needs RGB targets")
    side = min(arrays.rgb.shape[1:3])
    metrics = [m for m in metrics if m != "ms_ssim" or side >= MS_SSIM_MIN_SIDE]
    rows = []
    for i in range(len(arrays)):
        x = torch.from_numpy(arrays.packed[i : i + 1]).to(next(model.parameters()).dtype)
        pred = model.infer(x)[0].double().numpy()
        rows.append(compute_metrics(pred, arrays.rgb[i], metrics, ext))
    return {m: float(np.mean([r[m] for r in rows])) for m in metrics}


class MetricLog:
    """Append-only CSV: one row per step with term values, weights and validation."""

    def __init__(self, path: Path, terms, discs, val_metrics):
        self.path = Path(path)
        self.columns = ["step", "total"]
        for t in terms:
            self.columns += [t, f"lambda_{t}", f"gradnorm_{t}"]
        self.columns += [f"d_{d}" for d in discs]
        self.columns += [f"val_{m}" for m in val_metrics]

    def append(self, bundle: LossBundle, val: dict | None = None):
        fresh = not self.path.exists()
        row = {"step": bundle.step, "total": repr(bundle.total)}
        for t, rec in bundle.terms.items():
            row[t], row[f"lambda_{t}"], row[f"gradnorm_{t}"] = repr(rec.raw_value), repr(rec.weight), repr(rec.grad_norm)
        for d, v in bundle.disc_losses.items():
            row[f"d_{d}"] = repr(v)
        for m, v in (val or {}).items():
            row[f"val_{m}"] = repr(v)
        with self.path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, restval="")
            if fresh:
                writer.writeheader()
            writer.writerow(row)

    def rows(self) -> list[dict]:
        with self.path.open() as fh:
            return list(csv.DictReader(fh))


def run_stage(
    config: TrainConfig,
    train: DatasetManifest | PatchArrays,
    out_dir,
    val: DatasetManifest | PatchArrays | None = None,
    targets: DatasetManifest | np.ndarray | None = None,
    resume: bool = False,
    ext: Extractors | None = None,
):
    """Train one stage end to end and return ``(checkpoint_path, metric_log_path)``.

    ``targets`` is the unpaired target-domain RGB pool (unpaired stage only);
    it is sampled independently of the RAW batch. Checkpoints land in
    ``out_dir/checkpoints``: ``last.pt`` (resumable), ``best_psnr.pt`` and
    ``best_lpips.pt``.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.txt")
    stage = config.stage
    if stage in ("paired_full", "unpaired") and not config.init_checkpoint and not resume:
        log.warning("adversarial stage %s started without a pretrained generator", stage)

    with_rgb = stage in ("paired_no_adv", "paired_full")
    if isinstance(train, DatasetManifest):
        if with_rgb and train.pairing_mode != "paired":
            raise ValueError(f"stage {stage} needs a paired training manifest")
        train = load_patches(train, config.demosaic, with_rgb=with_rgb)
    if isinstance(val, DatasetManifest):
        val = load_patches(val, config.demosaic, with_rgb=True)
    pool = None
    if stage == "unpaired":
        if targets is None:
            raise ValueError("unpaired stage needs a target RGB pool")
        pool_arr = load_rgb_pool(targets) if isinstance(targets, DatasetManifest) else np.asarray(targets)
        if len(pool_arr) == 0:
            raise ValueError("target RGB pool is empty")
        pool = torch.from_numpy(pool_arr.astype(np.float32))

    trainer = Trainer(config, ext=ext)
    data = _TensorData(train)
    val_metrics = [m.strip() for m in config.val_metrics.split(",") if m.strip()] if val is not None else []
    if val is not None:
        side = min(val.rgb.shape[1:3])
        val_metrics = [m for m in val_metrics if m != "ms_ssim" or side >= MS_SSIM_MIN_SIDE]
    metric_log = MetricLog(out / "metrics.csv", trainer.terms, trainer.discs, val_metrics)
    best = {"psnr": -math.inf, "lpips": math.inf}
    last = ckpt_dir / "last.pt"
    if resume and last.exists():
        payload = backbone.read_checkpoint(last)
        trainer.load_state(payload["trainer"])
        best.update(payload.get("best", {}))
        log.info("resumed %s at step %d", stage, trainer.step)
    elif metric_log.path.exists():
        metric_log.path.unlink()

    good_state = copy.deepcopy(trainer.model.state_dict())
    while trainer.step < config.max_steps:
        idx = _sample(len(data), config.batch_size, trainer.rng)
        try:
            if stage == "pretrain":
                bundle = trainer.pretrain_step(data.packed[idx], data.demosaiced[idx])
            elif stage == "unpaired":
                tidx = _sample(len(pool), config.batch_size, trainer.rng)
                bundle = trainer.train_step_unpaired(data.packed[idx], data.demosaiced[idx], pool[tidx])
            else:
                bundle = trainer.train_step_paired(data.packed[idx], data.rgb[idx])
            if not all(math.isfinite(p.detach().sum().item()) for p in trainer.model.parameters()):
                raise NonFiniteGradient("update", "generator weights became non-finite")
        except NonFiniteGradient as exc:
            trainer.model.load_state_dict(good_state)
            path = backbone.save(trainer.model, ckpt_dir / "last_good.pt", {"step": trainer.step - 1})
            raise TrainingDiverged(f"stage {stage} diverged at step {trainer.step}: {exc}", path) from exc
        good_state = copy.deepcopy(trainer.model.state_dict())

        val_row = None
        periodic = config.val_every and trainer.step % config.val_every == 0
        if val is not None and (periodic or trainer.step == config.max_steps):
            val_row = validate(trainer.model, val, val_metrics, trainer.ext)
            if val_row.get("psnr", -math.inf) > best["psnr"]:
                best["psnr"] = val_row["psnr"]
                backbone.save(trainer.model, ckpt_dir / "best_psnr.pt", {"step": trainer.step, "val": val_row})
            if val_row.get("lpips", math.inf) < best["lpips"]:
                best["lpips"] = val_row["lpips"]
                backbone.save(trainer.model, ckpt_dir / "best_lpips.pt", {"step": trainer.step, "val": val_row})
            log.info("step %d val %s", trainer.step, val_row)
        metric_log.append(bundle, val_row)
        if periodic or trainer.step == config.max_steps:
            trainer.save_checkpoint(last, {"best": best})

    if not last.exists():
        trainer.save_checkpoint(last, {"best": best})
    chosen = ckpt_dir / f"best_{config.select_by}.pt"
    if not chosen.exists():
        chosen = ckpt_dir / "best_psnr.pt" if (ckpt_dir / "best_psnr.pt").exists() else last
    return chosen, metric_log.path


def pretrain(config: TrainConfig, data: DatasetManifest | PatchArrays, out_dir, val=None, ext=None) -> IspModel:
    """Demosaic pretraining: fit ``demosaic(raw)`` with content, MSE and TV terms."""
    if config.stage != "pretrain":
        config = TrainConfig.from_flat({**config.to_flat(), "stage": "pretrain"})
    _, _ = run_stage(config, data, out_dir, val=val, ext=ext)
    return backbone.load(Path(out_dir) / "checkpoints" / "last.pt", arch=config.arch)
