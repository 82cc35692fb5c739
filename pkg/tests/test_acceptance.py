"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run just this file with ``pytest tests/test_acceptance.py -v -s``; the lines
are also collected into an "acceptance criteria" section of the summary.
Criteria 6 and 7 train small models on CPU and are marked ``slow``.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from oracles import central_difference, color_loss_bruteforce, psnr_bruteforce, ssim_bruteforce, tv_bruteforce

from liteisp import backbone
from liteisp.adversarial import ColorDiscriminator, color_features, d_loss, g_loss
from liteisp.backbone import IspModel, param_count
from liteisp.config import ConfigError, TrainConfig
from liteisp.dataio import PatchArrays, SyntheticDomainSpec, generate_synthetic, load_patches
from liteisp.evaluation import psnr, ssim
from liteisp.losses import color_loss, content_loss, tv_loss
from liteisp.trainer import Trainer, grad_norm, run_stage

# Desk-scale target domain: clean RGB = (M @ camera) ** (1 / 2.2).
DESK_MATRIX = ((1.6, -0.4, -0.2), (-0.3, 1.5, -0.2), (-0.1, -0.5, 1.6))


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a))


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# 1 -------------------------------------------------------------------------


def test_criterion_1_architecture(criterion):
    counts = {arch: param_count(IspModel(arch)) for arch in ("efficient", "robust")}
    shapes_ok = True
    for arch in counts:
        model = IspModel(arch)
        for h in (2, 56, 112):
            for w in (2, 56, 112):
                out = model(torch.rand(1, h, w, 4))
                shapes_ok &= tuple(out.shape) == (1, 2 * h, 2 * w, 3)
    ok = counts == {"efficient": 3060, "robust": 1616} and shapes_ok
    assert criterion(1, ok, f"params {counts}, geometry (N,h,w,4)->(N,2h,2w,3) {'ok' if shapes_ok else 'BROKEN'}")


# 2 -------------------------------------------------------------------------


def test_criterion_2_loss_oracles(criterion):
    rng = np.random.default_rng(2024)
    worst = {"tv_loss": 0.0, "color_loss": 0.0, "psnr": 0.0, "ssim": 0.0}
    for _ in range(8):
        h, w = rng.integers(16, 65, size=2)
        a = rng.uniform(size=(1, h, w, 3))
        b = np.clip(a + rng.normal(0, 0.15, size=a.shape), 0, 1)
        worst["tv_loss"] = max(worst["tv_loss"], _rel(tv_loss(_t(a)).item(), tv_bruteforce(a)))
        worst["color_loss"] = max(worst["color_loss"], _rel(color_loss(_t(a), _t(b)).item(), color_loss_bruteforce(a, b)))
        worst["psnr"] = max(worst["psnr"], _rel(psnr(a[0], b[0]), psnr_bruteforce(a[0], b[0])))
        worst["ssim"] = max(worst["ssim"], _rel(ssim(a[0], b[0]), ssim_bruteforce(a[0], b[0])))
    ok = all(v <= 1e-6 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(2, ok, f"max relative error over 8 inputs: {detail} (tol 1e-6)")


# 3 -------------------------------------------------------------------------


def _grad_rel_error(fn, x, n_probe, seed):
    xt = _t(x.copy()).requires_grad_(True)
    fn(xt).backward()
    analytic = xt.grad.numpy().reshape(-1)
    numeric = central_difference(
        lambda arr: fn(_t(arr)).item(), x.copy(), n_probe=n_probe, rng=np.random.default_rng(seed)
    )
    keys = sorted(numeric)
    a = np.array([analytic[k] for k in keys])
    n = np.array([numeric[k] for k in keys])
    return float(np.linalg.norm(a - n) / np.linalg.norm(n))


def test_criterion_3_gradient_checks(criterion, ext64):
    rng = np.random.default_rng(3)
    x, ref, real = rng.uniform(0.1, 0.9, size=(3, 2, 16, 16, 3))
    torch.manual_seed(3)
    D = ColorDiscriminator(ext64.vit.embed_dim).double()
    real_tokens = color_features(_t(real), ext64, None)
    errs = {
        "content_loss": _grad_rel_error(lambda t: content_loss(t, _t(ref), ext64), x, 128, 0),
        "color_loss": _grad_rel_error(lambda t: color_loss(t, _t(ref)), x, None, 1),
        "tv_loss": _grad_rel_error(tv_loss, x, None, 2),
        "g_loss": _grad_rel_error(lambda t: g_loss(D, real_tokens, color_features(t, ext64, None)), x, 128, 3),
    }
    ok = all(v <= 1e-3 for v in errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert criterion(3, ok, f"relative gradient error on 16x16 inputs: {detail} (tol 1e-3)")


# 4 -------------------------------------------------------------------------


class _ConstantD(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c
        self.w = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        return self.w * x.flatten(1).sum(1) + self.c


class _Shifted(torch.nn.Module):
    def __init__(self, inner, c):
        super().__init__()
        self.inner, self.c = inner, c

    def forward(self, x):
        return self.inner(x) + self.c


def test_criterion_4_relativistic_analytics(criterion):
    ln2 = math.log(2.0)
    real, fake = torch.randn(6, 9, 16, dtype=torch.float64), torch.randn(6, 9, 16, dtype=torch.float64)
    errs, zero_pen = [], True
    for c in (-3.0, 0.0, 2.5):
        D = _ConstantD(c)
        out = d_loss(D, real, fake)
        errs += [abs(out.relativistic.item() - ln2), abs(g_loss(D, real, fake).item() - ln2)]
        zero_pen &= out.r1.item() == 0.0 and out.r2.item() == 0.0
    torch.manual_seed(4)
    D = ColorDiscriminator(16).double()
    base = d_loss(D, real, fake)
    shift_err = 0.0
    for c in (-10.0, 0.5, 100.0):
        s = d_loss(_Shifted(D, c), real, fake)
        shift_err = max(shift_err, _rel(s.r1.item(), base.r1.item()), _rel(s.r2.item(), base.r2.item()))
    ok = max(errs) <= 1e-6 and zero_pen and shift_err <= 1e-9 and base.r1.item() > 0
    assert criterion(
        4, ok, f"|L - ln2| max {max(errs):.1e}; constant-D penalties zero: {zero_pen}; R1/R2 shift drift {shift_err:.1e}"
    )


# 5 -------------------------------------------------------------------------


def test_criterion_5_dynamic_loss_adaptation(criterion, tmp_path, ext):
    arr = load_patches(generate_synthetic(SyntheticDomainSpec(DESK_MATRIX, 2.2, seed=5), 6, 64, tmp_path))
    cfg = TrainConfig.from_flat({"stage": "unpaired", "batch_size": "4", "threads": "1"})
    tr = Trainer(cfg, ext=ext)
    packed, demo, target = _t(arr.packed[:4]).float(), _t(arr.demosaiced[:4]).float(), _t(arr.rgb[2:6]).float()
    snapshot = {k: v.clone() for k, v in tr.model.state_dict().items()}
    bundle = tr.train_step_unpaired(packed, demo, target)
    applied = [p.grad.clone() for p in tr.model.parameters()]

    # independently recompute every term's gradient at the pre-step weights
    model = IspModel(cfg.arch)
    model.load_state_dict(snapshot)
    params = list(model.parameters())
    probe = Trainer(cfg, model=model, ext=ext)
    probe.discs = tr.discs
    gen = model(packed)
    losses = {"content": content_loss(gen, demo, ext, "unpaired"), "tv": tv_loss(gen)}
    probe._adversarial_terms(gen, target, losses)
    norms, total = {}, [torch.zeros_like(p) for p in params]
    for name, loss in losses.items():
        grads = torch.autograd.grad(loss, params, retain_graph=True)
        w = bundle.terms[name].weight
        if float(grad_norm(grads)) > 1e-8:
            norms[name] = float(grad_norm([g * w for g in grads]))
        for t, g in zip(total, grads):
            t.add_(g * w)
    sum_err = max(float((a - b).abs().max() / b.abs().max()) for a, b in zip(applied, total))
    ok = (
        set(norms) == set(bundle.terms) == set(cfg.active_terms())
        and all(0.999 <= v <= 1.001 for v in norms.values())
        and sum_err < 1e-4
    )
    detail = ", ".join(f"{k} {v:.6f}" for k, v in norms.items())
    assert criterion(5, ok, f"post-scaling gradient norms: {detail}; applied-gradient mismatch {sum_err:.1e}")


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_pretrain_overfit(criterion, tmp_path, ext):
    arr = load_patches(generate_synthetic(SyntheticDomainSpec(seed=3), 8, 64, tmp_path / "data"))
    cfg = TrainConfig.from_flat({"stage": "pretrain", "batch_size": "8", "max_steps": "2000", "val.every": "0"})
    start = time.time()
    run_stage(cfg, arr, tmp_path / "run", ext=ext)
    elapsed = time.time() - start
    model = backbone.load(tmp_path / "run" / "checkpoints" / "last.pt")
    out = model.infer(_t(arr.packed)).numpy()
    score = float(np.mean([psnr(o, d) for o, d in zip(out, arr.demosaiced)]))
    ok = score >= 28.0 and elapsed < 15 * 60
    assert criterion(6, ok, f"train PSNR vs demosaiced {score:.2f} dB after 2000 steps (need >= 28) in {elapsed:.0f}s")


# 7 -------------------------------------------------------------------------

# Unpaired stage at desk scale: 256 RAW patches, a disjoint pool of 256
# target-domain RGB patches, 32 held-out pairs. Only the colour adversarial
# path is active (stub extractors), with a faster discriminator than the
# full-data defaults because the run is orders of magnitude shorter.
DESK_UNPAIRED = {
    "stage": "unpaired",
    "batch_size": "16",
    "max_steps": "1500",
    "loss.adv_lin0": "off",
    "loss.adv_lin3": "off",
    "disc.lr": "1e-4",
    "disc.update_period": "1",
    "val.every": "0",
}


@pytest.mark.slow
def test_criterion_7_unpaired_desk_scale(criterion, tmp_path, ext):
    spec = SyntheticDomainSpec(DESK_MATRIX, gamma=2.2, seed=11)
    arr = load_patches(generate_synthetic(spec, 256 + 256 + 32, 64, tmp_path / "data"))
    train = PatchArrays(arr.packed[:256], arr.demosaiced[:256], None, arr.stems[:256])
    pool = arr.rgb[256:512]
    test = PatchArrays(arr.packed[512:], arr.demosaiced[512:], arr.rgb[512:], arr.stems[512:])
    baseline = float(np.mean([psnr(d, r) for d, r in zip(test.demosaiced, test.rgb)]))

    start = time.time()
    pre = TrainConfig.from_flat({"stage": "pretrain", "batch_size": "16", "max_steps": "500", "val.every": "0"})
    run_stage(pre, train, tmp_path / "pre", ext=ext)
    init = str(tmp_path / "pre" / "checkpoints" / "last.pt")
    cfg = TrainConfig.from_flat({**DESK_UNPAIRED, "init_checkpoint": init})
    run_stage(cfg, train, tmp_path / "unpaired", targets=pool, ext=ext)
    elapsed = time.time() - start

    model = backbone.load(tmp_path / "unpaired" / "checkpoints" / "last.pt")
    out = model.infer(_t(test.packed)).numpy()
    score = float(np.mean([psnr(o, r) for o, r in zip(out, test.rgb)]))
    gain = score - baseline
    ok = gain >= 1.0 and elapsed < 2 * 3600
    assert criterion(
        7,
        ok,
        f"held-out PSNR {score:.2f} dB vs demosaic baseline {baseline:.2f} dB (gain {gain:+.2f}, need >= +1) "
        f"after 500 pretrain + {cfg.max_steps} unpaired steps in {elapsed:.0f}s",
    )


# 8 -------------------------------------------------------------------------


def test_criterion_8_exclusivity_and_determinism(criterion, tmp_path, ext):
    rejected = []
    for term in ("color", "lpips_plus", "dists", "mse"):
        try:
            TrainConfig.from_flat({"stage": "unpaired", f"loss.{term}": "on"})
        except ConfigError as exc:
            rejected.append(exc.key == f"loss.{term}")
        else:
            rejected.append(False)
    arr = load_patches(generate_synthetic(SyntheticDomainSpec(DESK_MATRIX, 2.2, seed=8), 8, 32, tmp_path / "d"))
    flat = {
        "stage": "unpaired", "seed": "5", "threads": "1", "batch_size": "4", "max_steps": "12",
        "disc.update_period": "3", "val.every": "6", "val.metrics": "psnr,ssim,lpips",
    }
    val = PatchArrays(arr.packed[:2], arr.demosaiced[:2], arr.rgb[:2])
    logs = []
    for run in ("a", "b"):
        _, log = run_stage(TrainConfig.from_flat(flat), arr, tmp_path / run, val=val, targets=arr.rgb, ext=ext)
        logs.append(log.read_bytes())
    same = logs[0] == logs[1] and len(logs[0].splitlines()) == 13
    ok = all(rejected) and same
    assert criterion(8, ok, f"paired-only terms rejected: {all(rejected)}; two seeded runs identical logs: {same}")


# 9 -------------------------------------------------------------------------


def test_criterion_9_full_zrr(criterion):
    root = os.environ.get("LITEISP_ZRR_ROOT")
    if not root or not Path(root).is_dir():
        criterion(9, "SKIP", "optional; needs LITEISP_ZRR_ROOT, pretrained weights and a GPU")
        pytest.skip("full ZRR dataset not available")
    pytest.skip("full ZRR reproduction is a GPU-day job; run it through the CLI (see README)")
